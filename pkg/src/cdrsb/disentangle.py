"""Interest / social-influence split and the sample-based MI upper bound.

The variational head Q(c | z) outputs a diagonal Gaussian mean and
log-variance. Its log-density is used *without* the log-variance
normaliser: ``-sum((mu - c)**2 / exp(log_var))``.

Gradient routing: the likelihood objective only trains the heads (its
inputs are detached), while the MI bound is evaluated through frozen head
parameters so it only trains the networks that produce z and c.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.func import functional_call

from .encoder import activation_fn

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0


class FeedForward(nn.Module):
    """affine -> [batch norm] -> activation -> [dropout] -> affine"""

    def __init__(self, d_in: int, hidden: int, d_out: int, activation: str = "silu",
                 dropout: float = 0.0, batch_norm: bool = False):
        super().__init__()
        self.hidden = nn.Linear(d_in, hidden)
        self.norm = nn.BatchNorm1d(hidden) if batch_norm else None
        self.act = activation_fn(activation)
        self.drop = nn.Dropout(dropout) if dropout > 0 else None
        self.out = nn.Linear(hidden, d_out)

    def forward(self, x):
        h = self.hidden(x)
        if self.norm is not None:
            h = self.norm(h)
        h = self.act(h)
        if self.drop is not None:
            h = self.drop(h)
        return self.out(h)


class VariationalHead(nn.Module):
    def __init__(self, d_prime: int, activation: str = "silu"):
        super().__init__()
        self.mu = FeedForward(d_prime, d_prime, d_prime, activation)
        self.log_var = FeedForward(d_prime, d_prime, d_prime, activation)

    def forward(self, z, frozen: bool = False):
        """Return ``(mu, log_var)`` with log_var clamped to [-10, 10].

        With ``frozen=True`` the head's parameters are treated as constants, so
        gradients flow to ``z`` but never into the head.
        """
        if frozen:
            params = {k: v.detach() for k, v in self.named_parameters()}
            mu, log_var = functional_call(self, params, (z,), {"frozen": False})
            return mu, log_var
        return self.mu(z), self.log_var(z).clamp(LOG_VAR_MIN, LOG_VAR_MAX)


def log_density(mu, log_var, c):
    """Per-sample ``-sum_dim (mu - c)^2 / exp(log_var)``."""
    return -((mu - c) ** 2 / torch.exp(log_var)).sum(dim=-1)


def gaussian_log_density(head: VariationalHead, z, c, frozen: bool = False):
    mu, log_var = head(z, frozen=frozen)
    return log_density(mu, log_var, c)


def lld_loss(head: VariationalHead, z_batch, c_batch):
    """Mean conditional log-likelihood of ``c`` given ``z`` (to be maximised)."""
    if z_batch.shape[0] == 0:
        raise ValueError("lld_loss needs a non-empty batch")
    return gaussian_log_density(head, z_batch, c_batch).mean()


def mi_upper_bound(head: VariationalHead, z_batch, c_batch, frozen: bool = False):
    """(1/N) sum_i [ log Q(c_i|z_i) - (1/N) sum_{k != i} log Q(c_k|z_i) ].

    The negative sum has N-1 terms but is divided by N, as written in the
    method's closed form. Computed in O(N d) by expanding the square.
    """
    n = z_batch.shape[0]
    if n < 2:
        raise ValueError("mi_upper_bound needs at least 2 samples; skip the MI term for this batch")
    mu, log_var = head(z_batch, frozen=frozen)
    inv_var = torch.exp(-log_var)
    positive = -((mu - c_batch) ** 2 * inv_var).sum(dim=-1)
    # sum_k (mu_i - c_k)^2 = N mu_i^2 - 2 mu_i sum_k c_k + sum_k c_k^2, per dimension
    c_sum = c_batch.sum(dim=0)
    c_sq_sum = (c_batch ** 2).sum(dim=0)
    all_pairs = -((n * mu ** 2 - 2 * mu * c_sum + c_sq_sum) * inv_var).sum(dim=-1)
    negative = all_pairs - positive
    return (positive - negative / n).mean()


def mi_upper_bound_bruteforce(mu, log_var, c):
    """Double loop over the same expression; test oracle for :func:`mi_upper_bound`."""
    n = c.shape[0]
    total = 0.0
    for i in range(n):
        pos = log_density(mu[i], log_var[i], c[i])
        neg = sum(log_density(mu[i], log_var[i], c[k]) for k in range(n) if k != i)
        total = total + pos - neg / n
    return total / n


@dataclass
class DisentangledPair:
    z_u: torch.Tensor
    c_u: torch.Tensor
    z_v: torch.Tensor
    c_v: torch.Tensor


class Disentangler(nn.Module):
    """Four independent networks (user/item x interest/social) plus the two heads."""

    def __init__(self, d: int = 64, d_prime: int = 64, activation: str = "silu",
                 dropout: float = 0.1, batch_norm: bool = True):
        super().__init__()
        kw = dict(activation=activation, dropout=dropout, batch_norm=batch_norm)
        self.user_interest = FeedForward(d, d_prime, d_prime, **kw)   # Θ0
        self.user_social = FeedForward(d, d_prime, d_prime, **kw)     # Θ1
        self.item_interest = FeedForward(d, d_prime, d_prime, **kw)   # Θ2
        self.item_social = FeedForward(d, d_prime, d_prime, **kw)     # Θ3
        self.user_head = VariationalHead(d_prime, activation)        # θ_u
        self.item_head = VariationalHead(d_prime, activation)        # θ_v

    def split_user(self, x_u):
        return self.user_interest(x_u), self.user_social(x_u)

    def split_item(self, x_v):
        return self.item_interest(x_v), self.item_social(x_v)

    def forward(self, x_u, x_v) -> DisentangledPair:
        z_u, c_u = self.split_user(x_u)
        z_v, c_v = self.split_item(x_v)
        return DisentangledPair(z_u, c_u, z_v, c_v)

    def mi_total(self, pair: DisentangledPair, frozen_heads: bool = True):
        """User-side plus item-side MI bound; heads frozen unless asked otherwise."""
        return (mi_upper_bound(self.user_head, pair.z_u, pair.c_u, frozen=frozen_heads)
                + mi_upper_bound(self.item_head, pair.z_v, pair.c_v, frozen=frozen_heads))

    def lld_total(self, pair: DisentangledPair, detach_inputs: bool = True):
        """Negated sum of both sides' log-likelihoods (a loss to minimise).

        With ``detach_inputs`` the embeddings are constants here, so only the
        heads receive gradient from this term.
        """
        g = (lambda t: t.detach()) if detach_inputs else (lambda t: t)
        return -(lld_loss(self.user_head, g(pair.z_u), g(pair.c_u))
                 + lld_loss(self.item_head, g(pair.z_v), g(pair.c_v)))

    def head_parameters(self):
        return list(self.user_head.parameters()) + list(self.item_head.parameters())


def fit_head(head: VariationalHead, z, c, steps: int = 2000, lr: float = 1e-2,
             batch_size: int = 512, seed: int = 0) -> list[float]:
    """Fit a head on fixed samples by maximising the mean log-likelihood with Adam.

    Returns the per-step objective values.
    """
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    history = []
    n = z.shape[0]
    for _ in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=g)
        loss = -lld_loss(head, z[idx], c[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(-loss.item())
    return history
