"""One-hop graph encoder producing the user and item representations x_u, x_v.

Each projection site has its own affine map followed by the activation:
ID rows, history items, rating tokens and trusted users on the user side;
ID rows, raters and rating tokens on the item side. Neighbourhoods are
mean-aggregated and concatenated with the ID projection before a final
affine + activation layer.

Two code paths exist. ``encode_user`` / ``encode_item`` walk the bundle's
python neighbourhood lists and serve as the readable reference; ``forward``
does the same arithmetic for a batch with sparse row-normalised operators.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .dataset import DatasetBundle

_ACTIVATIONS = {
    "silu": F.silu,
    "gelu": F.gelu,
    "softplus": F.softplus,
    "elu": F.elu,
    "tanh": torch.tanh,
    "relu": F.relu,
    "identity": lambda x: x,
}


def activation_fn(name: str):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(_ACTIVATIONS)}") from None


def derive_seed(seed: int, *names) -> int:
    """Stable 63-bit sub-seed for one concern (init of a given module, negatives, ...)."""
    h = hashlib.sha256(repr((int(seed),) + tuple(str(n) for n in names)).encode()).digest()
    return int.from_bytes(h[:8], "little") & ((1 << 63) - 1)


def init_linear_(layer: nn.Linear, generator: torch.Generator) -> None:
    bound = 1.0 / np.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=generator)


def reset_module_(module: nn.Module, seed: int, name: str) -> None:
    """Re-initialise every Linear/Embedding under ``module`` from a named sub-seed."""
    g = torch.Generator().manual_seed(derive_seed(seed, name))
    for sub in module.modules():
        if isinstance(sub, nn.Linear):
            init_linear_(sub, g)
        elif isinstance(sub, nn.Embedding):
            # a one-hot input has a single active coordinate, so fan-in is 1
            with torch.no_grad():
                sub.weight.uniform_(-1.0, 1.0, generator=g)
        elif isinstance(sub, nn.BatchNorm1d):
            sub.reset_parameters()


def aggregate_mean(vectors, d: int | None = None) -> torch.Tensor:
    """Mean over a stack of vectors; the zero vector for an empty neighbourhood."""
    if isinstance(vectors, (list, tuple)):
        if len(vectors) == 0:
            if d is None:
                raise ValueError("d is required to aggregate an empty list")
            return torch.zeros(d)
        vectors = torch.stack(list(vectors))
    if vectors.shape[0] == 0:
        return vectors.new_zeros(vectors.shape[1:])
    return vectors.mean(dim=0)


def _sparse_rows(mat, rows: np.ndarray, dtype) -> torch.Tensor:
    sub = mat[rows].tocoo()
    idx = torch.from_numpy(np.vstack([sub.row, sub.col]).astype(np.int64))
    return torch.sparse_coo_tensor(idx, torch.from_numpy(sub.data).to(dtype), sub.shape,
                                   check_invariants=False)


class GraphEncoder(nn.Module):
    def __init__(self, n: int, m: int, num_ratings: int, d: int = 64, activation: str = "silu"):
        super().__init__()
        self.n, self.m, self.d = n, m, d
        self.activation = activation
        self.act = activation_fn(activation)
        self.user_table = nn.Embedding(n, d)
        self.item_table = nn.Embedding(m, d)
        self.rating_table = nn.Embedding(num_ratings, d)
        # user side
        self.user_id_proj = nn.Linear(d, d)
        self.history_item_proj = nn.Linear(d, d)
        self.user_rating_proj = nn.Linear(d, d)
        self.friend_proj = nn.Linear(d, d)
        self.user_concat = nn.Linear(4 * d, d)
        # item side
        self.item_id_proj = nn.Linear(d, d)
        self.rater_proj = nn.Linear(d, d)
        self.item_rating_proj = nn.Linear(d, d)
        self.item_concat = nn.Linear(3 * d, d)

    def _site(self, proj: nn.Linear, table: nn.Embedding, ids) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        return self.act(proj(table(ids)))

    # -- reference (per-entity) path -----------------------------------------
    def lookup_embeddings(self, bundle: DatasetBundle, user_id: int):
        """Return ``(p, r, e, t)``: the projected ID row and the projected history
        items, history rating tokens and trusted users, each ``(k, d)``."""
        hist = bundle.history(user_id)
        items = [i for i, _ in hist]
        ratings = [bundle.rating_index(r) for _, r in hist]
        friends = list(bundle.social.neighbors(user_id))
        p = self._site(self.user_id_proj, self.user_table, [user_id])[0]
        r = self._site(self.history_item_proj, self.item_table, items)
        e = self._site(self.user_rating_proj, self.rating_table, ratings)
        t = self._site(self.friend_proj, self.user_table, friends)
        return p, r, e, t

    def encode_user(self, bundle: DatasetBundle, user_id: int) -> torch.Tensor:
        p, r, e, t = self.lookup_embeddings(bundle, user_id)
        h = torch.cat([p, aggregate_mean(r), aggregate_mean(e), aggregate_mean(t)])
        return self.act(self.user_concat(h))

    def encode_item(self, bundle: DatasetBundle, item_id: int) -> torch.Tensor:
        raters = bundle.raters(item_id)
        users = [u for u, _ in raters]
        ratings = [bundle.rating_index(r) for _, r in raters]
        q = self._site(self.item_id_proj, self.item_table, [item_id])[0]
        ru = self._site(self.rater_proj, self.user_table, users)
        ev = self._site(self.item_rating_proj, self.rating_table, ratings)
        h = torch.cat([q, aggregate_mean(ru), aggregate_mean(ev)])
        return self.act(self.item_concat(h))

    # -- batched path ---------------------------------------------------------
    def encode_users(self, bundle: DatasetBundle, users) -> torch.Tensor:
        users = np.asarray(users, dtype=np.int64)
        dtype = self.user_table.weight.dtype
        user_items, user_ratings, user_friends, _, _ = bundle.aggregation_matrices()
        p = self._site(self.user_id_proj, self.user_table, users)
        r_all = self.act(self.history_item_proj(self.item_table.weight))
        e_all = self.act(self.user_rating_proj(self.rating_table.weight))
        t_all = self.act(self.friend_proj(self.user_table.weight))
        r = torch.sparse.mm(_sparse_rows(user_items, users, dtype), r_all)
        e = torch.sparse.mm(_sparse_rows(user_ratings, users, dtype), e_all)
        t = torch.sparse.mm(_sparse_rows(user_friends, users, dtype), t_all)
        return self.act(self.user_concat(torch.cat([p, r, e, t], dim=1)))

    def encode_items(self, bundle: DatasetBundle, items) -> torch.Tensor:
        items = np.asarray(items, dtype=np.int64)
        dtype = self.item_table.weight.dtype
        _, _, _, item_users, item_ratings = bundle.aggregation_matrices()
        q = self._site(self.item_id_proj, self.item_table, items)
        ru_all = self.act(self.rater_proj(self.user_table.weight))
        ev_all = self.act(self.item_rating_proj(self.rating_table.weight))
        ru = torch.sparse.mm(_sparse_rows(item_users, items, dtype), ru_all)
        ev = torch.sparse.mm(_sparse_rows(item_ratings, items, dtype), ev_all)
        return self.act(self.item_concat(torch.cat([q, ru, ev], dim=1)))

    def forward(self, bundle: DatasetBundle, users, items, leave_target_out: bool = False):
        if leave_target_out:
            return self._encode_pairs_loo(bundle, users, items)
        return self.encode_users(bundle, users), self.encode_items(bundle, items)

    def _encode_pairs_loo(self, bundle: DatasetBundle, users, items):
        """Batched encoding where a training pair's own interaction is removed from
        both neighbourhood means, so the target rating never feeds its own input."""
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        dtype = self.user_table.weight.dtype
        user_items, user_ratings, user_friends, item_users, item_ratings = bundle.aggregation_matrices()
        rated = np.array([bundle.train_rating(u, j) for u, j in zip(users.tolist(), items.tolist())])
        hit = rated > 0
        u_deg = torch.as_tensor(np.diff(user_items.indptr)[users], dtype=dtype)[:, None]
        i_deg = torch.as_tensor(np.diff(item_users.indptr)[items], dtype=dtype)[:, None]
        tok = torch.as_tensor([bundle.rating_index(int(r)) if r > 0 else 0 for r in rated], dtype=torch.long)
        hit_t = torch.as_tensor(hit)[:, None]

        def loo(mean, deg, own):
            # (deg*mean - own) / (deg-1), zero when the target was the only neighbour
            num = mean * deg - own
            out = torch.where(deg > 1, num / (deg - 1).clamp(min=1), torch.zeros_like(num))
            return torch.where(hit_t, out, mean)

        p = self._site(self.user_id_proj, self.user_table, users)
        r_all = self.act(self.history_item_proj(self.item_table.weight))
        e_all = self.act(self.user_rating_proj(self.rating_table.weight))
        t_all = self.act(self.friend_proj(self.user_table.weight))
        r = torch.sparse.mm(_sparse_rows(user_items, users, dtype), r_all)
        e = torch.sparse.mm(_sparse_rows(user_ratings, users, dtype), e_all)
        t = torch.sparse.mm(_sparse_rows(user_friends, users, dtype), t_all)
        r = loo(r, u_deg, r_all[torch.as_tensor(items)])
        e = loo(e, u_deg, e_all[tok])
        x_u = self.act(self.user_concat(torch.cat([p, r, e, t], dim=1)))

        q = self._site(self.item_id_proj, self.item_table, items)
        ru_all = self.act(self.rater_proj(self.user_table.weight))
        ev_all = self.act(self.item_rating_proj(self.rating_table.weight))
        ru = torch.sparse.mm(_sparse_rows(item_users, items, dtype), ru_all)
        ev = torch.sparse.mm(_sparse_rows(item_ratings, items, dtype), ev_all)
        ru = loo(ru, i_deg, ru_all[torch.as_tensor(users)])
        ev = loo(ev, i_deg, ev_all[tok])
        x_v = self.act(self.item_concat(torch.cat([q, ru, ev], dim=1)))
        return x_u, x_v


def encode_batch(encoder: GraphEncoder, bundle: DatasetBundle, pairs) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Encode ``(user, item)`` pairs; same values as the per-entity path."""
    if len(pairs) == 0:
        return []
    users = np.array([u for u, _ in pairs], dtype=np.int64)
    items = np.array([i for _, i in pairs], dtype=np.int64)
    xu, xv = encoder(bundle, users, items)
    return list(zip(xu, xv))

