import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cdrsb.disentangle import (
    LOG_VAR_MAX,
    Disentangler,
    FeedForward,
    VariationalHead,
    fit_head,
    gaussian_log_density,
    lld_loss,
    log_density,
    mi_upper_bound,
    mi_upper_bound_bruteforce,
)
from cdrsb.encoder import reset_module_

from .conftest import finite_difference_error


class FixedHead(VariationalHead):
    """Head whose outputs are given tensors indexed by the row of ``z``."""

    def __init__(self, mu, log_var):
        super().__init__(mu.shape[-1])
        self._mu, self._lv = mu, log_var

    def forward(self, z, frozen=False):
        idx = z[:, 0].long()
        return self._mu[idx], self._lv[idx]


def disentangler(d=4, dp=4, seed=0, **kw):
    net = Disentangler(d, dp, dropout=0.0, batch_norm=False, **kw).double()
    for name in ("user_interest", "user_social", "item_interest", "item_social", "user_head", "item_head"):
        reset_module_(getattr(net, name), seed, name)
    return net


def test_log_density_examples():
    c = torch.tensor([0.3, -0.2])
    assert log_density(c, torch.zeros(2), c).item() == 0.0
    assert log_density(c + 1, torch.zeros(2), c).item() == pytest.approx(-2.0)
    assert log_density(torch.tensor([1.0]), torch.tensor([math.log(4)]), torch.tensor([0.0])).item() == \
        pytest.approx(-0.25)


def test_lld_loss_examples():
    mu = torch.tensor([[1.0, 1.0], [2.0, 0.0]])
    head = FixedHead(mu, torch.zeros(2, 2))
    z = torch.tensor([[0.0], [1.0]])
    c = torch.zeros(2, 2)  # densities -2 and -4
    assert lld_loss(head, z, c).item() == pytest.approx(-3.0)
    assert lld_loss(head, z[:1], c[:1]).item() == pytest.approx(gaussian_log_density(head, z[:1], c[:1]).item())
    assert lld_loss(head, z, mu).item() == 0.0
    with pytest.raises(ValueError):
        lld_loss(head, z[:0], c[:0])


def test_mi_hand_trace():
    # pos densities -1, -1; neg(1,2) = neg(2,1) = -4
    # row 0: pos -(0-1)^2 = -1, neg -(0-2)^2 = -4
    mu = torch.tensor([[0.0], [3.0]])
    lv = torch.zeros(2, 1)
    c = torch.tensor([[1.0], [2.0]])
    # row 1: pos -(3-2)^2 = -1, neg -(3-1)^2 = -4
    head = FixedHead(mu, lv)
    z = torch.tensor([[0.0], [1.0]])
    assert mi_upper_bound(head, z, c).item() == pytest.approx(1.0)
    assert mi_upper_bound_bruteforce(mu, lv, c).item() == pytest.approx(1.0)


def test_mi_zero_when_all_c_equal():
    torch.manual_seed(0)
    head = VariationalHead(3)
    z = torch.randn(7, 3)
    c = torch.randn(1, 3).expand(7, 3)
    # each positive equals its negatives, but N-1 negatives weighted 1/N leave mean(pos)/N behind
    value = mi_upper_bound(head, z, c).item()
    mu, lv = head(z)
    pos = log_density(mu, lv, c)
    assert value == pytest.approx((pos / 7).mean().item(), abs=1e-6)
    c0 = mu.detach()[:1].expand(7, 3)
    fitted = FixedHead(c0, torch.zeros(7, 3))
    assert mi_upper_bound(fitted, torch.arange(7.0)[:, None], c0).item() == pytest.approx(0.0, abs=1e-8)


def test_mi_needs_two_samples():
    head = VariationalHead(2)
    with pytest.raises(ValueError, match="skip"):
        mi_upper_bound(head, torch.zeros(1, 2), torch.zeros(1, 2))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(1, 4), st.integers(0, 10_000))
def test_mi_vectorised_matches_double_loop(n, d, seed):
    g = torch.Generator().manual_seed(seed)
    mu = torch.randn(n, d, generator=g, dtype=torch.float64)
    lv = torch.randn(n, d, generator=g, dtype=torch.float64)
    c = torch.randn(n, d, generator=g, dtype=torch.float64)
    head = FixedHead(mu, lv)
    z = torch.arange(n, dtype=torch.float64)[:, None]
    assert mi_upper_bound(head, z, c).item() == pytest.approx(mi_upper_bound_bruteforce(mu, lv, c).item(),
                                                              rel=1e-9, abs=1e-9)


def test_log_var_is_clamped():
    head = VariationalHead(2)
    with torch.no_grad():
        head.log_var.out.bias.fill_(1e3)
    _, lv = head(torch.zeros(3, 2))
    assert (lv == LOG_VAR_MAX).all()


def test_parameter_isolation():
    net = disentangler()
    x = torch.randn(5, 4, dtype=torch.float64)
    z0, c0 = net.split_user(x)
    with torch.no_grad():
        net.user_interest.out.bias.add_(0.5)
    z1, c1 = net.split_user(x)
    assert not torch.equal(z0, z1) and torch.equal(c0, c1)
    zv0, cv0 = net.split_item(x)
    with torch.no_grad():
        net.item_social.hidden.weight.mul_(2)
    zv1, cv1 = net.split_item(x)
    assert torch.equal(zv0, zv1) and not torch.equal(cv0, cv1)
    assert zv1.shape == (5, 4)
    z2, c2 = net.split_user(torch.zeros(1, 4, dtype=torch.float64))
    assert torch.isfinite(z2).all() and torch.equal(net.split_user(x)[0], net.split_user(x)[0])


def test_gradient_routing():
    net = disentangler()
    xu = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
    xv = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
    pair = net(xu, xv)
    heads = {id(p) for p in net.head_parameters()}
    net.zero_grad()
    net.lld_total(pair).backward(retain_graph=True)
    for p in net.parameters():
        touched = p.grad is not None and p.grad.abs().sum() > 0
        assert touched == (id(p) in heads)
    assert xu.grad is None
    net.zero_grad()
    net.mi_total(pair).backward()
    for p in net.parameters():
        if id(p) in heads:
            assert p.grad is None or p.grad.abs().sum() == 0
    assert xu.grad.abs().sum() > 0
    zgrads = [p.grad for p in net.user_interest.parameters()]
    assert all(g is not None for g in zgrads)


def test_mi_and_lld_totals_are_sums():
    net = disentangler()
    pair = net(torch.randn(6, 4, dtype=torch.float64), torch.randn(6, 4, dtype=torch.float64))
    expected = mi_upper_bound(net.user_head, pair.z_u, pair.c_u) + mi_upper_bound(net.item_head, pair.z_v, pair.c_v)
    assert net.mi_total(pair).item() == expected.item()
    expected = -(lld_loss(net.user_head, pair.z_u, pair.c_u) + lld_loss(net.item_head, pair.z_v, pair.c_v))
    assert net.lld_total(pair).item() == pytest.approx(expected.item(), rel=1e-12)


def test_better_head_lowers_lld_total():
    torch.manual_seed(0)
    z = torch.randn(256, 1, dtype=torch.float64)
    c = 0.8 * z + 0.2 * torch.randn(256, 1, dtype=torch.float64)
    head = VariationalHead(1).double()
    before = -lld_loss(head, z, c).item()
    fit_head(head, z, c, steps=300, lr=1e-2)
    assert -lld_loss(head, z, c).item() < before


def test_mi_and_lld_gradients_match_finite_differences():
    net = disentangler()
    xu = torch.randn(6, 4, dtype=torch.float64)
    xv = torch.randn(6, 4, dtype=torch.float64)
    heads = net.head_parameters()
    head_ids = {id(p) for p in heads}
    others = [p for p in net.parameters() if id(p) not in head_ids]
    assert finite_difference_error(lambda: net.mi_total(net(xu, xv)), others) < 1e-4
    assert finite_difference_error(lambda: net.lld_total(net(xu, xv)), heads) < 1e-4


def test_feedforward_shape_and_options():
    ff = FeedForward(3, 5, 2, dropout=0.5, batch_norm=True)
    assert ff(torch.randn(4, 3)).shape == (4, 2)
    assert ff.norm is not None and ff.drop is not None
    assert FeedForward(3, 5, 2).norm is None
