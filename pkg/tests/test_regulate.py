import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cdrsb.dataset import DatasetBundle, InteractionRecord, SocialGraph
from cdrsb.disentangle import DisentangledPair
from cdrsb.regulate import (
    EMPTY_HISTORY,
    FusedPair,
    Predictor,
    alpha_report,
    batch_regulation,
    fuse,
    item_similarity,
    max_history_similarity,
    read_alpha_report,
    regulation_weight,
    write_alpha_report,
)


def test_item_similarity_examples():
    v = np.array([0.3, -2.0, 1.0])
    assert item_similarity(v, v) == pytest.approx(1.0)
    assert item_similarity([1, 0], [0, 1]) == 0.0
    assert item_similarity([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2))
    assert item_similarity([0, 0], [1, 0]) == 0.0
    assert item_similarity([1e-13, 0], [1, 0]) == 0.0


def gate_bundle():
    # user 0 trusts user 1. C(0) = {0, 1, 2}; C(1) = {2, 3}. Item 3 is also in
    # user 0's validation split, so it is friend-recommended but not in C(0).
    records = [InteractionRecord(0, 0, 4), InteractionRecord(0, 1, 4), InteractionRecord(0, 2, 4),
               InteractionRecord(1, 2, 3), InteractionRecord(1, 3, 5),
               InteractionRecord(0, 3, 2, "validation"), InteractionRecord(1, 0, 1, "test")]
    return DatasetBundle(2, 4, records, SocialGraph.from_edges([(0, 1)]))


EMB = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 1.0]])


def test_max_history_similarity_examples():
    b = gate_bundle()
    # item 3 vs history {0,1,2}: max(1/sqrt2, 1/sqrt2, 1) = 1 (identical embedding)
    assert max_history_similarity(b, EMB, 0, 3) == pytest.approx(1.0)
    # item 2 vs {0,1} (itself excluded) → 1/sqrt2
    assert max_history_similarity(b, EMB, 0, 2) == pytest.approx(1 / math.sqrt(2))
    single = DatasetBundle(2, 2, [InteractionRecord(0, 0, 3), InteractionRecord(1, 0, 3)],
                           SocialGraph.from_edges([(0, 1)]))
    assert max_history_similarity(single, EMB, 0, 0) == EMPTY_HISTORY


def test_regulation_weight_cases():
    b = gate_bundle()
    d = regulation_weight(b, EMB, 1, 0)
    assert (d.friend_recommended, d.similarity, d.alpha) == (False, None, 0)
    assert regulation_weight(b, EMB, 0, 3).alpha == 1
    # boundary: s == threshold gives 0
    s = max_history_similarity(b, EMB, 0, 2)
    assert regulation_weight(b, EMB, 0, 2, threshold=s).alpha == 0
    assert regulation_weight(b, EMB, 0, 2, threshold=0.5).alpha == 1


def test_threshold_boundary_exact():
    emb = np.array([[1.0, 0.0], [0.5, math.sqrt(3) / 2]])  # cosine exactly 0.5
    b = DatasetBundle(2, 2, [InteractionRecord(0, 0, 3), InteractionRecord(0, 1, 3), InteractionRecord(1, 1, 3)],
                      SocialGraph.from_edges([(0, 1)]))
    assert item_similarity(emb[0], emb[1]) == pytest.approx(0.5)
    s = max_history_similarity(b, emb, 0, 1)
    assert regulation_weight(b, emb, 0, 1, threshold=s).alpha == 0


def test_batch_matches_per_pair(small_synth):
    bundle, truth = small_synth
    rng = np.random.default_rng(0)
    emb = rng.standard_normal((bundle.m, 5))
    users = rng.integers(0, bundle.n, 300)
    items = rng.integers(0, bundle.m, 300)
    fr, sim, alpha = batch_regulation(bundle, emb, users, items, 0.3)
    for k, (u, j) in enumerate(zip(users.tolist(), items.tolist())):
        d = regulation_weight(bundle, emb, u, j, 0.3)
        assert d.friend_recommended == fr[k] and d.alpha == alpha[k]
        if d.similarity is None:
            assert np.isnan(sim[k])
        else:
            assert sim[k] == pytest.approx(d.similarity, abs=1e-12)
    assert set(np.unique(alpha)) <= {0, 1}
    assert not alpha[~fr].any()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-1, 1), st.floats(-1, 1))
def test_threshold_monotone(seed, t1, t2):
    from cdrsb.train import toy_bundle
    b = toy_bundle()
    emb = np.random.default_rng(seed).standard_normal((b.m, 3))
    users, items = np.repeat(np.arange(b.n), b.m), np.tile(np.arange(b.m), b.n)
    lo, hi = sorted((t1, t2))
    a_lo = batch_regulation(b, emb, users, items, lo)[2]
    a_hi = batch_regulation(b, emb, users, items, hi)[2]
    assert (a_hi <= a_lo).all()


def pair(dp=3, n=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return DisentangledPair(*(torch.randn(n, dp, generator=g) for _ in range(4)))


def test_fuse_examples_and_linearity():
    p = DisentangledPair(torch.tensor([1.0, 2.0]), torch.tensor([3.0, 4.0]), torch.zeros(2), torch.ones(2))
    assert torch.equal(fuse(p, 1).h_u, torch.tensor([4.0, 6.0]))
    assert torch.equal(fuse(p, 0).h_u, p.z_u)
    # integer-valued entries keep the float arithmetic exact
    q = DisentangledPair(*(t.round() for t in (4 * x for x in vars(pair()).values())))
    one, zero = fuse(q, 1), fuse(q, 0)
    assert torch.equal(one.h_u - zero.h_u, q.c_u) and torch.equal(one.h_v - zero.h_v, q.c_v)
    rows = fuse(q, torch.tensor([1, 0, 1, 0]))
    assert torch.equal(rows.h_u[1], q.z_u[1]) and torch.equal(rows.h_u[0], one.h_u[0])


def test_alpha_carries_no_gradient():
    q = pair()
    for t in (q.z_u, q.c_u):
        t.requires_grad_(True)
    alpha = torch.tensor([1.0, 0.0, 1.0, 1.0], requires_grad=True)
    fuse(q, alpha).h_u.sum().backward()
    assert alpha.grad is None
    assert torch.equal(q.c_u.grad[:, 0], torch.tensor([1.0, 0.0, 1.0, 1.0]))


def test_similarity_embeddings_do_not_change_gradients(toy):
    """Perturbing the embeddings seen only by the gate leaves task gradients alone."""
    from cdrsb.config import TrainConfig
    from cdrsb.model import CDRSB
    model = CDRSB(toy.n, toy.m, TrainConfig(d=4, d_prime=4, dropout=0.0, dtype="float64"))
    users, items = np.array([0, 1, 3, 5]), np.array([1, 2, 0, 3])
    emb = model.item_interest_table(toy)
    grads = []
    for delta in (0.0, 1e-6):
        alpha = model.alphas(toy, users, items, emb + delta)
        model.zero_grad()
        model(toy, users, items, alpha).pred.pow(2).sum().backward()
        grads.append([p.grad.clone() for p in model.parameters() if p.grad is not None])
        last_alpha = alpha
    assert (model.alphas(toy, users, items, emb) == last_alpha).all()
    assert all(torch.equal(a, b) for a, b in zip(*grads))


def test_predictor_examples():
    p = Predictor(2, "rating", batch_norm=False, dropout=0.0)
    with torch.no_grad():
        for m in (p.net.hidden, p.net.out):
            m.weight.zero_()
            m.bias.zero_()
    zero = FusedPair(torch.zeros(2), torch.zeros(2))
    assert p(zero).item() == 0.0
    r = Predictor(2, "ranking", batch_norm=False, dropout=0.0)
    r.load_state_dict(p.state_dict())
    assert r(zero).item() == 0.5


def test_predictor_hand_trace():
    p = Predictor(1, "rating", activation="identity", batch_norm=False, dropout=0.0).double()
    with torch.no_grad():
        p.net.hidden.weight.copy_(torch.tensor([[2.0, -1.0]]))
        p.net.hidden.bias.fill_(0.5)
        p.net.out.weight.fill_(3.0)
        p.net.out.bias.fill_(1.0)
    fused = FusedPair(torch.tensor([[1.5]], dtype=torch.float64), torch.tensor([[2.0]], dtype=torch.float64))
    # 3 * (2*1.5 - 2 + 0.5) + 1 = 5.5
    assert p(fused).item() == pytest.approx(5.5)
    assert p(fused).item() == p(fused).item()


def test_alpha_report_counts_and_round_trip(tmp_path):
    b = gate_bundle()
    pairs = [(0, 3), (0, 2), (1, 0), (0, 0)]
    emb = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.1], [1.0, 1.0]])
    # (0,3): fr, sim max(cos(3,0), cos(3,1), cos(3,2)) = 1/sqrt2 > .5 -> 1
    # (0,2): fr, sim max(cos(2,0), cos(2,1)) = 0.0995 -> 0
    # (1,0): not fr -> 0; (0,0): not fr (user 1 rated item 0 only in test) -> 0
    report = alpha_report(b, emb, pairs)
    assert report["summary"] == {"num_pairs": 4, "num_friend_recommended": 2, "num_positive": 1,
                                 "num_negative": 1}
    write_alpha_report(report, tmp_path / "a.csv", tmp_path / "a.json")
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "user_id,item_id,friend_recommended,similarity,alpha"
    back = read_alpha_report(tmp_path / "a.csv")
    assert [d.alpha for d in back] == [d.alpha for d in report["decisions"]]
    assert back[2].similarity is None
    empty = alpha_report(b, emb, [(1, 0)])
    assert (empty["summary"]["num_positive"], empty["summary"]["num_negative"]) == (0, 0)
    same = alpha_report(b, np.ones((4, 2)), pairs)
    assert same["summary"]["num_positive"] == same["summary"]["num_friend_recommended"]
