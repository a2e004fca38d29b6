import json

import numpy as np
import pytest

from cdrsb.dataset import load_ratings, load_trust
from cdrsb.synth import (
    CONFORMITY,
    INTEREST,
    SynthConfig,
    generate,
    latent_alpha_recovery,
    oracle_alpha,
    read_ground_truth,
    train_fraction,
    write_corpus,
)

SMALL = dict(n_users=40, n_items=60, interactions_per_user=10, friends_per_user=3, candidate_pool=8)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(n_users=0)
    with pytest.raises(ValueError):
        SynthConfig(conformity_rate=1.5)
    with pytest.raises(ValueError):
        SynthConfig(n_items=5, interactions_per_user=6)


def test_zero_conformity_is_all_interest():
    bundle, truth = generate(SynthConfig(conformity_rate=0.0, **SMALL))
    assert set(truth.cause.values()) == {INTEREST}
    fr_pairs = [k for k, f in truth.friend_recommended.items() if f]
    assert fr_pairs and all(truth.oracle_alpha(*k) == 1 for k in fr_pairs)


def test_full_conformity_without_friends_falls_back():
    _, truth = generate(SynthConfig(conformity_rate=1.0, **{**SMALL, "friends_per_user": 0}))
    assert CONFORMITY not in truth.cause.values()


def test_conformity_items_come_from_earlier_friend_history(small_synth):
    bundle, truth = small_synth
    assert CONFORMITY in truth.cause.values()
    position = {(u, j): k for u, h in enumerate(truth.history_order) for k, j in enumerate(h)}
    for (u, j), cause in truth.cause.items():
        if cause != CONFORMITY:
            continue
        # round k of user u comes after round k-1 of everyone, and maybe after round k of some friends
        assert any((w, j) in position and position[(w, j)] <= position[(u, j)]
                   for w in bundle.social.neighbors(u))


def test_oracle_alpha_definition(small_synth):
    bundle, truth = small_synth
    for key, fr in truth.friend_recommended.items():
        if fr:
            assert oracle_alpha(truth, *key) == int(truth.cause[key] == INTEREST)
        else:
            with pytest.raises(KeyError):
                oracle_alpha(truth, *key)


def test_ratings_are_integers_in_range(small_synth):
    bundle, truth = small_synth
    assert {r.rating for r in bundle.records} <= {1, 2, 3, 4, 5}
    assert train_fraction(bundle) == pytest.approx(0.8, abs=0.01)
    assert truth.user_latents.shape == (40, 8) and truth.item_latents.shape == (60, 8)


def test_same_seed_is_byte_identical(tmp_path):
    cfg = SynthConfig(**SMALL, seed=11)
    for name in ("a", "b"):
        b, t = generate(cfg)
        write_corpus(tmp_path / name, b, t, cfg)
    for f in ("ratings.tsv", "trust.tsv", "ground_truth.csv", "synth_config.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    other, _ = generate(SynthConfig(**SMALL, seed=12))
    assert other.records != b.records


def test_corpus_files_round_trip(tmp_path, small_synth):
    bundle, truth = small_synth
    cfg = SynthConfig(**SMALL, seed=3)
    write_corpus(tmp_path, bundle, truth, cfg)
    assert len(load_ratings(tmp_path / "ratings.tsv")) == len(bundle.records)
    assert load_trust(tmp_path / "trust.tsv") == bundle.social
    gt = read_ground_truth(tmp_path / "ground_truth.csv")
    for key, (cause, alpha) in gt.items():
        assert cause == truth.cause[key]
        assert alpha == (truth.oracle_alpha(*key) if truth.friend_recommended[key] else None)
    assert json.loads((tmp_path / "synth_config.json").read_text())["seed"] == 3


def test_degenerate_thresholds(small_synth):
    bundle, truth = small_synth
    oracle = np.array([truth.oracle_alpha(*k) for k, f in sorted(truth.friend_recommended.items()) if f])
    assert latent_alpha_recovery(bundle, truth, 1.0) == pytest.approx(1 - oracle.mean())
    # every user keeps several train items, so no similarity takes the -1 sentinel
    assert latent_alpha_recovery(bundle, truth, -1.0) == pytest.approx(oracle.mean())


def test_recovery_is_monotone_in_separation():
    # a smaller interest temperature concentrates interest picks, separating them from conformity copies
    tight = [latent_alpha_recovery(*generate(SynthConfig(interest_temperature=0.1, seed=s))) for s in (0, 1)]
    loose = [latent_alpha_recovery(*generate(SynthConfig(interest_temperature=1.0, seed=s))) for s in (0, 1)]
    assert np.mean(tight) > np.mean(loose)


def test_zero_conformity_recovery_is_high():
    bundle, truth = generate(SynthConfig(conformity_rate=0.0, interactions_per_user=20))
    assert latent_alpha_recovery(bundle, truth) >= 0.9
