"""Synthetic trust-network corpora with planted interests and a conformity channel.

Users and items get Gaussian latent vectors. Interactions are emitted in
rounds; in each round every user (in a shuffled order) adds one item, either

* by interest: sampled by softmax over latent dot products and rated by an
  affine map of the dot product plus noise, or
* by conformity (probability ``conformity_rate``): copied uniformly from the
  history one trusted user has built so far. If the user's affinity for the
  copied item is below their median affinity the rating is drawn low,
  otherwise it is rated by interest.

Conformity copies are labelled ``conformity`` and carry oracle alpha 0; every
friend-recommended interest pick carries oracle alpha 1.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (
    TRAIN,
    DatasetBundle,
    InteractionRecord,
    SocialGraph,
    split,
    write_ratings,
    write_trust,
)
from .regulate import batch_regulation

INTEREST, CONFORMITY = "interest", "conformity"


@dataclass
class SynthConfig:
    n_users: int = 300
    n_items: int = 500
    latent_dim: int = 8
    # out-degree of the trust graph
    friends_per_user: int = 5
    # each user links to the nearest neighbours among this many random
    # candidates; larger pools mean friends with closer tastes
    candidate_pool: int = 20
    interactions_per_user: int = 30
    conformity_rate: float = 0.3
    rating_noise: float = 0.5
    # softmax temperature of interest picks (in units of the dot-product scale);
    # smaller means tighter interest clusters and cleaner separation
    interest_temperature: float = 0.1
    low_rating_probs: tuple = (0.6, 0.4)
    split_ratios: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if min(self.n_users, self.n_items, self.latent_dim, self.interactions_per_user) < 1:
            raise ValueError("synth counts must be positive")
        if self.friends_per_user < 0 or self.candidate_pool < 1:
            raise ValueError("friends_per_user must be >= 0 and candidate_pool >= 1")
        if not 0.0 <= self.conformity_rate <= 1.0:
            raise ValueError("conformity_rate must lie in [0, 1]")
        if self.interactions_per_user > self.n_items:
            raise ValueError("more interactions per user than items")
        if self.interest_temperature <= 0:
            raise ValueError("interest_temperature must be positive")
        self.low_rating_probs = tuple(self.low_rating_probs)
        self.split_ratios = tuple(self.split_ratios)


@dataclass
class SynthGroundTruth:
    user_latents: np.ndarray
    item_latents: np.ndarray
    cause: dict = field(default_factory=dict)           # (user, item) -> cause
    friend_recommended: dict = field(default_factory=dict)  # (user, item) -> bool
    # per-user item lists in the order they were generated
    history_order: list = field(default_factory=list)

    def oracle_alpha(self, user_id: int, item_id: int) -> int:
        key = (user_id, item_id)
        if not self.friend_recommended.get(key, False):
            raise KeyError(f"pair {key} is not a friend-recommended interaction")
        return int(self.cause[key] == INTEREST)


def oracle_alpha(ground_truth: SynthGroundTruth, user_id: int, item_id: int) -> int:
    return ground_truth.oracle_alpha(user_id, item_id)


def _social_graph(user_latents: np.ndarray, cfg: SynthConfig, rng: np.random.Generator) -> SocialGraph:
    n = len(user_latents)
    if cfg.friends_per_user == 0 or n < 2:
        return SocialGraph()
    unit = user_latents / np.linalg.norm(user_latents, axis=1, keepdims=True)
    edges = []
    for u in range(n):
        others = np.delete(np.arange(n), u)
        pool = rng.choice(others, size=min(cfg.candidate_pool, n - 1), replace=False)
        sims = unit[pool] @ unit[u]
        k = min(cfg.friends_per_user, len(pool))
        chosen = pool[np.argsort(-sims, kind="stable")[:k]]
        edges.extend((u, int(w)) for w in chosen)
    return SocialGraph.from_edges(edges)


def generate(cfg: SynthConfig | None = None, task: str = "rating"):
    """Return ``(bundle, ground_truth)`` for a seeded synthetic corpus."""
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    n, m, k = cfg.n_users, cfg.n_items, cfg.latent_dim
    user_lat = rng.standard_normal((n, k))
    item_lat = rng.standard_normal((m, k))
    graph = _social_graph(user_lat, cfg, rng)

    affinity = user_lat @ item_lat.T
    scale = affinity.std()
    median = np.median(affinity, axis=1)
    logits = affinity / (cfg.interest_temperature * scale)

    history: list[list[int]] = [[] for _ in range(n)]
    owned = np.zeros((n, m), dtype=bool)
    ratings: dict = {}
    cause: dict = {}

    def interest_rating(u, j):
        value = 3.0 + 1.5 * affinity[u, j] / scale + cfg.rating_noise * rng.standard_normal()
        return int(np.clip(np.rint(value), 1, 5))

    for _ in range(cfg.interactions_per_user):
        for u in rng.permutation(n).tolist():
            pick, why = None, INTEREST
            if cfg.conformity_rate > 0 and rng.random() < cfg.conformity_rate:
                friends = [w for w in graph.neighbors(u) if any(not owned[u, j] for j in history[w])]
                if friends:
                    w = friends[rng.integers(len(friends))]
                    candidates = [j for j in history[w] if not owned[u, j]]
                    pick, why = candidates[rng.integers(len(candidates))], CONFORMITY
            if pick is None:
                z = np.where(owned[u], -np.inf, logits[u])
                p = np.exp(z - z.max())
                pick = int(rng.choice(m, p=p / p.sum()))
            if why == CONFORMITY and affinity[u, pick] < median[u]:
                probs = np.asarray(cfg.low_rating_probs, dtype=float)
                rating = int(1 + rng.choice(len(probs), p=probs / probs.sum()))
            else:
                # a copied item the user genuinely likes is positive influence
                why = INTEREST
                rating = interest_rating(u, pick)
            owned[u, pick] = True
            history[u].append(pick)
            ratings[(u, pick)] = rating
            cause[(u, pick)] = why

    records = [InteractionRecord(u, j, ratings[(u, j)]) for u in range(n) for j in history[u]]
    records = split(records, cfg.split_ratios, seed=cfg.seed)
    if task == "ranking":
        records = [InteractionRecord(r.user_id, r.item_id, 1, r.split) for r in records]
    bundle = DatasetBundle(n, m, records, graph, task=task)
    fr = {(r.user_id, r.item_id): bundle.friend_recommended(r.user_id, r.item_id) for r in records}
    truth = SynthGroundTruth(user_lat, item_lat, cause, fr, [list(h) for h in history])
    return bundle, truth


def latent_alpha_recovery(bundle: DatasetBundle, truth: SynthGroundTruth, threshold: float = 0.5) -> float:
    """Agreement between the similarity gate on planted item latents and the oracle alpha."""
    pairs = [key for key, f in sorted(truth.friend_recommended.items()) if f]
    if not pairs:
        return float("nan")
    users = np.array([u for u, _ in pairs])
    items = np.array([j for _, j in pairs])
    _, _, alpha = batch_regulation(bundle, truth.item_latents, users, items, threshold)
    oracle = np.array([truth.oracle_alpha(u, j) for u, j in pairs])
    return float((alpha == oracle).mean())


def write_corpus(directory, bundle: DatasetBundle, truth: SynthGroundTruth, cfg: SynthConfig) -> None:
    """ratings.tsv / trust.tsv in the loader formats, plus ground_truth.csv and the config."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ratings(d / "ratings.tsv", bundle.records)
    write_trust(d / "trust.tsv", bundle.social)
    with open(d / "ground_truth.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user", "item", "cause", "oracle_alpha"])
        for r in bundle.records:
            key = (r.user_id, r.item_id)
            oracle = truth.oracle_alpha(*key) if truth.friend_recommended.get(key) else ""
            writer.writerow([r.user_id, r.item_id, truth.cause[key], oracle])
    (d / "synth_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))


def read_ground_truth(path) -> dict:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[(int(row["user"]), int(row["item"]))] = (
                row["cause"], None if row["oracle_alpha"] == "" else int(row["oracle_alpha"]))
    return out


def train_fraction(bundle: DatasetBundle) -> float:
    return sum(r.split == TRAIN for r in bundle.records) / max(1, len(bundle.records))
