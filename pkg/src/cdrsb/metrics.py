"""Rating and top-K ranking metrics, and split-level evaluation drivers.

Ranking protocol: each held-out positive is scored together with
``num_negatives`` (default 99) sampled items the user never interacted
with. Candidates are ordered by descending score, ties broken by ascending
item id, and the positive's 1-based position feeds HR@K and NDCG@K.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import DatasetBundle, DatasetError, sample_negatives
from .encoder import derive_seed


def _aligned(preds, targets):
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("metrics need at least one prediction")
    return p, t


def rmse(preds, targets) -> float:
    p, t = _aligned(preds, targets)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(preds, targets) -> float:
    p, t = _aligned(preds, targets)
    return float(np.mean(np.abs(p - t)))


def _positions(positions):
    pos = np.asarray(positions, dtype=np.int64)
    if pos.size == 0:
        raise ValueError("ranking metrics need at least one list")
    if (pos < 1).any():
        raise ValueError("positions are 1-based")
    return pos


def hit_rate_at_k(positions, k: int) -> float:
    """Fraction of lists whose held-out positive sits at position <= k."""
    pos = _positions(positions)
    return float(np.mean(pos <= k))


def ndcg_at_k(positions, k: int) -> float:
    """Single relevant item per list: mean of 1/log2(position + 1) inside the top k."""
    pos = _positions(positions)
    gains = np.where(pos <= k, 1.0 / np.log2(pos + 1.0), 0.0)
    return float(np.mean(gains))


def rank_of_positive(scores, item_ids, positive_index: int = 0) -> int:
    """1-based position of ``item_ids[positive_index]`` under (score desc, item id asc)."""
    scores = np.asarray(scores, dtype=np.float64)
    item_ids = np.asarray(item_ids, dtype=np.int64)
    order = np.lexsort((item_ids, -scores))
    return int(np.flatnonzero(order == positive_index)[0]) + 1


@dataclass
class EvalResult:
    task: str
    num_evaluated: int
    rmse: float | None = None
    mae: float | None = None
    hr_at_k: float | None = None
    ndcg_at_k: float | None = None
    k: int | None = None
    seed: int | None = None
    skipped: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        return cls(**d)

    @property
    def primary(self) -> float:
        return self.rmse if self.task == "rating" else self.ndcg_at_k


def evaluate_rating(model, bundle: DatasetBundle, split: str = "test") -> EvalResult:
    """``model(users, items) -> predictions``; predictions are clamped to [1, 5]."""
    users, items, ratings = bundle.split_arrays(split)
    if len(users) == 0:
        raise ValueError(f"split {split!r} is empty")
    preds = np.clip(np.asarray(model(users, items), dtype=np.float64), 1.0, 5.0)
    return EvalResult("rating", len(users), rmse=rmse(preds, ratings), mae=mae(preds, ratings))


def ranking_candidates(bundle: DatasetBundle, split: str, num_negatives: int, seed: int):
    """Per positive record: ``(user, positive_item, negatives)``; negatives seeded per (seed, user, item)."""
    users, items, _ = bundle.split_arrays(split)
    lists, skipped = [], 0
    for u, j in zip(users.tolist(), items.tolist()):
        try:
            negs = sample_negatives(bundle, u, num_negatives, seed=derive_seed(seed, "eval", u, j))
        except DatasetError:
            skipped += 1
            continue
        lists.append((u, j, negs))
    return lists, skipped


def evaluate_ranking(model, bundle: DatasetBundle, split: str = "test", num_negatives: int = 99,
                     k: int = 10, seed: int = 0, candidates=None, detail_path=None) -> EvalResult:
    if candidates is None:
        candidates = ranking_candidates(bundle, split, num_negatives, seed)
    lists, skipped = candidates
    if not lists:
        raise ValueError(f"no rankable positives in split {split!r}")
    width = 1 + num_negatives
    users = np.repeat([u for u, _, _ in lists], width)
    items = np.array([i for _, j, negs in lists for i in [j, *negs]], dtype=np.int64)
    scores = np.asarray(model(users, items), dtype=np.float64).reshape(len(lists), width)
    cand = items.reshape(len(lists), width)
    positions = np.array([rank_of_positive(s, c, 0) for s, c in zip(scores, cand)])
    if detail_path is not None:
        with open(detail_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["user_id", "positive_item", "rank"])
            for (u, j, _), r in zip(lists, positions):
                w.writerow([u, j, int(r)])
    return EvalResult("ranking", len(lists), hr_at_k=hit_rate_at_k(positions, k),
                      ndcg_at_k=ndcg_at_k(positions, k), k=k, seed=seed, skipped=skipped)


def ndcg_lower_bound(hr: float, k: int) -> float:
    """Single-relevant-item lists: NDCG@k >= HR@k / log2(k + 1)."""
    return hr / math.log2(k + 1)
