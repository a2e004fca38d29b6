"""Per-pair social-influence gate, fusion and prediction head.

For a user-item pair whose item was consumed by someone the user trusts,
the gate opens (alpha = 1) when the item is similar to something else in
the user's train history: cosine over item interest embeddings, maximum over
the history excluding the item itself, compared strictly against a threshold.
Every other pair gets alpha = 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .dataset import DatasetBundle
from .disentangle import DisentangledPair, FeedForward

EMPTY_HISTORY = -1.0
_NORM_EPS = 1e-12


@dataclass(frozen=True)
class RegulationDecision:
    user_id: int
    item_id: int
    friend_recommended: bool
    similarity: float | None
    alpha: int


@dataclass
class FusedPair:
    h_u: torch.Tensor
    h_v: torch.Tensor


def item_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < _NORM_EPS or nb < _NORM_EPS:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def max_history_similarity(bundle: DatasetBundle, item_embeddings, user_id: int, item_id: int) -> float:
    """Highest cosine between ``item_id`` and any *other* item in the user's train history."""
    emb = np.asarray(item_embeddings)
    others = [k for k, _ in bundle.history(user_id) if k != item_id]
    if not others:
        return EMPTY_HISTORY
    return max(item_similarity(emb[item_id], emb[k]) for k in others)


def regulation_weight(bundle: DatasetBundle, item_embeddings, user_id: int, item_id: int,
                      threshold: float = 0.5) -> RegulationDecision:
    if not bundle.friend_recommended(user_id, item_id):
        return RegulationDecision(user_id, item_id, False, None, 0)
    s = max_history_similarity(bundle, item_embeddings, user_id, item_id)
    return RegulationDecision(user_id, item_id, True, s, int(s > threshold))


def _unit_rows(emb: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    safe = np.where(norms < _NORM_EPS, 1.0, norms)
    return np.where(norms < _NORM_EPS, 0.0, emb / safe)


def batch_regulation(bundle: DatasetBundle, item_embeddings, users, items, threshold: float = 0.5):
    """Vectorised :func:`regulation_weight` for many pairs.

    Returns ``(friend_recommended bool[], similarity float[] (nan when not
    friend-recommended), alpha int[])``.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    unit = _unit_rows(np.asarray(item_embeddings, dtype=np.float64))
    fr = np.fromiter((bundle.friend_recommended(int(u), int(j)) for u, j in zip(users, items)),
                     dtype=bool, count=len(users))
    sim = np.full(len(users), np.nan)
    idx = np.flatnonzero(fr)
    if len(idx):
        order = idx[np.argsort(users[idx], kind="stable")]
        bounds = np.flatnonzero(np.diff(users[order])) + 1
        for group in np.split(order, bounds):
            u = int(users[group[0]])
            hist = np.array([k for k, _ in bundle.history(u)], dtype=np.int64)
            targets = items[group]
            if len(hist) == 0:
                sim[group] = EMPTY_HISTORY
                continue
            cos = np.clip(unit[targets] @ unit[hist].T, -1.0, 1.0)
            cos[targets[:, None] == hist[None, :]] = -np.inf
            best = cos.max(axis=1)
            sim[group] = np.where(np.isneginf(best), EMPTY_HISTORY, best)
    alpha = (fr & (np.nan_to_num(sim, nan=-np.inf) > threshold)).astype(np.int64)
    return fr, sim, alpha


def fuse(pair: DisentangledPair, alpha) -> FusedPair:
    """h = z + alpha * c; ``alpha`` is a constant (scalar or per-row tensor)."""
    if isinstance(alpha, torch.Tensor):
        a = alpha.detach().to(pair.z_u.dtype)
        if a.dim() == 1 and pair.z_u.dim() == 2:
            a = a[:, None]
    else:
        a = float(alpha)
    return FusedPair(pair.z_u + a * pair.c_u, pair.z_v + a * pair.c_v)


class Predictor(nn.Module):
    """Prediction layers over ``h_u ⊕ h_v``; logistic output for ranking."""

    def __init__(self, d_prime: int = 64, task: str = "rating", activation: str = "silu",
                 dropout: float = 0.1, batch_norm: bool = True):
        super().__init__()
        self.task = task
        self.net = FeedForward(2 * d_prime, d_prime, 1, activation, dropout, batch_norm)

    def forward(self, fused: FusedPair, squash: bool = True):
        h = torch.cat([fused.h_u, fused.h_v], dim=-1)
        single = h.dim() == 1
        if single:
            h = h[None, :]
        out = self.net(h).squeeze(-1)
        if self.task == "ranking" and squash:
            out = torch.sigmoid(out)
        return out[0] if single else out


def predict(predictor: Predictor, fused: FusedPair):
    return predictor(fused)


def alpha_report(bundle: DatasetBundle, item_embeddings, pairs, threshold: float = 0.5) -> dict:
    """Decisions for ``pairs`` plus counts of kept (alpha=1) / dropped (alpha=0)
    social influence among friend-recommended pairs."""
    pairs = list(pairs)
    users = [u for u, _ in pairs]
    items = [j for _, j in pairs]
    fr, sim, alpha = batch_regulation(bundle, item_embeddings, users, items, threshold)
    decisions = [
        RegulationDecision(int(u), int(j), bool(f), None if not f else float(s), int(a))
        for u, j, f, s, a in zip(users, items, fr, sim, alpha)
    ]
    num_fr = int(fr.sum())
    num_pos = int(alpha[fr].sum()) if num_fr else 0
    summary = {
        "num_pairs": len(pairs),
        "num_friend_recommended": num_fr,
        "num_positive": num_pos,
        "num_negative": num_fr - num_pos,
    }
    return {"decisions": decisions, "summary": summary}


def write_alpha_report(report: dict, csv_path, json_path) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "item_id", "friend_recommended", "similarity", "alpha"])
        for d in report["decisions"]:
            writer.writerow([d.user_id, d.item_id, int(d.friend_recommended),
                             "" if d.similarity is None else repr(d.similarity), d.alpha])
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report["summary"], fh, indent=2, sort_keys=True)


def read_alpha_report(csv_path) -> list[RegulationDecision]:
    out = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(RegulationDecision(
                int(row["user_id"]), int(row["item_id"]), row["friend_recommended"] == "1",
                None if row["similarity"] == "" else float(row["similarity"]), int(row["alpha"])))
    return out


def decision_dict(decision: RegulationDecision) -> dict:
    return asdict(decision)
