"""Loading, filtering, splitting and indexing of trust-network rating corpora.

A :class:`DatasetBundle` is the single read-only object the rest of the package
consumes. Histories (``user_history`` / ``item_raters``) and everything derived
from them are built from train-split records only.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

TRAIN, VALIDATION, TEST = "train", "validation", "test"
SPLITS = (TRAIN, VALIDATION, TEST)


class DatasetError(ValueError):
    """Base class for data problems."""


class ParseError(DatasetError):
    def __init__(self, path, lineno: int, line: str, reason: str = "malformed line"):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {reason}: {line.rstrip()!r}")


class ValidationError(DatasetError):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    user_id: int
    item_id: int
    rating: int
    split: str = TRAIN


@dataclass
class SocialGraph:
    """Directed trust graph, ``adjacency[u]`` is the sorted tuple of users ``u`` trusts."""

    adjacency: dict[int, tuple[int, ...]] = field(default_factory=dict)

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[int, int]]) -> "SocialGraph":
        adj: dict[int, set[int]] = defaultdict(set)
        for u, w in edges:
            if u != w:
                adj[u].add(w)
        return cls({u: tuple(sorted(ws)) for u, ws in sorted(adj.items())})

    def neighbors(self, user_id: int) -> tuple[int, ...]:
        return self.adjacency.get(user_id, ())

    def edges(self) -> list[tuple[int, int]]:
        return [(u, w) for u, ws in self.adjacency.items() for w in ws]

    @property
    def num_edges(self) -> int:
        return sum(len(ws) for ws in self.adjacency.values())

    def __eq__(self, other):
        return isinstance(other, SocialGraph) and self.adjacency == other.adjacency


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            yield lineno, line, stripped.split()


def load_ratings(path, fmt: str = "tsv") -> list[InteractionRecord]:
    """Read ``user<TAB>item<TAB>rating`` lines; a later duplicate (user, item) wins."""
    if fmt != "tsv":
        raise ValueError(f"unsupported ratings format {fmt!r}")
    latest: dict[tuple[int, int], int] = {}
    for lineno, line, parts in _data_lines(path):
        if len(parts) != 3:
            raise ParseError(path, lineno, line, "expected 3 columns")
        try:
            user, item, rating = (int(p) for p in parts)
        except ValueError:
            raise ParseError(path, lineno, line, "non-integer field") from None
        if not 1 <= rating <= 5:
            raise ValidationError(f"{path}:{lineno}: rating {rating} outside 1..5")
        # re-insert so iteration order follows the surviving occurrence
        latest.pop((user, item), None)
        latest[(user, item)] = rating
    return [InteractionRecord(u, i, r) for (u, i), r in latest.items()]


def load_trust(path) -> SocialGraph:
    edges = []
    for lineno, line, parts in _data_lines(path):
        if len(parts) != 2:
            raise ParseError(path, lineno, line, "expected 2 columns")
        try:
            edges.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise ParseError(path, lineno, line, "non-integer field") from None
    return SocialGraph.from_edges(edges)


def write_ratings(path, records: Iterable[InteractionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"{r.user_id}\t{r.item_id}\t{r.rating}\n")


def write_trust(path, graph: SocialGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, w in graph.edges():
            fh.write(f"{u}\t{w}\n")


def write_splits(path, records: Iterable[InteractionRecord]) -> None:
    """Four-column TSV ``user item rating split``; lets a prepared bundle be reloaded exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# user\titem\trating\tsplit\n")
        for r in records:
            fh.write(f"{r.user_id}\t{r.item_id}\t{r.rating}\t{r.split}\n")


def load_splits(path) -> list[InteractionRecord]:
    out = []
    for lineno, line, parts in _data_lines(path):
        if len(parts) != 4 or parts[3] not in SPLITS:
            raise ParseError(path, lineno, line, "expected user, item, rating, split")
        try:
            u, i, r = (int(p) for p in parts[:3])
        except ValueError:
            raise ParseError(path, lineno, line, "non-integer field") from None
        out.append(InteractionRecord(u, i, r, parts[3]))
    return out


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def filter_min_interactions(records: Sequence[InteractionRecord], min_count: int) -> list[InteractionRecord]:
    """Drop users and items with fewer than ``min_count`` records, repeated to a fixed point."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    current = list(records)
    while True:
        user_counts: dict[int, int] = defaultdict(int)
        item_counts: dict[int, int] = defaultdict(int)
        for r in current:
            user_counts[r.user_id] += 1
            item_counts[r.item_id] += 1
        kept = [r for r in current
                if user_counts[r.user_id] >= min_count and item_counts[r.item_id] >= min_count]
        if len(kept) == len(current):
            return kept
        current = kept


def subsample_users(records: Sequence[InteractionRecord], fraction: float, seed: int) -> list[InteractionRecord]:
    """Keep the records of a seeded random ``fraction`` of users."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    users = sorted({r.user_id for r in records})
    rng = np.random.default_rng(seed)
    k = max(1, int(round(fraction * len(users))))
    keep = set(np.asarray(users)[rng.permutation(len(users))[:k]].tolist())
    return [r for r in records if r.user_id in keep]


def reindex(records: Sequence[InteractionRecord], trust: SocialGraph):
    """Map user and item ids onto dense 0-based ranges, ordered by original id.

    Returns ``(records, graph, n, m)``. Trust edges touching a user that has no
    surviving record are dropped.
    """
    user_map = {u: k for k, u in enumerate(sorted({r.user_id for r in records}))}
    item_map = {i: k for k, i in enumerate(sorted({r.item_id for r in records}))}
    out = [replace(r, user_id=user_map[r.user_id], item_id=item_map[r.item_id]) for r in records]
    edges = [(user_map[u], user_map[w]) for u, w in trust.edges() if u in user_map and w in user_map]
    return out, SocialGraph.from_edges(edges), len(user_map), len(item_map)


def split_counts(total: int, ratios: Sequence[float]) -> list[int]:
    """Floor each share, then hand the remainder out by largest fractional part (ties: earlier split)."""
    raw = [total * r for r in ratios]
    counts = [int(np.floor(x)) for x in raw]
    remainder = total - sum(counts)
    order = sorted(range(len(ratios)), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[:remainder]:
        counts[k] += 1
    # every split with a positive ratio gets at least one record
    for k, r in enumerate(ratios):
        if r > 0 and counts[k] == 0:
            donor = max(range(len(counts)), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[k] += 1
    return counts


def split(records: Sequence[InteractionRecord], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> list[InteractionRecord]:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    if len(records) < 3:
        raise DatasetError("need at least 3 records to populate train/validation/test")
    counts = split_counts(len(records), ratios)
    perm = np.random.default_rng(seed).permutation(len(records))
    labels = np.empty(len(records), dtype=object)
    start = 0
    for name, c in zip(SPLITS, counts):
        labels[perm[start:start + c]] = name
        start += c
    return [replace(r, split=str(labels[k])) for k, r in enumerate(records)]


def binarize_for_ranking(records: Sequence[InteractionRecord]) -> list[InteractionRecord]:
    """Every observed interaction becomes a positive (label 1), whatever its rating."""
    return [replace(r, rating=1) for r in records]


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------

class DatasetBundle:
    """Indexed corpus: records, trust graph and train-only neighbourhoods.

    ``user_history[i]`` is C(i) as sorted ``(item, rating)`` pairs,
    ``item_raters[j]`` is B(j) as sorted ``(user, rating)`` pairs and
    ``graph.neighbors(i)`` is N(i).
    """

    def __init__(self, n: int, m: int, records: Sequence[InteractionRecord], social: SocialGraph,
                 task: str = "rating"):
        if task not in ("rating", "ranking"):
            raise ValueError(f"unknown task {task!r}")
        self.n, self.m, self.task = n, m, task
        self.records = list(records)
        self.social = social
        self._validate()

        history: dict[int, list] = defaultdict(list)
        raters: dict[int, list] = defaultdict(list)
        for r in self.records:
            if r.split == TRAIN:
                history[r.user_id].append((r.item_id, r.rating))
                raters[r.item_id].append((r.user_id, r.rating))
        self.user_history = {u: tuple(sorted(v)) for u, v in history.items()}
        self.item_raters = {i: tuple(sorted(v)) for i, v in raters.items()}
        self._history_sets = {u: frozenset(i for i, _ in v) for u, v in self.user_history.items()}

        seen: dict[int, set] = defaultdict(set)
        for r in self.records:
            seen[r.user_id].add(r.item_id)
        self._all_items = {u: frozenset(v) for u, v in seen.items()}
        self._friend_items: dict[int, frozenset] = {}
        self._arrays: dict[str, tuple] = {}
        self._train_ratings: dict | None = None

    def _validate(self):
        keys = set()
        max_rating = 5 if self.task == "rating" else 1
        min_rating = 1 if self.task == "rating" else 0
        for r in self.records:
            if not (0 <= r.user_id < self.n and 0 <= r.item_id < self.m):
                raise ValidationError(f"record {r} out of range n={self.n} m={self.m}")
            if not min_rating <= r.rating <= max_rating:
                raise ValidationError(f"record {r} has invalid value for task {self.task}")
            if r.split not in SPLITS:
                raise ValidationError(f"record {r} has unknown split")
            key = (r.user_id, r.item_id, r.split)
            if key in keys:
                raise ValidationError(f"duplicate record for {key}")
            keys.add(key)
        for u, w in self.social.edges():
            if u == w or not (0 <= u < self.n and 0 <= w < self.n):
                raise ValidationError(f"invalid trust edge ({u}, {w})")

    # -- neighbourhoods -----------------------------------------------------
    def history(self, user_id: int) -> tuple:
        return self.user_history.get(user_id, ())

    def raters(self, item_id: int) -> tuple:
        return self.item_raters.get(item_id, ())

    def history_items(self, user_id: int) -> frozenset:
        return self._history_sets.get(user_id, frozenset())

    def interacted_items(self, user_id: int) -> frozenset:
        """Items the user interacted with in any split."""
        return self._all_items.get(user_id, frozenset())

    def friend_items(self, user_id: int) -> frozenset:
        """Union of the train histories of everyone ``user_id`` trusts."""
        cached = self._friend_items.get(user_id)
        if cached is None:
            items: set = set()
            for w in self.social.neighbors(user_id):
                items |= self.history_items(w)
            cached = self._friend_items[user_id] = frozenset(items)
        return cached

    def friend_recommended(self, user_id: int, item_id: int) -> bool:
        return item_id in self.friend_items(user_id)

    # -- split views --------------------------------------------------------
    def split_records(self, name: str) -> list[InteractionRecord]:
        return [r for r in self.records if r.split == name]

    def split_arrays(self, name: str):
        """``(users, items, ratings)`` int64 arrays for one split, in record order."""
        if name not in self._arrays:
            recs = self.split_records(name)
            self._arrays[name] = (
                np.array([r.user_id for r in recs], dtype=np.int64),
                np.array([r.item_id for r in recs], dtype=np.int64),
                np.array([r.rating for r in recs], dtype=np.int64),
            )
        return self._arrays[name]

    @property
    def num_rating_levels(self) -> int:
        return 5 if self.task == "rating" else 1

    def train_rating(self, user_id: int, item_id: int) -> int:
        """Rating of a train-split pair, 0 if the pair is not in the train split."""
        if self._train_ratings is None:
            self._train_ratings = {(r.user_id, r.item_id): r.rating for r in self.records if r.split == TRAIN}
        return self._train_ratings.get((user_id, item_id), 0)

    def rating_index(self, rating: int) -> int:
        return rating - 1 if self.task == "rating" else 0

    # -- sparse mean-aggregation operators ----------------------------------
    def aggregation_matrices(self):
        """Row-normalised sparse operators used by the batched encoder.

        Returns CSR matrices ``(user_items n×m, user_ratings n×R, user_friends n×n,
        item_users m×n, item_ratings m×R)``; each nonempty row sums to 1 so a
        product with a table of projected vectors gives the neighbourhood mean.
        """
        if "agg" not in self._arrays:
            R = self.num_rating_levels
            rows, cols, rix = [], [], []
            for u, hist in self.user_history.items():
                for i, r in hist:
                    rows.append(u)
                    cols.append(i)
                    rix.append(self.rating_index(r))
            rows, cols, rix = (np.asarray(a, dtype=np.int64) for a in (rows, cols, rix))
            ucount = np.bincount(rows, minlength=self.n).astype(np.float64)
            icount = np.bincount(cols, minlength=self.m).astype(np.float64)
            uw = 1.0 / ucount[rows] if len(rows) else np.zeros(0)
            iw = 1.0 / icount[cols] if len(cols) else np.zeros(0)
            user_items = sparse.csr_matrix((uw, (rows, cols)), shape=(self.n, self.m))
            user_ratings = sparse.csr_matrix((uw, (rows, rix)), shape=(self.n, R))
            item_users = sparse.csr_matrix((iw, (cols, rows)), shape=(self.m, self.n))
            item_ratings = sparse.csr_matrix((iw, (cols, rix)), shape=(self.m, R))
            fr, fc = [], []
            for u, ws in self.social.adjacency.items():
                fr.extend([u] * len(ws))
                fc.extend(ws)
            fr, fc = np.asarray(fr, dtype=np.int64), np.asarray(fc, dtype=np.int64)
            fcount = np.bincount(fr, minlength=self.n).astype(np.float64)
            fw = 1.0 / fcount[fr] if len(fr) else np.zeros(0)
            user_friends = sparse.csr_matrix((fw, (fr, fc)), shape=(self.n, self.n))
            for mat in (user_items, user_ratings, item_users, item_ratings, user_friends):
                mat.sum_duplicates()
            self._arrays["agg"] = (user_items, user_ratings, user_friends, item_users, item_ratings)
        return self._arrays["agg"]

    # -- summaries ----------------------------------------------------------
    def summary(self) -> dict:
        num_ratings = len(self.records)
        num_edges = self.social.num_edges
        return {
            "n": self.n,
            "m": self.m,
            "num_ratings": num_ratings,
            "num_edges": num_edges,
            "rating_density": num_ratings / (self.n * self.m) if self.n and self.m else 0.0,
            "social_density": num_edges / (self.n * self.n) if self.n else 0.0,
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def sample_negatives(bundle: DatasetBundle, user_id: int, count: int, exclude=(), seed=0) -> list[int]:
    """Uniform sample without replacement from items the user never touched (any split)."""
    banned = bundle.interacted_items(user_id) | set(exclude)
    available = bundle.m - len(banned)
    if count > available:
        raise DatasetError(f"user {user_id}: asked for {count} negatives, only {available} candidates")
    rng = np.random.default_rng(seed)
    if count == 0:
        return []
    # rejection sampling is cheap while the catalogue is mostly unseen
    if len(banned) * 2 < bundle.m:
        chosen: list[int] = []
        taken = set(banned)
        while len(chosen) < count:
            for j in rng.integers(0, bundle.m, size=2 * (count - len(chosen))).tolist():
                if j not in taken:
                    taken.add(j)
                    chosen.append(j)
                    if len(chosen) == count:
                        break
        return chosen
    candidates = np.setdiff1d(np.arange(bundle.m), np.fromiter(banned, dtype=np.int64, count=len(banned)))
    return rng.choice(candidates, size=count, replace=False).tolist()


def prepare(ratings_path, trust_path, min_count: int = 1, task: str = "rating",
            ratios=(0.8, 0.1, 0.1), seed: int = 0, subsample: float | None = None) -> DatasetBundle:
    """File-to-bundle pipeline: load, filter, (subsample), reindex, split, binarize."""
    records = load_ratings(ratings_path)
    trust = load_trust(trust_path) if trust_path else SocialGraph()
    if subsample is not None:
        records = subsample_users(records, subsample, seed)
    records = filter_min_interactions(records, min_count)
    records, graph, n, m = reindex(records, trust)
    records = split(records, ratios, seed)
    if task == "ranking":
        records = binarize_for_ranking(records)
    return DatasetBundle(n, m, records, graph, task=task)


def save_bundle(bundle: DatasetBundle, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_splits(d / "interactions.tsv", bundle.records)
    write_trust(d / "trust.tsv", bundle.social)
    meta = dict(bundle.summary(), task=bundle.task)
    (d / "bundle.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_bundle(directory) -> DatasetBundle:
    d = Path(directory)
    meta = json.loads((d / "bundle.json").read_text())
    records = load_splits(d / "interactions.tsv")
    return DatasetBundle(meta["n"], meta["m"], records, load_trust(d / "trust.tsv"), task=meta["task"])
