"""Joint optimisation, early stopping, ablation variants and the gradient check.

The loss of one batch is ``task + lam * (mi + lld)``. ``mi`` is evaluated
through frozen variational heads and ``lld`` on detached embeddings, so one
backward pass trains the heads on the likelihood and everything else on the
task loss plus the MI bound. Variant ``no_mi`` drops both auxiliary terms.
"""

from __future__ import annotations

import contextlib
import copy
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import TrainConfig
from .dataset import TRAIN, VALIDATION, DatasetBundle, InteractionRecord, SocialGraph, split
from .encoder import derive_seed
from .metrics import EvalResult, evaluate_ranking, evaluate_rating, ranking_candidates
from .model import CDRSB, Recommender

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cdrsb-checkpoint/1"


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def task_loss(predictions, targets, task: str):
    """Mean squared error (rating) or mean binary cross-entropy on probabilities (ranking)."""
    predictions = torch.as_tensor(predictions)
    targets = torch.as_tensor(targets, dtype=predictions.dtype)
    if predictions.numel() == 0:
        raise ValueError("task_loss needs a non-empty batch")
    if task == "rating":
        return F.mse_loss(predictions, targets)
    if task == "ranking":
        return F.binary_cross_entropy(predictions, targets)
    raise ValueError(f"unknown task {task!r}")


def task_loss_from_logits(logits, targets):
    return F.binary_cross_entropy_with_logits(logits, torch.as_tensor(targets, dtype=logits.dtype))


def joint_loss(task_l, mi_l, lld_l, lam: float, variant: str = "full"):
    if variant == "no_mi":
        return task_l
    return task_l + lam * (mi_l + lld_l)


def apply_variant(variant: str) -> dict:
    """Behaviour flags of an ablation variant."""
    flags = {
        "full": dict(alpha="computed", use_mi=True),
        "no_wt": dict(alpha="ones", use_mi=True),
        "no_sl": dict(alpha="zeros", use_mi=True),
        "no_mi": dict(alpha="computed", use_mi=False),
    }
    if variant not in flags:
        raise ValueError(f"unknown variant {variant!r}")
    return flags[variant]


# ---------------------------------------------------------------------------
# Bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    task: float
    mi: float
    lld: float
    total: float
    val_metric: float | None = None
    seconds: float = 0.0


@dataclass
class TrainReport:
    seed: int
    variant: str
    task: str
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_validation: dict = field(default_factory=dict)
    stop_epoch: int = 0
    seconds: float = 0.0
    lam: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        d = dict(d)
        d["epochs"] = [EpochRecord(**e) for e in d.get("epochs", [])]
        return cls(**d)

    def write(self, json_path, csv_path=None) -> None:
        with open(json_path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
        if csv_path is not None:
            with open(csv_path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch", "task", "mi", "lld", "total", "val_metric", "seconds"])
                for e in self.epochs:
                    w.writerow([e.epoch, e.task, e.mi, e.lld, e.total, e.val_metric, e.seconds])

    @classmethod
    def read(cls, json_path) -> "TrainReport":
        with open(json_path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


class EarlyStopper:
    """Stop once the monitored metric has not improved for ``patience`` epochs."""

    def __init__(self, patience: int, higher_is_better: bool = False):
        self.patience = patience
        self.higher_is_better = higher_is_better
        self.best = None
        self.best_epoch = None
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch; return True if it is the new best."""
        better = self.best is None or (value > self.best if self.higher_is_better else value < self.best)
        if better:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        return better

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class TrainState:
    model: CDRSB
    optimizer: torch.optim.Optimizer
    epoch: int = 0  # epochs completed


def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "rmsprop":
        return torch.optim.RMSprop(model.parameters(), lr=config.learning_rate,
                                   alpha=config.rmsprop_alpha, eps=config.rmsprop_eps,
                                   weight_decay=config.weight_decay)
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                                weight_decay=config.weight_decay)
    raise ValueError(f"unknown optimizer {config.optimizer!r}")


def build_model(bundle: DatasetBundle, config: TrainConfig) -> CDRSB:
    model = CDRSB(bundle.n, bundle.m, config)
    if config.task == "rating" and config.init_bias_to_mean:
        _, _, ratings = bundle.split_arrays(TRAIN)
        if len(ratings):
            with torch.no_grad():
                model.predictor.net.out.bias.fill_(float(ratings.mean()))
    return model


@contextlib.contextmanager
def _frozen_norm(model: nn.Module, active: bool):
    """Use running statistics in batch-norm layers (needed for one-row batches)."""
    norms = [m for m in model.modules() if isinstance(m, nn.BatchNorm1d) and m.training]
    if active:
        for m in norms:
            m.eval()
    try:
        yield
    finally:
        if active:
            for m in norms:
                m.train()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def training_examples(bundle: DatasetBundle, config: TrainConfig, epoch: int):
    """``(users, items, targets)`` for one epoch; ranking adds freshly sampled negatives."""
    users, items, ratings = bundle.split_arrays(TRAIN)
    if config.task == "rating":
        return users, items, ratings.astype(np.float64)
    rng = np.random.default_rng(derive_seed(config.seed, "train_negatives", epoch))
    k = config.train_negatives
    neg_users = np.repeat(users, k)
    neg_items = np.empty(len(neg_users), dtype=np.int64)
    for pos, u in enumerate(neg_users.tolist()):
        seen = bundle.interacted_items(u)
        if len(seen) >= bundle.m:
            raise TrainingError(f"user {u} has no unobserved items to sample negatives from")
        while True:
            j = int(rng.integers(bundle.m))
            if j not in seen:
                break
        neg_items[pos] = j
    all_users = np.concatenate([users, neg_users])
    all_items = np.concatenate([items, neg_items])
    targets = np.concatenate([np.ones(len(users)), np.zeros(len(neg_users))])
    return all_users, all_items, targets


def _batches(total: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(total)
    return [perm[s:s + batch_size] for s in range(0, total, batch_size)]


def batch_losses(model: CDRSB, bundle: DatasetBundle, users, items, targets, alpha, config: TrainConfig):
    """Forward one batch; returns ``(loss, task, mi, lld)`` tensors."""
    use_norm_stats = config.batch_norm and len(users) < 2
    with _frozen_norm(model, use_norm_stats):
        out = model(bundle, users, items, alpha, squash=False,
                    leave_target_out=config.leave_target_out and model.training)
    targets = torch.as_tensor(targets, dtype=out.pred.dtype)
    if config.task == "rating":
        task_l = F.mse_loss(out.pred, targets)
    else:
        task_l = task_loss_from_logits(out.pred, targets)
    zero = task_l.new_zeros(())
    if apply_variant(config.variant)["use_mi"] and len(users) >= 2:
        mi_l = model.disentangler.mi_total(out.pair, frozen_heads=True)
        lld_l = model.disentangler.lld_total(out.pair, detach_inputs=True)
    else:
        mi_l, lld_l = zero, zero
    return joint_loss(task_l, mi_l, lld_l, config.lam, config.variant), task_l, mi_l, lld_l


def train_epoch(state: TrainState, bundle: DatasetBundle, config: TrainConfig) -> EpochRecord:
    model = state.model
    started = time.perf_counter()
    state.epoch += 1
    users, items, targets = training_examples(bundle, config, state.epoch)
    item_table = None
    if apply_variant(config.variant)["alpha"] == "computed" and not config.alpha_per_batch:
        item_table = model.item_interest_table(bundle)
    alpha_all = None if config.alpha_per_batch else model.alphas(bundle, users, items, item_table)
    rng = np.random.default_rng(derive_seed(config.seed, "shuffle", state.epoch))

    model.train()
    sums = np.zeros(3)
    count = 0
    for b, idx in enumerate(_batches(len(users), config.batch_size, rng)):
        if alpha_all is None:
            alpha = model.alphas(bundle, users[idx], items[idx])
        else:
            alpha = alpha_all[idx]
        loss, task_l, mi_l, lld_l = batch_losses(model, bundle, users[idx], items[idx], targets[idx],
                                                 alpha, config)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {state.epoch} batch {b}: task={task_l.item()} "
                                f"mi={mi_l.item()} lld={lld_l.item()}")
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
        sums += [task_l.item(), mi_l.item(), lld_l.item()]
        count += 1
    task_m, mi_m, lld_m = (sums / max(count, 1)).tolist()
    total = task_m if config.variant == "no_mi" else task_m + config.lam * (mi_m + lld_m)
    return EpochRecord(state.epoch, task_m, mi_m, lld_m, total, seconds=time.perf_counter() - started)


def validate(model: CDRSB, bundle: DatasetBundle, config: TrainConfig, candidates=None) -> EvalResult:
    rec = Recommender(model, bundle)
    if config.task == "rating":
        return evaluate_rating(rec, bundle, VALIDATION)
    return evaluate_ranking(rec, bundle, VALIDATION, config.eval_negatives, config.eval_k,
                            seed=config.seed, candidates=candidates)


def fit(bundle: DatasetBundle, config: TrainConfig, on_epoch=None, validator=None):
    """Train with early stopping on the validation split; returns ``(report, model)``
    with the model holding its best-validation parameters.

    Epochs are numbered from 1. ``validator(model, bundle, config, candidates)``
    replaces :func:`validate` (used to script validation curves in tests).
    """
    validator = validator or validate
    if not len(bundle.split_arrays(TRAIN)[0]) or not len(bundle.split_arrays(VALIDATION)[0]):
        raise TrainingError("fit needs non-empty train and validation splits")
    if config.task != bundle.task:
        raise TrainingError(f"config task {config.task!r} does not match bundle task {bundle.task!r}")
    started = time.perf_counter()
    torch.manual_seed(derive_seed(config.seed, "torch"))
    model = build_model(bundle, config)
    state = TrainState(model, make_optimizer(model, config))
    candidates = None
    if config.task == "ranking":
        candidates = ranking_candidates(bundle, VALIDATION, config.eval_negatives, config.seed)
    stopper = EarlyStopper(config.patience, higher_is_better=config.task == "ranking")
    report = TrainReport(config.seed, config.variant, config.task, lam=config.lam)
    best_state = copy.deepcopy(model.state_dict())
    best_eval = None

    for _ in range(config.max_epochs):
        record = train_epoch(state, bundle, config)
        result = validator(model, bundle, config, candidates)
        record.val_metric = result.primary
        report.epochs.append(record)
        if stopper.update(record.epoch, result.primary):
            best_state = copy.deepcopy(model.state_dict())
            best_eval = result
        log.info("epoch %d task=%.4f mi=%.4f lld=%.4f val=%.4f", record.epoch, record.task,
                 record.mi, record.lld, result.primary)
        if on_epoch is not None:
            on_epoch(record, result)
        if stopper.should_stop:
            break

    model.load_state_dict(best_state)
    model.eval()
    report.best_epoch = stopper.best_epoch
    report.best_validation = best_eval.to_dict()
    report.stop_epoch = report.epochs[-1].epoch
    report.seconds = time.perf_counter() - started
    return report, model


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: CDRSB) -> None:
    state = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "n": model.n,
        "m": model.m,
        "config": model.config.to_dict(),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "state_dict": state,
    }, path)


def load_checkpoint(path) -> CDRSB:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    config = TrainConfig.from_dict(blob["config"])
    model = CDRSB(blob["n"], blob["m"], config)
    for name, shape in blob["shapes"].items():
        if list(blob["state_dict"][name].shape) != shape:
            raise ValueError(f"{path}: tensor {name} does not match its shape header")
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

def toy_bundle(task: str = "rating") -> DatasetBundle:
    """Six users, six items, a handful of ratings and trust edges; every split populated."""
    triples = [(0, 0, 5), (0, 1, 3), (0, 2, 4), (1, 1, 2), (1, 3, 5), (2, 0, 1), (2, 4, 4),
               (3, 2, 3), (3, 5, 5), (4, 3, 2), (4, 4, 1), (5, 5, 4), (5, 0, 3), (1, 2, 4),
               (3, 0, 2)]
    records = split([InteractionRecord(u, i, r) for u, i, r in triples], (0.8, 0.1, 0.1), seed=0)
    if task == "ranking":
        records = [InteractionRecord(r.user_id, r.item_id, 1, r.split) for r in records]
    graph = SocialGraph.from_edges([(0, 1), (0, 2), (1, 3), (2, 0), (3, 4), (4, 5), (5, 0)])
    return DatasetBundle(6, 6, records, graph, task=task)


def _routed_objectives(model, bundle, users, items, targets, alpha, config):
    """(main, head): main = task + lam*MI trains non-head parameters, head = lam*LLD trains heads."""
    _, task_l, mi_l, lld_l = batch_losses(model, bundle, users, items, targets, alpha, config)
    if config.variant == "no_mi":
        return task_l, task_l.new_zeros(())
    return task_l + config.lam * mi_l, config.lam * lld_l


def gradient_check(config: TrainConfig | None = None, step: float = 1e-5, corrupt: bool = False,
                   seed: int = 0) -> float:
    """Max per-tensor relative error between autograd and central differences.

    Each parameter is differenced against the objective that is routed to it:
    head parameters against ``lam * lld`` and all others against
    ``task + lam * mi``. ``corrupt=True`` scales one analytical gradient by 1.5
    to show the check notices a wrong gradient.
    """
    base = TrainConfig(d=4, d_prime=4, batch_size=3, dropout=0.0, dtype="float64", seed=seed)
    config = (config or base).updated(dtype="float64", dropout=0.0)
    bundle = toy_bundle(config.task)
    model = build_model(bundle, config)
    model.train()
    users = np.array([0, 3, 5])
    items = np.array([1, 2, 4])
    targets = np.array([4.0, 2.0, 5.0]) if config.task == "rating" else np.array([1.0, 0.0, 1.0])
    alpha = np.array([1, 0, 1])

    main, head = _routed_objectives(model, bundle, users, items, targets, alpha, config)
    model.zero_grad()
    (main + head).backward()
    head_ids = {id(p) for p in model.head_parameters()}
    analytic = {name: (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
                for name, p in model.named_parameters()}
    if corrupt:
        analytic["predictor.net.out.weight"] *= 1.5

    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            use_head = id(p) in head_ids
            numeric = torch.zeros_like(p)
            flat = p.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                vals = []
                for delta in (step, -step):
                    flat[k] = orig + delta
                    main_v, head_v = _routed_objectives(model, bundle, users, items, targets, alpha, config)
                    vals.append((head_v if use_head else main_v).item())
                flat[k] = orig
                numeric.view(-1)[k] = (vals[0] - vals[1]) / (2 * step)
            a = analytic[name]
            denom = a.norm() + numeric.norm()
            if denom < 1e-10:
                continue
            worst = max(worst, float((a - numeric).norm() / denom))
    return worst
