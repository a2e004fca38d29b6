"""The full model: encoder, disentangler and predictor under one ``nn.Module``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import TrainConfig
from .dataset import DatasetBundle
from .disentangle import DisentangledPair, Disentangler
from .encoder import GraphEncoder, reset_module_
from .regulate import FusedPair, Predictor, batch_regulation, fuse

# sub-modules initialised from their own named sub-seed, so re-seeding one
# never shifts the initial values of another
INIT_GROUPS = {
    "encoder": ("encoder",),
    "user_interest": ("disentangler", "user_interest"),
    "user_social": ("disentangler", "user_social"),
    "item_interest": ("disentangler", "item_interest"),
    "item_social": ("disentangler", "item_social"),
    "user_head": ("disentangler", "user_head"),
    "item_head": ("disentangler", "item_head"),
    "predictor": ("predictor",),
}


@dataclass
class ForwardOutput:
    pred: torch.Tensor
    pair: DisentangledPair
    fused: FusedPair


class CDRSB(nn.Module):
    def __init__(self, n: int, m: int, config: TrainConfig):
        super().__init__()
        self.n, self.m = n, m
        self.config = config
        num_ratings = 5 if config.task == "rating" else 1
        self.encoder = GraphEncoder(n, m, num_ratings, config.d, config.activation)
        self.disentangler = Disentangler(config.d, config.d_prime, config.activation,
                                         config.dropout, config.batch_norm)
        self.predictor = Predictor(config.d_prime, config.task, config.activation,
                                   config.dropout, config.batch_norm)
        self.reset_parameters(config.seed)
        if config.dtype == "float64":
            self.double()

    def submodule(self, group: str) -> nn.Module:
        mod: nn.Module = self
        for name in INIT_GROUPS[group]:
            mod = getattr(mod, name)
        return mod

    def reset_parameters(self, seed: int, groups=None) -> None:
        for group in groups or INIT_GROUPS:
            reset_module_(self.submodule(group), seed, group)

    def head_parameters(self):
        return self.disentangler.head_parameters()

    def main_parameters(self):
        heads = {id(p) for p in self.head_parameters()}
        return [p for p in self.parameters() if id(p) not in heads]

    # -- forward --------------------------------------------------------------
    def forward(self, bundle: DatasetBundle, users, items, alpha, squash: bool = True,
                leave_target_out: bool = False) -> ForwardOutput:
        x_u, x_v = self.encoder(bundle, users, items, leave_target_out)
        pair = self.disentangler(x_u, x_v)
        alpha = torch.as_tensor(np.asarray(alpha), dtype=x_u.dtype)
        fused = fuse(pair, alpha)
        return ForwardOutput(self.predictor(fused, squash=squash), pair, fused)

    @torch.no_grad()
    def embeddings(self, bundle: DatasetBundle) -> dict[str, np.ndarray]:
        """All-entity x / z / c tables in evaluation mode."""
        was_training = self.training
        self.eval()
        try:
            users = np.arange(self.n)
            items = np.arange(self.m)
            x_u = self.encoder.encode_users(bundle, users)
            x_v = self.encoder.encode_items(bundle, items)
            z_u, c_u = self.disentangler.split_user(x_u)
            z_v, c_v = self.disentangler.split_item(x_v)
        finally:
            self.train(was_training)
        return {k: v.double().numpy() for k, v in
                dict(user_x=x_u, item_x=x_v, user_interest=z_u, user_social=c_u,
                     item_interest=z_v, item_social=c_v).items()}

    @torch.no_grad()
    def item_interest_table(self, bundle: DatasetBundle) -> np.ndarray:
        was_training = self.training
        self.eval()
        try:
            x_v = self.encoder.encode_items(bundle, np.arange(self.m))
            z_v = self.disentangler.item_interest(x_v)
        finally:
            self.train(was_training)
        return z_v.double().numpy()

    def alphas(self, bundle: DatasetBundle, users, items, item_table=None, variant=None):
        """Gate values for pairs under the configured ablation variant."""
        variant = variant or self.config.variant
        users = np.asarray(users, dtype=np.int64)
        if variant == "no_wt":
            return np.ones(len(users), dtype=np.int64)
        if variant == "no_sl":
            return np.zeros(len(users), dtype=np.int64)
        if item_table is None:
            item_table = self.item_interest_table(bundle)
        _, _, alpha = batch_regulation(bundle, item_table, users, items, self.config.similarity_threshold)
        return alpha


class Recommender:
    """Frozen inference wrapper: ``rec(users, items) -> scores``.

    Rating predictions are clamped to [1, 5]; the unclamped values of the last
    call are kept on ``last_raw`` for diagnostics.
    """

    def __init__(self, model: CDRSB, bundle: DatasetBundle, batch_size: int = 4096):
        self.model = model
        self.bundle = bundle
        self.batch_size = batch_size
        self.item_table = model.item_interest_table(bundle)
        self.last_raw = None

    @torch.no_grad()
    def __call__(self, users, items) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        self.model.eval()
        alpha = self.model.alphas(self.bundle, users, items, self.item_table)
        outs = []
        for s in range(0, len(users), self.batch_size):
            sl = slice(s, s + self.batch_size)
            outs.append(self.model(self.bundle, users[sl], items[sl], alpha[sl]).pred.double().numpy())
        raw = np.concatenate(outs) if outs else np.zeros(0)
        self.last_raw = raw
        if self.model.config.task == "rating":
            return np.clip(raw, 1.0, 5.0)
        return raw


def export_embeddings(model: CDRSB, bundle: DatasetBundle, graph_path, disentangled_path) -> None:
    """Write the encoder (user_x/item_x) and disentangled (interest/social) CSVs."""
    emb = model.embeddings(bundle)
    write_embedding_csv(graph_path, [("user", "user_x", emb["user_x"]), ("item", "item_x", emb["item_x"])])
    write_embedding_csv(disentangled_path, [
        ("user", "user_interest", emb["user_interest"]),
        ("user", "user_social", emb["user_social"]),
        ("item", "item_interest", emb["item_interest"]),
        ("item", "item_social", emb["item_social"]),
    ])


def write_embedding_csv(path, blocks) -> None:
    d = blocks[0][2].shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("entity,kind,id," + ",".join(f"dim{k}" for k in range(d)) + "\n")
        for entity, kind, mat in blocks:
            for idx, row in enumerate(mat):
                fh.write(f"{entity},{kind},{idx}," + ",".join(repr(float(v)) for v in row) + "\n")


def read_embedding_csv(path) -> dict[str, np.ndarray]:
    rows: dict[str, list] = {}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            parts = line.rstrip("\n").split(",")
            rows.setdefault(parts[1], []).append([float(v) for v in parts[3:]])
    return {k: np.asarray(v) for k, v in rows.items()}
