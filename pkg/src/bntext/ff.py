"""Monolithic feed-forward baseline over one-hot tabular features plus the embedding.

Base encoding (11 slots): season [warm, cold], then dysp, cough, nasal each as
[no, yes, unobserved]. Optional interaction features are the row-major outer
products of the one-hot blocks for every pair, triple and the quadruple of
variables, in lexicographic variable order (45 + 81 + 54 = 180 slots).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping

import numpy as np

from .data import Dataset, PatientRecord, rng_for
from .neural import DenseNet, forward, init_net, train_binary

BLOCKS = (("season", 2), ("dysp", 3), ("cough", 3), ("nasal", 3))
BASE_DIM = sum(k for _, k in BLOCKS)
INTERACTION_GROUPS = [g for r in (2, 3, 4) for g in combinations(range(len(BLOCKS)), r)]
INTERACTION_DIM = sum(int(np.prod([BLOCKS[i][1] for i in g])) for g in INTERACTION_GROUPS)
MODES = ("full", "no-text", "no-symptoms")


def encode_blocks(values: Mapping[str, int | None]) -> list[np.ndarray]:
    out = []
    for name, k in BLOCKS:
        v = values.get(name)
        vec = np.zeros(k)
        if v is None:
            if name == "season":
                raise ValueError("season must be observed")
            vec[2] = 1.0
        else:
            if not (isinstance(v, (int, np.integer)) and 0 <= v < 2):
                raise ValueError(f"unknown level {v!r} for {name!r}")
            vec[v] = 1.0
        out.append(vec)
    return out


def interactions(blocks: list[np.ndarray]) -> np.ndarray:
    parts = []
    for group in INTERACTION_GROUPS:
        prod = blocks[group[0]]
        for i in group[1:]:
            prod = np.outer(prod, blocks[i]).ravel()
        parts.append(prod)
    return np.concatenate(parts)


@dataclass
class TabularEncoding:
    base: np.ndarray
    interactions: np.ndarray | None = None

    def vector(self) -> np.ndarray:
        if self.interactions is None:
            return self.base
        return np.concatenate([self.base, self.interactions])


def encode(values: Mapping[str, int | None], with_interactions: bool = False) -> TabularEncoding:
    blocks = encode_blocks(values)
    base = np.concatenate(blocks)
    return TabularEncoding(base, interactions(blocks) if with_interactions else None)


def base_to_blocks(base: np.ndarray) -> list[np.ndarray]:
    out, pos = [], 0
    for _, k in BLOCKS:
        out.append(base[pos : pos + k])
        pos += k
    return out


@dataclass
class FFConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-2
    weight_decay: float = 1e-3
    dropout: float = 0.7
    hidden: list[int] = field(default_factory=list)
    interactions: bool = False
    seed: int = 0


def default_config(diagnosis: str, seed: int = 0) -> FFConfig:
    if diagnosis == "pneu":
        return FFConfig(hidden=[256], interactions=False, seed=seed)
    if diagnosis == "inf":
        return FFConfig(hidden=[], interactions=True, seed=seed)
    raise ValueError(f"unknown diagnosis {diagnosis!r}")


@dataclass
class FFModel:
    diagnosis: str
    net: DenseNet
    interactions: bool
    empty_text: np.ndarray


def _tab_values(rec: PatientRecord, drop_symptoms: bool) -> dict:
    vals = {"season": rec.season}
    for s in ("dysp", "cough", "nasal"):
        vals[s] = None if drop_symptoms else getattr(rec, s)
    return vals


def design_matrix(ds: Dataset, with_interactions: bool, mode: str = "full") -> np.ndarray:
    if mode not in MODES:
        raise ValueError(f"unknown evidence mode {mode!r}")
    tab = np.stack([
        encode(_tab_values(r, mode == "no-symptoms"), with_interactions).vector() for r in ds.records
    ])
    if mode == "no-text":
        emb = np.broadcast_to(ds.empty_text, (len(ds), ds.d))
    else:
        emb = ds.embeddings()
    return np.concatenate([tab, emb], axis=1)


def train_ff(ds: Dataset, diagnosis: str, cfg: FFConfig | None = None) -> FFModel:
    cfg = cfg or default_config(diagnosis)
    x = design_matrix(ds, cfg.interactions)
    y = ds.column(diagnosis).astype(np.float64)
    if np.any(y < 0):
        raise ValueError(f"{diagnosis} must be observed in every training record")
    dims = [x.shape[1]] + list(cfg.hidden) + [1]
    net = init_net(dims, rng_for(cfg.seed, f"init.ff.{diagnosis}"), dropout=cfg.dropout)
    train_binary(net, x, y, epochs=cfg.epochs, batch_size=cfg.batch_size,
                 learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay,
                 rng=rng_for(cfg.seed, f"shuffle.ff.{diagnosis}"))
    return FFModel(diagnosis, net, cfg.interactions, ds.empty_text)


def ff_predict_batch(model: FFModel, ds: Dataset, mode: str = "full") -> np.ndarray:
    out, _ = forward(model.net, design_matrix(ds, model.interactions, mode))
    return out


def ff_predict(model: FFModel, record: PatientRecord, mode: str = "full") -> float:
    return float(ff_predict_batch(model, Dataset([record], model.empty_text), mode)[0])
