"""Average precision, model adapters and multi-seed experiment tables."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import classifier, ff, gaussian
from .data import Dataset
from .discrete import DiscreteBn, fit_bn, log_joint_table, posterior_from_log_joint
from .domain import BN_VARIABLES, BNPP_VARIABLES, structure_for

MODELS = ("BN", "BN++", "FF", "GEN", "DISCR", "GEN-", "DISCR-")
PATTERNS = ("B+S+T", "B+S", "B+T")
DIAGNOSES = ("pneu", "inf")
CLI_PATTERNS = {"bst": "B+S+T", "bs": "B+S", "bt": "B+T"}


def average_precision(scores, labels) -> float:
    """Mean of precision@k over the ranks k of the positives.

    Ranking is by descending score; ties keep input order (stable sort).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order].astype(np.float64)
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(np.sum(precision * hits) / n_pos)


def roc_auc(scores, labels) -> float:
    """Debug-only ROC AUC (Mann-Whitney with midranks)."""
    from scipy.stats import rankdata

    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# -- model adapters ----------------------------------------------------------


def _evidence(ds: Dataset, names: Sequence[str]) -> dict[str, np.ndarray]:
    return {n: ds.column(n) for n in names}


def _assignments(ds: Dataset, hidden: bool) -> list[dict]:
    return [r.assignment(hidden=hidden) for r in ds.records]


def bn_posterior_batch(bn: DiscreteBn, evidence: dict[str, np.ndarray], query: str) -> np.ndarray:
    n = len(next(iter(evidence.values())))
    lj = np.broadcast_to(log_joint_table(bn), (n,) + bn.joint_table.shape)
    return posterior_from_log_joint(lj, bn.names, evidence, query)


class BnAdapter:
    """BN (standard tabular data) or BN++ (fever and pain observed too)."""

    deterministic = True

    def __init__(self, plus: bool = False):
        self.plus = plus
        self.variables = BNPP_VARIABLES if plus else BN_VARIABLES
        self.bn: DiscreteBn | None = None

    @property
    def patterns(self):
        return ("B+S",)

    def fit(self, train: Dataset, seed: int, overrides: dict | None = None):
        ds = train if self.plus else train.standard()
        self.bn = fit_bn(_assignments(ds, self.plus), self.variables, structure_for(self.variables))
        return self

    def score(self, test: Dataset, pattern: str) -> dict[str, np.ndarray]:
        if pattern != "B+S":
            raise ValueError(f"{'BN++' if self.plus else 'BN'} only admits evidence B+S (no text)")
        names = ["season", "dysp", "cough", "nasal"] + (["fever", "pain"] if self.plus else [])
        ev = _evidence(test, names)
        return {q: bn_posterior_batch(self.bn, ev, q)[:, 1] for q in DIAGNOSES}


class GenAdapter:
    deterministic = True
    patterns = PATTERNS

    def __init__(self, ablated: bool = False, alpha: float = 0.85, diagonal: bool = False):
        self.ablated = ablated
        self.alpha = alpha
        self.diagonal = diagonal

    def fit(self, train: Dataset, seed: int, overrides: dict | None = None):
        o = overrides or {}
        alpha = o.get("alpha", self.alpha)
        std = train.standard()
        self.bn = fit_bn(_assignments(std, False), BN_VARIABLES, structure_for(BN_VARIABLES))
        self.bank = gaussian.fit_gaussian_bank(
            std, alpha, "ablated" if self.ablated else "full", o.get("diagonal", self.diagonal)
        )
        return self

    def score(self, test: Dataset, pattern: str) -> dict[str, np.ndarray]:
        names = ["season"] if pattern == "B+T" else ["season", "dysp", "cough", "nasal"]
        ev = _evidence(test, names)
        x = None if pattern == "B+S" else test.embeddings()
        return {q: gaussian.gen_posterior_batch(self.bank, self.bn, ev, x, q)[:, 1] for q in DIAGNOSES}


class DiscrAdapter:
    deterministic = False
    patterns = PATTERNS

    def __init__(self, ablated: bool = False):
        self.ablated = ablated

    def fit(self, train: Dataset, seed: int, overrides: dict | None = None):
        cfg = _train_config(seed, overrides)
        self.bank = classifier.train_bank(train.standard(), cfg, "ablated" if self.ablated else "full")
        if not all(np.isfinite(self.bank.history)):
            raise FloatingPointError("non-finite training loss")
        return self

    def score(self, test: Dataset, pattern: str) -> dict[str, np.ndarray]:
        names = ["season"] if pattern == "B+T" else ["season", "dysp", "cough", "nasal"]
        ev = _evidence(test, names)
        x = None if pattern == "B+S" else test.embeddings()
        return {q: classifier.discr_posterior_batch(self.bank, ev, x, q)[:, 1] for q in DIAGNOSES}


def _train_config(seed: int, overrides: dict | None) -> classifier.TrainConfig:
    o = overrides or {}
    keys = {"epochs", "batch_size", "learning_rate", "weight_decay", "prior_learning_rate"}
    return classifier.TrainConfig(seed=seed, **{k: v for k, v in o.items() if k in keys})


class FFAdapter:
    deterministic = False
    patterns = PATTERNS
    modes = {"B+S+T": "full", "B+S": "no-text", "B+T": "no-symptoms"}

    def fit(self, train: Dataset, seed: int, overrides: dict | None = None):
        o = overrides or {}
        std = train.standard()
        self.models = {}
        for q in DIAGNOSES:
            cfg = ff.default_config(q, seed)
            cfg = replace(cfg, **{k: v for k, v in o.items()
                                  if k in ("epochs", "batch_size", "learning_rate", "weight_decay")})
            self.models[q] = ff.train_ff(std, q, cfg)
        return self

    def score(self, test: Dataset, pattern: str) -> dict[str, np.ndarray]:
        return {q: ff.ff_predict_batch(self.models[q], test, self.modes[pattern]) for q in DIAGNOSES}


def make_model(model_id: str):
    factories = {
        "BN": lambda: BnAdapter(False),
        "BN++": lambda: BnAdapter(True),
        "FF": FFAdapter,
        "GEN": lambda: GenAdapter(False),
        "GEN-": lambda: GenAdapter(True),
        "DISCR": lambda: DiscrAdapter(False),
        "DISCR-": lambda: DiscrAdapter(True),
    }
    if model_id not in factories:
        raise ValueError(f"unknown model {model_id!r}; choose from {MODELS}")
    return factories[model_id]()


# -- experiments -------------------------------------------------------------


@dataclass
class ExperimentPlan:
    train: Dataset
    test: Dataset
    models: list[str] = field(default_factory=lambda: list(MODELS))
    patterns: list[str] = field(default_factory=lambda: list(PATTERNS))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    overrides: dict = field(default_factory=dict)  # model id -> {param: value}
    workers: int = 1

    def __post_init__(self):
        for m in self.models:
            if m not in MODELS:
                raise ValueError(f"unknown model {m!r}")
        for p in self.patterns:
            if p not in PATTERNS:
                raise ValueError(f"unknown evidence pattern {p!r}")
        if not self.seeds:
            raise ValueError("plan needs at least one seed")


@dataclass
class Cell:
    model: str
    pattern: str
    diagnosis: str
    mean: float | None
    std: float | None
    seeds: list[int]
    values: list[float]
    failed_seeds: list[int] = field(default_factory=list)


@dataclass
class ResultTable:
    cells: list[Cell]

    def get(self, model: str, pattern: str, diagnosis: str) -> Cell:
        for c in self.cells:
            if (c.model, c.pattern, c.diagnosis) == (model, pattern, diagnosis):
                return c
        raise KeyError((model, pattern, diagnosis))

    def to_json(self) -> str:
        return json.dumps([asdict(c) for c in self.cells], indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ResultTable":
        return cls([Cell(**c) for c in json.loads(text)])

    def to_text(self) -> str:
        models = list(dict.fromkeys(c.model for c in self.cells))
        patterns = [p for p in PATTERNS if any(c.pattern == p for c in self.cells)]
        lines = []
        for q in DIAGNOSES:
            if not any(c.diagnosis == q for c in self.cells):
                continue
            header = [f"AP {q}"] + patterns
            rows = [header]
            for m in models:
                row = [m]
                for p in patterns:
                    try:
                        c = self.get(m, p, q)
                    except KeyError:
                        row.append("-")
                        continue
                    if c.mean is None:
                        row.append("-" if not c.failed_seeds else f"failed {c.failed_seeds}")
                    else:
                        s = f"{c.mean:.4f} (± {c.std:.4f})"
                        if c.failed_seeds:
                            s += f" [failed {c.failed_seeds}]"
                        row.append(s)
                rows.append(row)
            widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
            for r in rows:
                lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
            lines.append("")
        return "\n".join(lines)


def _run_one(args):
    model_id, seed, train, test, patterns, overrides = args
    model = make_model(model_id)
    try:
        model.fit(train, seed, overrides)
        out = {}
        for p in patterns:
            if p not in model.patterns:
                continue
            scores = model.score(test, p)
            for q in DIAGNOSES:
                if not np.all(np.isfinite(scores[q])):
                    raise FloatingPointError(f"non-finite scores for {q}")
                out[(p, q)] = average_precision(scores[q], test.column(q))
        return model_id, seed, out, None
    except FloatingPointError as exc:
        return model_id, seed, None, str(exc)


def run_experiment(plan: ExperimentPlan) -> ResultTable:
    """Train every model once per seed on the full train set and score the test set."""
    jobs = [(m, s, plan.train, plan.test, plan.patterns, plan.overrides.get(m, {}))
            for m in plan.models for s in plan.seeds]
    if plan.workers > 1:
        with ProcessPoolExecutor(plan.workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    by_key = {(m, s): (out, err) for m, s, out, err in results}

    cells = []
    for m in plan.models:
        for p in PATTERNS:
            if p not in plan.patterns:
                continue
            for q in DIAGNOSES:
                values, ok_seeds, failed = [], [], []
                for s in plan.seeds:
                    out, err = by_key[(m, s)]
                    if err is not None:
                        failed.append(s)
                    elif (p, q) in out:
                        values.append(out[(p, q)])
                        ok_seeds.append(s)
                if values:
                    arr = np.array(values)
                    std = 0.0 if arr.max() == arr.min() else float(arr.std())
                    cells.append(Cell(m, p, q, float(arr.mean()), std, ok_seeds, values, failed))
                else:
                    cells.append(Cell(m, p, q, None, None, [], [], failed))
    return ResultTable(cells)
