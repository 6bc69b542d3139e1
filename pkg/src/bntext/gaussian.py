"""Generative text node: regularized conditional Gaussians over embeddings.

P(T | parents) = N(mu, (1 - alpha) * Sigma + alpha * I) per parent
configuration, with Sigma the ML (divisor N) covariance. Posteriors over the
diagnoses combine the discrete network with these densities in log space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from .data import Dataset
from .discrete import DiscreteBn, log_joint_table, posterior_from_log_joint

FULL_PARENTS = ("pneu", "inf", "dysp", "cough", "nasal")
ABLATED_PARENTS = ("dysp", "cough", "nasal")
LOG_2PI = np.log(2.0 * np.pi)


class RankDeficientError(ValueError):
    pass


@dataclass
class GaussianParams:
    mean: np.ndarray
    cov: np.ndarray  # ML estimate, unregularized
    alpha: float
    sample_count: int
    diagonal: bool = False
    fallback: bool = False
    _chol: np.ndarray = field(init=False, repr=False)
    _logdet: float = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = len(self.mean)
        if self.diagonal:
            var = (1.0 - self.alpha) * np.diag(self.cov) + self.alpha
            if np.any(var <= 0):
                raise RankDeficientError("zero variance with alpha = 0; use a positive alpha")
            self._chol = np.sqrt(var)
            self._logdet = float(np.sum(np.log(var)))
        else:
            reg = (1.0 - self.alpha) * self.cov + self.alpha * np.eye(d)
            try:
                self._chol = cholesky(reg, lower=True)
            except np.linalg.LinAlgError:
                raise RankDeficientError(
                    "covariance is not positive definite; use a positive alpha"
                ) from None
            self._logdet = float(2.0 * np.sum(np.log(np.diag(self._chol))))
        if not np.isfinite(self._logdet):
            raise RankDeficientError("regularized covariance has a non-finite log-determinant")

    @property
    def d(self) -> int:
        return len(self.mean)

    @property
    def regularized(self) -> np.ndarray:
        if self.diagonal:
            return np.diag(self._chol**2)
        return self._chol @ self._chol.T

    @property
    def logdet(self) -> float:
        return self._logdet


def fit_gaussian(x: np.ndarray, alpha: float, diagonal: bool = False) -> GaussianParams:
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n == 0:
        raise ValueError("cannot fit a Gaussian to zero samples")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / n
    if diagonal:
        cov = np.diag(np.diag(cov))
    if alpha == 0 and np.linalg.matrix_rank(cov) < x.shape[1]:
        raise RankDeficientError(
            f"ML covariance from {n} samples is rank deficient; alpha must be positive"
        )
    return GaussianParams(mean, cov, alpha, n, diagonal=diagonal)


def log_density(g: GaussianParams, x: np.ndarray) -> np.ndarray | float:
    """Log-density of a vector or each row of a matrix."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = x[None, :] if single else x
    if xs.shape[1] != g.d:
        raise ValueError(f"dimension mismatch: expected {g.d}, got {xs.shape[1]}")
    if not np.all(np.isfinite(xs)):
        raise ValueError("non-finite embedding")
    diff = xs - g.mean
    if g.diagonal:
        y = diff / g._chol
    else:
        y = solve_triangular(g._chol, diff.T, lower=True).T
    out = -0.5 * (g.d * LOG_2PI + g.logdet + np.einsum("ij,ij->i", y, y))
    return float(out[0]) if single else out


@dataclass
class GaussianBank:
    mode: str  # "full" | "ablated"
    alpha: float
    conditions: dict[tuple[int, ...], GaussianParams]
    fallback: GaussianParams
    diagonal: bool = False

    def __post_init__(self):
        if self.mode not in ("full", "ablated"):
            raise ValueError(f"unknown bank mode {self.mode!r}")
        expected = set(product((0, 1), repeat=len(self.parents)))
        if set(self.conditions) != expected:
            raise ValueError(f"{self.mode} bank needs exactly {len(expected)} conditions")

    @property
    def parents(self) -> tuple[str, ...]:
        return FULL_PARENTS if self.mode == "full" else ABLATED_PARENTS

    @property
    def d(self) -> int:
        return self.fallback.d

    def log_density_table(self, x: np.ndarray) -> np.ndarray:
        """``(n, 2, ..., 2)`` log-densities, one axis per parent."""
        x = np.atleast_2d(x)
        shape = (len(x),) + (2,) * len(self.parents)
        out = np.empty(shape)
        for key, g in self.conditions.items():
            out[(slice(None),) + key] = log_density(g, x)
        return out


def fit_gaussian_bank(ds: Dataset, alpha: float = 0.85, mode: str = "full",
                      diagonal: bool = False, min_count: int = 2) -> GaussianBank:
    """Fit one Gaussian per parent configuration on the records that carry text.

    Records without text are ignored; records with masked symptoms only
    feed the pooled fallback. Configurations with fewer than ``min_count``
    records get the pooled fallback, marked with ``fallback=True``.
    """
    parents = FULL_PARENTS if mode == "full" else ABLATED_PARENTS
    text = [r for r in ds.records if r.text_present]
    if not text:
        raise ValueError("no records with text to fit the text distribution")
    pooled = fit_gaussian(np.stack([r.embedding for r in text]), alpha, diagonal)
    buckets: dict[tuple[int, ...], list[np.ndarray]] = {
        k: [] for k in product((0, 1), repeat=len(parents))
    }
    for r in text:
        key = tuple(getattr(r, p) for p in parents)
        if any(v is None for v in key):
            continue
        buckets[key].append(r.embedding)
    conditions = {}
    for key, rows in buckets.items():
        if len(rows) < min_count:
            conditions[key] = GaussianParams(
                pooled.mean, pooled.cov, alpha, len(rows), diagonal=diagonal, fallback=True
            )
        else:
            conditions[key] = fit_gaussian(np.stack(rows), alpha, diagonal)
    return GaussianBank(mode, alpha, conditions, pooled, diagonal)


def gen_log_joint(bank: GaussianBank, bn: DiscreteBn, x: np.ndarray | None, n: int) -> np.ndarray:
    """``(n, *cards)`` log joint over the network variables, text term included if given."""
    base = log_joint_table(bn)
    out = np.broadcast_to(base, (n,) + base.shape).copy()
    if x is None:
        return out
    table = bank.log_density_table(x)
    # align text-parent axes with the network's axes
    names = bn.names
    axes = [names.index(p) for p in bank.parents]
    order = np.argsort(axes)
    table = np.transpose(table, (0,) + tuple(1 + o for o in order))
    shape = [n] + [1] * len(names)
    for ax in sorted(axes):
        shape[ax + 1] = 2
    return out + table.reshape(shape)


def gen_posterior_batch(bank: GaussianBank, bn: DiscreteBn, evidence: Mapping[str, np.ndarray],
                        x: np.ndarray | None, query: str) -> np.ndarray:
    """Posteriors for ``n`` records at once. ``evidence`` columns use -1 for unobserved."""
    if query not in ("pneu", "inf"):
        raise ValueError(f"query must be a diagnosis, got {query!r}")
    allowed = {"season", "dysp", "cough", "nasal"}
    extra = {k for k, v in evidence.items() if np.any(np.asarray(v) >= 0)} - allowed
    if extra:
        raise ValueError(f"evidence may only contain season, symptoms and text; got {sorted(extra)}")
    n = len(next(iter(evidence.values()))) if evidence else (1 if x is None else len(np.atleast_2d(x)))
    lj = gen_log_joint(bank, bn, x, n)
    if x is not None and bank.mode == "ablated":
        # text is d-separated from the diagnoses once every symptom is observed
        full = np.ones(n, dtype=bool)
        for s in ABLATED_PARENTS:
            full &= np.asarray(evidence.get(s, np.full(n, -1))) >= 0
        if full.any():
            lj[full] = gen_log_joint(bank, bn, None, int(full.sum()))
    return posterior_from_log_joint(lj, bn.names, evidence, query)


def gen_posterior(bank: GaussianBank, bn: DiscreteBn, evidence: Mapping,
                  embedding: np.ndarray | None, query: str) -> np.ndarray:
    """P(query | evidence[, text]) for one record.

    Works for either bank mode; in ablated mode the text term depends on the
    symptoms only.
    """
    ev = {k: np.array([-1 if v is None else bn.spec(k).index(v)]) for k, v in evidence.items()}
    x = None if embedding is None else np.atleast_2d(embedding)
    return gen_posterior_batch(bank, bn, ev, x, query)[0]


gen_posterior_ablated = gen_posterior


# -- checkpoints -------------------------------------------------------------


def save_bank(bank: GaussianBank, path: str | Path) -> None:
    """``<path>`` holds float64 mean + row-major covariance per condition, fallback last."""
    path = Path(path)
    keys = sorted(bank.conditions)
    with open(path, "wb") as fh:
        for g in [bank.conditions[k] for k in keys] + [bank.fallback]:
            fh.write(np.ascontiguousarray(g.mean, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(g.cov, dtype="<f8").tobytes())
    meta = {
        "mode": bank.mode,
        "alpha": bank.alpha,
        "d": bank.d,
        "diagonal": bank.diagonal,
        "parents": list(bank.parents),
        "conditions": [
            {
                "key": list(k),
                "sample_count": bank.conditions[k].sample_count,
                "fallback": bank.conditions[k].fallback,
            }
            for k in keys
        ],
        "pooled_sample_count": bank.fallback.sample_count,
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1))


def load_bank(path: str | Path) -> GaussianBank:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    d, alpha, diag = meta["d"], meta["alpha"], meta["diagonal"]
    buf = np.frombuffer(path.read_bytes(), dtype="<f8")
    step = d + d * d
    n_blocks = len(meta["conditions"]) + 1
    if len(buf) != step * n_blocks:
        raise ValueError(f"{path}: size does not match {n_blocks} blocks of dimension {d}")

    def block(i, count, fallback):
        chunk = buf[i * step : (i + 1) * step]
        return GaussianParams(chunk[:d].copy(), chunk[d:].reshape(d, d).copy(), alpha, count,
                              diagonal=diag, fallback=fallback)

    conditions = {
        tuple(c["key"]): block(i, c["sample_count"], c["fallback"])
        for i, c in enumerate(meta["conditions"])
    }
    fallback = block(n_blocks - 1, meta["pooled_sample_count"], False)
    return GaussianBank(meta["mode"], alpha, conditions, fallback, diag)
