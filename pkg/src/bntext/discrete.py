"""Discrete Bayesian networks: CPTs, K2-smoothed fitting, exact inference, sampling.

Inference is exact enumeration over the full joint table. The networks used
here have at most 3 * 2**7 states, so the joint is materialized once per
network and cached.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

Assignment = dict  # variable name -> level index (None / absent = unobserved)

ROW_TOL = 1e-12


class ZeroEvidenceError(ValueError):
    """Evidence has probability zero under the model."""


@dataclass(frozen=True)
class VariableSpec:
    name: str
    levels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if len(self.levels) < 2:
            raise ValueError(f"variable {self.name!r} needs at least 2 levels")
        if len(set(self.levels)) != len(self.levels):
            raise ValueError(f"variable {self.name!r} has duplicate levels")

    @property
    def card(self) -> int:
        return len(self.levels)

    def index(self, value) -> int:
        """Level index for a label or an integer index."""
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            if 0 <= value < self.card:
                return int(value)
        elif isinstance(value, bool):
            if self.card == 2:
                return int(value)
        elif value in self.levels:
            return self.levels.index(value)
        raise ValueError(f"unknown level {value!r} for variable {self.name!r}")


@dataclass(frozen=True)
class Cpt:
    """P(child | parents); ``table[cfg, level]`` with row-major parent configs."""

    child: str
    parents: tuple[str, ...]
    table: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(self.parents))
        table = np.array(self.table, dtype=np.float64)
        if table.ndim != 2:
            raise ValueError(f"CPT for {self.child!r} must be 2-D")
        if np.any(table < 0) or np.any(table > 1):
            raise ValueError(f"CPT for {self.child!r} has entries outside [0, 1]")
        if np.any(np.abs(table.sum(axis=1) - 1.0) > ROW_TOL):
            raise ValueError(f"CPT rows for {self.child!r} do not sum to 1")
        table.flags.writeable = False
        object.__setattr__(self, "table", table)

    def row(self, parent_levels: Sequence[int], parent_cards: Sequence[int]) -> np.ndarray:
        if not self.parents:
            return self.table[0]
        return self.table[np.ravel_multi_index(tuple(parent_levels), tuple(parent_cards))]


@dataclass(frozen=True)
class DiscreteBn:
    variables: tuple[VariableSpec, ...]
    cpts: Mapping[str, Cpt] = field(hash=False)

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise ValueError("duplicate variable names")
        if set(self.cpts) != set(names):
            missing = set(names) - set(self.cpts)
            extra = set(self.cpts) - set(names)
            raise ValueError(f"CPT set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        seen: set[str] = set()
        for v in self.variables:
            cpt = self.cpts[v.name]
            for p in cpt.parents:
                if p not in seen:
                    raise ValueError(
                        f"parent {p!r} of {v.name!r} does not precede it (cycle or bad order)"
                    )
            n_rows = int(np.prod([self.spec(p).card for p in cpt.parents], dtype=int))
            if cpt.table.shape != (n_rows, v.card):
                raise ValueError(
                    f"CPT for {v.name!r} has shape {cpt.table.shape}, expected {(n_rows, v.card)}"
                )
            seen.add(v.name)

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    def spec(self, name: str) -> VariableSpec:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(f"unknown variable {name!r}")

    def cards(self, names: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.spec(n).card for n in names)

    @cached_property
    def joint_table(self) -> np.ndarray:
        """Full joint as an array with one axis per variable (declaration order)."""
        names = self.names
        shape = self.cards(names)
        joint = np.ones(shape)
        for v in self.variables:
            cpt = self.cpts[v.name]
            axes = [names.index(p) for p in cpt.parents] + [names.index(v.name)]
            factor = cpt.table.reshape(self.cards(cpt.parents) + (v.card,))
            # move factor axes into joint layout, size-1 elsewhere
            order = np.argsort(axes)
            factor = np.transpose(factor, order)
            bshape = [1] * len(names)
            for ax in sorted(axes):
                bshape[ax] = shape[ax]
            joint = joint * factor.reshape(bshape)
        joint.flags.writeable = False
        return joint

    def normalize_evidence(self, evidence: Mapping) -> dict[str, int]:
        out = {}
        for name, value in evidence.items():
            if value is None:
                continue
            out[name] = self.spec(name).index(value)
        return out


def fit_cpt_mle_k2(
    records: Sequence[Mapping],
    child: VariableSpec,
    parents: Sequence[VariableSpec] = (),
) -> Cpt:
    """Add-one (K2) smoothed maximum-likelihood CPT.

    Records that leave the child or any parent unobserved are skipped.
    """
    parent_cards = tuple(p.card for p in parents)
    n_rows = int(np.prod(parent_cards, dtype=int))
    counts = np.zeros((n_rows, child.card))
    for i, rec in enumerate(records):
        values = [rec.get(child.name)] + [rec.get(p.name) for p in parents]
        if any(v is None for v in values):
            continue
        try:
            c = child.index(values[0])
            pl = [p.index(v) for p, v in zip(parents, values[1:])]
        except ValueError as exc:
            raise ValueError(f"record {i}: {exc}") from None
        row = np.ravel_multi_index(tuple(pl), parent_cards) if parents else 0
        counts[row, c] += 1
    table = (counts + 1.0) / (counts.sum(axis=1, keepdims=True) + child.card)
    return Cpt(child.name, tuple(p.name for p in parents), table)


def fit_bn(
    records: Sequence[Mapping],
    variables: Sequence[VariableSpec],
    structure: Mapping[str, Sequence[str]],
) -> DiscreteBn:
    """Fit every CPT of a fixed DAG independently with :func:`fit_cpt_mle_k2`."""
    by_name = {v.name: v for v in variables}
    cpts = {
        v.name: fit_cpt_mle_k2(records, v, [by_name[p] for p in structure[v.name]])
        for v in variables
    }
    return DiscreteBn(tuple(variables), cpts)


def joint_prob(bn: DiscreteBn, full: Mapping) -> float:
    idx = bn.normalize_evidence(full)
    missing = [n for n in bn.names if n not in idx]
    if missing:
        raise ValueError(f"assignment is partial, missing: {missing}")
    p = 1.0
    for v in bn.variables:
        cpt = bn.cpts[v.name]
        row = cpt.row([idx[q] for q in cpt.parents], bn.cards(cpt.parents))
        p *= row[idx[v.name]]
    return float(p)


def posterior(bn: DiscreteBn, query: str, evidence: Mapping) -> np.ndarray:
    """P(query | evidence) by summing the cached joint over all completions."""
    ev = bn.normalize_evidence(evidence)
    if query in ev:
        raise ValueError(f"query variable {query!r} is also in the evidence")
    names = bn.names
    bn.spec(query)
    index = tuple(ev.get(n, slice(None)) for n in names)
    sliced = bn.joint_table[index]
    free = [n for n in names if n not in ev]
    qaxis = free.index(query)
    other = tuple(i for i in range(len(free)) if i != qaxis)
    unnorm = sliced.sum(axis=other) if other else np.asarray(sliced)
    total = unnorm.sum()
    if not total > 0:
        raise ZeroEvidenceError(f"evidence {ev} has zero probability")
    return unnorm / total


def ancestral_sample(bn: DiscreteBn, n: int, seed: int) -> list[dict[str, int]]:
    if n < 0:
        raise ValueError("n must be non-negative")
    cols = sample_columns(bn, n, np.random.default_rng(seed))
    names = bn.names
    return [{k: int(cols[k][i]) for k in names} for i in range(n)]


def sample_columns(bn: DiscreteBn, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Vectorized top-down sampling; returns one index array per variable."""
    cols: dict[str, np.ndarray] = {}
    for v in bn.variables:
        cpt = bn.cpts[v.name]
        if cpt.parents:
            cfg = np.ravel_multi_index(
                tuple(cols[p] for p in cpt.parents), bn.cards(cpt.parents)
            )
        else:
            cfg = np.zeros(n, dtype=np.intp)
        cdf = np.cumsum(cpt.table[cfg], axis=1)
        u = rng.random(n)
        cols[v.name] = np.minimum((u[:, None] >= cdf).sum(axis=1), v.card - 1)
    return cols


def enumerate_states(bn: DiscreteBn):
    """Yield every full assignment of the network."""
    names = bn.names
    for combo in product(*(range(v.card) for v in bn.variables)):
        yield dict(zip(names, combo))


# -- JSON --------------------------------------------------------------------


def bn_to_dict(bn: DiscreteBn) -> dict:
    return {
        "variables": [{"name": v.name, "levels": list(v.levels)} for v in bn.variables],
        "cpts": [
            {
                "child": v.name,
                "parents": list(bn.cpts[v.name].parents),
                "rows": bn.cpts[v.name].table.tolist(),
            }
            for v in bn.variables
        ],
    }


def bn_from_dict(doc: Mapping) -> DiscreteBn:
    try:
        variables = tuple(VariableSpec(v["name"], tuple(v["levels"])) for v in doc["variables"])
        cpts = {c["child"]: Cpt(c["child"], tuple(c["parents"]), c["rows"]) for c in doc["cpts"]}
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed network document: {exc!r}") from None
    return DiscreteBn(variables, cpts)


def save_bn(bn: DiscreteBn, path: str | Path) -> None:
    Path(path).write_text(json.dumps(bn_to_dict(bn), indent=1))


def load_bn(path: str | Path) -> DiscreteBn:
    return bn_from_dict(json.loads(Path(path).read_text()))


def log_joint_table(bn: DiscreteBn) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(bn.joint_table)


def posterior_from_log_joint(
    log_joint: np.ndarray,
    names: Sequence[str],
    evidence: Mapping[str, np.ndarray],
    query: str,
) -> np.ndarray:
    """Batched posterior from per-record log joint tables.

    ``log_joint`` has shape ``(n, *cards)`` with axes named by ``names``.
    ``evidence`` maps variable names to int arrays of length n, -1 meaning
    unobserved. Sums over unobserved variables use log-sum-exp.
    """
    n = log_joint.shape[0]
    work = np.array(log_joint, dtype=np.float64, copy=True)
    for name, values in evidence.items():
        if name not in names:
            continue
        values = np.asarray(values)
        ax = names.index(name) + 1
        if name == query and np.any(values >= 0):
            raise ValueError(f"query variable {query!r} is also in the evidence")
        levels = np.arange(work.shape[ax])
        shape = [1] * work.ndim
        shape[0], shape[ax] = n, work.shape[ax]
        keep = (values[:, None] < 0) | (values[:, None] == levels[None, :])
        work = np.where(keep.reshape(shape), work, -np.inf)
    qax = names.index(query) + 1
    other = tuple(a for a in range(1, work.ndim) if a != qax)
    m = work.max(axis=other, keepdims=True)
    mmax = m.max(axis=qax, keepdims=True)
    if not np.all(np.isfinite(mmax)):
        bad = int(np.flatnonzero(~np.isfinite(mmax.reshape(n)))[0])
        raise ZeroEvidenceError(f"record {bad}: evidence has zero probability")
    unnorm = np.exp(work - mmax).sum(axis=other)
    return unnorm / unnorm.sum(axis=1, keepdims=True)
