"""Discriminative text node: one neural classifier per parent configuration.

The joint conditional on the text embedding factorizes as

    P(B) P(D0|B,T) P(D1|B,T) P(S0|D0,T) P(S1|D0,D1,T) P(S2|D1,T)

and every factor except P(B) is a small net fed with the embedding, chosen by
the observed parent values. All factors are trained together by minimizing the
mean negative log of that product; unobserved symptoms simply drop their
factors. In ablated mode P(D0|B) and P(D1|B) are plain table rows.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import Dataset, rng_for
from .discrete import posterior_from_log_joint
from .neural import (
    AdamState,
    DenseNet,
    adam_step,
    bce_grad,
    forward,
    init_net,
    load_net,
    save_net,
)

NAMES = ("season", "pneu", "inf", "dysp", "cough", "nasal")
PARENTS = {
    "pneu": ("season",),
    "inf": ("season",),
    "dysp": ("pneu",),
    "cough": ("pneu", "inf"),
    "nasal": ("inf",),
}
DIAG_CHILDREN = ("pneu", "inf")
SYMPTOM_CHILDREN = ("dysp", "cough", "nasal")


def _configs(child):
    k = len(PARENTS[child])
    return [tuple(int(b) for b in np.binary_repr(i, k)) for i in range(2**k)]


def net_keys(mode: str = "full") -> list[tuple[str, tuple[int, ...]]]:
    children = SYMPTOM_CHILDREN if mode == "ablated" else DIAG_CHILDREN + SYMPTOM_CHILDREN
    return [(c, cfg) for c in children for cfg in _configs(c)]


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _sigmoid(z):
    return np.exp(_log_sigmoid(z))


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-2
    weight_decay: float = 1e-3
    prior_learning_rate: float = 0.05
    seed: int = 0
    dropout: dict = field(default_factory=lambda: {"pneu": 0.7, "inf": 0.7, "symptom": 0.0})
    hidden: dict = field(default_factory=lambda: {"pneu": [256], "inf": [], "symptom": []})

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")
        if self.learning_rate <= 0 or self.prior_learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning rates must be positive and weight decay non-negative")

    def family(self, child: str) -> str:
        return child if child in DIAG_CHILDREN else "symptom"


@dataclass
class ClassifierBank:
    mode: str
    prior_logit: float
    nets: dict[tuple[str, tuple[int, ...]], DenseNet]
    empty_text: np.ndarray
    # ablated mode only: logits of P(Di = yes | season = b)
    cpt_logits: dict[tuple[str, tuple[int, ...]], float] = field(default_factory=dict)
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("full", "ablated"):
            raise ValueError(f"unknown bank mode {self.mode!r}")
        if set(self.nets) != set(net_keys(self.mode)):
            raise ValueError(f"{self.mode} bank needs exactly {len(net_keys(self.mode))} nets")
        dims = {net.n_in for net in self.nets.values()}
        if dims != {len(self.empty_text)}:
            raise ValueError("all nets must share the embedding dimension")
        if self.mode == "ablated":
            want = {(c, cfg) for c in DIAG_CHILDREN for cfg in _configs(c)}
            if set(self.cpt_logits) != want:
                raise ValueError("ablated bank needs CPT rows for P(pneu|season) and P(inf|season)")

    @property
    def prior_b(self) -> float:
        return float(_sigmoid(np.array(self.prior_logit)))

    @property
    def d(self) -> int:
        return len(self.empty_text)

    def diag_logit(self, child: str, b: int, x: np.ndarray) -> np.ndarray:
        if self.mode == "ablated":
            return np.full(len(x), self.cpt_logits[(child, (b,))])
        return net_logits(self.nets[(child, (b,))], x)


def net_logits(net: DenseNet, x: np.ndarray) -> np.ndarray:
    _, cache = forward(net, np.atleast_2d(x))
    return cache.logit


def init_bank(d: int, empty_text: np.ndarray, cfg: TrainConfig, mode: str = "full") -> ClassifierBank:
    nets = {}
    for i, key in enumerate(net_keys(mode)):
        fam = cfg.family(key[0])
        dims = [d] + list(cfg.hidden[fam]) + [1]
        nets[key] = init_net(dims, rng_for(cfg.seed, "init", i), dropout=cfg.dropout[fam])
    cpt_logits = {}
    if mode == "ablated":
        cpt_logits = {(c, cfg_): 0.0 for c in DIAG_CHILDREN for cfg_ in _configs(c)}
    return ClassifierBank(mode, 0.0, nets, np.asarray(empty_text, dtype=np.float64), cpt_logits)


def _check_records(cols: Mapping[str, np.ndarray]) -> None:
    sym = np.stack([cols[s] >= 0 for s in SYMPTOM_CHILDREN], axis=1)
    diag_missing = (cols["pneu"] < 0) | (cols["inf"] < 0)
    bad = np.flatnonzero(sym.any(axis=1) & diag_missing)
    if len(bad):
        raise ValueError(f"record {int(bad[0])}: observed symptoms with an unobserved diagnosis")
    if np.any(cols["season"] < 0):
        raise ValueError(f"record {int(np.flatnonzero(cols['season'] < 0)[0])}: season unobserved")


def train_bank(ds: Dataset, cfg: TrainConfig | None = None, mode: str = "full",
               bank: ClassifierBank | None = None) -> ClassifierBank:
    """Jointly fit all factors by Adam on the mean record negative log-likelihood.

    A net (or table row) takes an optimizer step only on batches where at
    least one record routes an observed child value through it, so masked
    symptoms leave the symptom nets untouched.
    """
    cfg = cfg or TrainConfig()
    x = ds.embeddings()
    cols = {n: ds.column(n) for n in NAMES}
    _check_records(cols)
    if bank is None:
        bank = init_bank(x.shape[1], ds.empty_text, cfg, mode)
    mode = bank.mode

    prior_param = [np.array([bank.prior_logit])]
    prior_state = AdamState(learning_rate=cfg.prior_learning_rate)
    cpt_params = {k: [np.array([v])] for k, v in bank.cpt_logits.items()}
    cpt_states = {k: AdamState(learning_rate=cfg.prior_learning_rate) for k in cpt_params}
    states = {
        k: AdamState(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
        for k in bank.nets
    }
    routes = _routes(cols, bank.nets)
    shuffle = rng_for(cfg.seed, "shuffle")
    drop = rng_for(cfg.seed, "dropout")
    n = len(x)

    for epoch in range(cfg.epochs):
        order = shuffle.permutation(n)
        in_batch = np.zeros(n, dtype=bool)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            w = 1.0 / len(idx)
            in_batch[:] = False
            in_batch[idx] = True

            b = cols["season"][idx]
            a = prior_param[0][0]
            p = _sigmoid(np.array(a))
            grad = np.array([np.sum(p - b) * w])
            total += float(-np.sum(b * _log_sigmoid(a) + (1 - b) * _log_sigmoid(-a)))
            adam_step(prior_state, prior_param, [grad], ["prior_b"])

            for key, param in cpt_params.items():
                child, (bv,) = key
                sel = (b == bv) & (cols[child][idx] >= 0)
                if not sel.any():
                    continue
                y = cols[child][idx][sel]
                c = param[0][0]
                g = np.array([np.sum(_sigmoid(np.array(c)) - y) * w])
                total += float(-np.sum(y * _log_sigmoid(c) + (1 - y) * _log_sigmoid(-c)))
                adam_step(cpt_states[key], param, [g], [f"cpt.{child}.{bv}"])

            for key, net in bank.nets.items():
                rows = np.flatnonzero(routes[key] & in_batch)
                if len(rows) == 0:
                    continue
                _, cache = forward(net, x[rows], train=True, rng=drop)
                grads, loss = bce_grad(net, cache, cols[key[0]][rows], w)
                if not np.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite loss for net {key} at epoch {epoch}, batch {start // cfg.batch_size}"
                    )
                total += loss / w
                adam_step(states[key], net.params(), grads,
                          [f"{key[0]}|{key[1]}.{p}" for p in net.param_paths()])
        bank.history.append(total)

    bank.prior_logit = float(prior_param[0][0])
    bank.cpt_logits = {k: float(v[0][0]) for k, v in cpt_params.items()}
    return bank


def _routes(cols, nets) -> dict:
    """Boolean mask per net: records whose parents select it and whose child is observed."""
    out = {}
    for child, cfg in nets:
        m = cols[child] >= 0
        for parent, val in zip(PARENTS[child], cfg):
            m = m & (cols[parent] == val)
        out[(child, cfg)] = m
    return out


def factor_terms(bank: ClassifierBank, record: Mapping, embedding: np.ndarray | None = None):
    """Per-factor (key, observed child value, P(child = 1 | parents, T)) for one record.

    Unobserved children contribute no factor. ``embedding=None`` means the
    empty text.
    """
    x = bank.empty_text if embedding is None else np.asarray(embedding, dtype=np.float64)
    terms = [(("season", ()), record["season"], bank.prior_b)]
    for child in DIAG_CHILDREN + SYMPTOM_CHILDREN:
        v = record.get(child)
        if v is None:
            continue
        cfg = tuple(record[p] for p in PARENTS[child])
        if bank.mode == "ablated" and child in DIAG_CHILDREN:
            prob = float(_sigmoid(np.array(bank.cpt_logits[(child, cfg)])))
        else:
            prob, _ = forward(bank.nets[(child, cfg)], x)
        terms.append(((child, cfg), v, float(prob)))
    return terms


def record_loss(bank: ClassifierBank, record: Mapping, embedding: np.ndarray | None = None) -> float:
    """Negative log of the conditional joint for one record (sum of per-factor BCE)."""
    total = 0.0
    for _, v, p in factor_terms(bank, record, embedding):
        p = min(max(p, 1e-12), 1.0 - 1e-12)
        total -= np.log(p) if v == 1 else np.log(1.0 - p)
    return float(total)


# -- inference ---------------------------------------------------------------


def _bern_table(z: np.ndarray) -> np.ndarray:
    """Stack log P(child=0), log P(child=1) along a new last axis."""
    return np.stack([_log_sigmoid(-z), _log_sigmoid(z)], axis=-1)


def discr_log_joint(bank: ClassifierBank, x: np.ndarray) -> np.ndarray:
    """``(n, 2, 2, 2, 2, 2, 2)`` log of the conditional joint over NAMES."""
    x = np.atleast_2d(x)
    n = len(x)
    out = np.zeros((n,) + (2,) * len(NAMES))

    def add(tab, axes):
        shape = [n] + [1] * len(NAMES)
        for ax in axes:
            shape[NAMES.index(ax) + 1] = 2
        nonlocal out
        out = out + tab.reshape(shape)

    add(np.broadcast_to(_bern_table(np.array(bank.prior_logit)), (n, 2)), ["season"])
    for child in DIAG_CHILDREN:
        tab = np.stack([_bern_table(bank.diag_logit(child, b, x)) for b in (0, 1)], axis=1)
        add(tab, ["season", child])
    for child in SYMPTOM_CHILDREN:
        parents = PARENTS[child]
        tab = np.empty((n,) + (2,) * len(parents) + (2,))
        for cfg in _configs(child):
            tab[(slice(None),) + cfg] = _bern_table(net_logits(bank.nets[(child, cfg)], x))
        add(tab, list(parents) + [child])
    return out


def discr_posterior_batch(bank: ClassifierBank, evidence: Mapping[str, np.ndarray],
                          x: np.ndarray | None, query: str) -> np.ndarray:
    """Posterior over ``query`` for n records; rows of ``x`` are embeddings (None: empty text).

    Records with no symptom evidence and an observed season get the
    diagnosis classifier output (or CPT row) directly.
    """
    if query not in DIAG_CHILDREN:
        raise ValueError(f"query must be a diagnosis, got {query!r}")
    extra = {k for k, v in evidence.items() if np.any(np.asarray(v) >= 0)} - {"season", *SYMPTOM_CHILDREN}
    if extra:
        raise ValueError(f"evidence may only contain season, symptoms and text; got {sorted(extra)}")
    n = len(next(iter(evidence.values())))
    if x is None:
        x = np.broadcast_to(bank.empty_text, (n, bank.d))
    x = np.atleast_2d(x)
    post = posterior_from_log_joint(discr_log_joint(bank, x), NAMES, evidence, query)
    season = np.asarray(evidence.get("season", np.full(n, -1)))
    no_sym = np.ones(n, dtype=bool)
    for s in SYMPTOM_CHILDREN:
        if s in evidence:
            no_sym &= np.asarray(evidence[s]) < 0
    direct = np.flatnonzero(no_sym & (season >= 0))
    for b in (0, 1):
        rows = direct[season[direct] == b]
        if len(rows):
            p = direct_output(bank, query, b, x[rows])
            post[rows, 1] = p
            post[rows, 0] = 1.0 - p
    return post


def direct_output(bank: ClassifierBank, child: str, b: int, x: np.ndarray) -> np.ndarray:
    """P(child = yes | season = b, T) straight from the diagnosis classifier."""
    if bank.mode == "ablated":
        return np.full(len(np.atleast_2d(x)), _sigmoid(np.array(bank.cpt_logits[(child, (b,))])))
    out, _ = forward(bank.nets[(child, (b,))], np.atleast_2d(x))
    return out


def discr_posterior(bank: ClassifierBank, evidence: Mapping, embedding: np.ndarray | None,
                    query: str) -> np.ndarray:
    """Single-record posterior; a missing embedding means the empty text."""
    ev = {k: np.array([-1 if v is None else int(v)]) for k, v in evidence.items()}
    x = None if embedding is None else np.atleast_2d(embedding)
    return discr_posterior_batch(bank, ev, x, query)[0]


discr_posterior_ablated = discr_posterior


# -- checkpoints -------------------------------------------------------------


def _net_file(key) -> str:
    child, cfg = key
    return f"net_{child}_{''.join(map(str, cfg))}.bin"


def save_classifier_bank(bank: ClassifierBank, directory: str | Path, seed: int | None = None,
                         cfg: TrainConfig | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nets = []
    for key, net in sorted(bank.nets.items()):
        fname = _net_file(key)
        save_net(net, directory / fname, seed=seed)
        nets.append({"child": key[0], "parents": list(PARENTS[key[0]]), "config": list(key[1]),
                     "file": fname})
    manifest = {
        "mode": bank.mode,
        "prior_logit": bank.prior_logit,
        "prior_b": bank.prior_b,
        "empty_text": bank.empty_text.tolist(),
        "cpt_logits": [{"child": k[0], "config": list(k[1]), "logit": v}
                       for k, v in sorted(bank.cpt_logits.items())],
        "nets": nets,
        "seed": seed,
        "train_config": asdict(cfg) if cfg else None,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_classifier_bank(directory: str | Path) -> ClassifierBank:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    nets = {
        (e["child"], tuple(e["config"])): load_net(directory / e["file"]) for e in manifest["nets"]
    }
    cpt = {(e["child"], tuple(e["config"])): e["logit"] for e in manifest["cpt_logits"]}
    return ClassifierBank(manifest["mode"], manifest["prior_logit"], nets,
                          np.asarray(manifest["empty_text"]), cpt)
