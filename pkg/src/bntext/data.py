"""Synthetic patient records: ground-truth sampling, stand-in text embeddings, masking.

Real consultation notes and their sentence-encoder embeddings are replaced by a
seeded generator: each note embedding is a base vector plus one prototype per
present symptom level, isotropic noise and a low-rank distractor component.
Like the real notes, embeddings see all five symptoms (fever and pain
included) but never the diagnoses.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .discrete import DiscreteBn, sample_columns
from .domain import (
    HIDDEN_SYMPTOMS,
    SPECS,
    SYMPTOMS,
    TEXT_SYMPTOMS,
    check_ground_truth,
)

EMPTY_ID = "__empty__"


def rng_for(seed: int, stream: str, *extra: int) -> np.random.Generator:
    """Independent named sub-stream of a user seed."""
    key = zlib.crc32(stream.encode())
    return np.random.default_rng([int(seed), key, *map(int, extra)])


@dataclass
class PatientRecord:
    id: int
    season: int
    pneu: int
    inf: int
    dysp: int | None = None
    cough: int | None = None
    nasal: int | None = None
    fever: int | None = None
    pain: int | None = None
    text_present: bool = True
    embedding: np.ndarray | None = field(default=None, repr=False)
    raw_text: str | None = None

    @property
    def symptoms_observed(self) -> bool:
        return all(getattr(self, s) is not None for s in SYMPTOMS)

    def assignment(self, hidden: bool = False) -> dict[str, int | None]:
        names = ("season", "pneu", "inf") + SYMPTOMS + (HIDDEN_SYMPTOMS if hidden else ())
        return {n: getattr(self, n) for n in names}

    def validate(self) -> None:
        for n in ("season", "pneu", "inf"):
            if getattr(self, n) is None:
                raise ValueError(f"record {self.id}: {n} must always be observed")
        observed = [getattr(self, s) is not None for s in SYMPTOMS]
        if any(observed) and not all(observed):
            raise ValueError(f"record {self.id}: symptoms must be observed all-or-none")
        for n in ("season", "pneu", "inf") + SYMPTOMS + HIDDEN_SYMPTOMS:
            v = getattr(self, n)
            if v is not None and not 0 <= v < SPECS[n].card:
                raise ValueError(f"record {self.id}: level {v} out of range for {n}")
        if self.text_present and self.embedding is None:
            raise ValueError(f"record {self.id}: text is present but no embedding is attached")
        if not self.text_present and self.embedding is not None:
            raise ValueError(f"record {self.id}: text is absent but an embedding is attached")


@dataclass
class Dataset:
    records: list[PatientRecord]
    empty_text: np.ndarray

    @property
    def d(self) -> int:
        return len(self.empty_text)

    def __len__(self) -> int:
        return len(self.records)

    def embeddings(self) -> np.ndarray:
        """Embedding matrix with the empty-text vector for records without text."""
        return np.stack(
            [r.embedding if r.text_present else self.empty_text for r in self.records]
        )

    def column(self, name: str) -> np.ndarray:
        """Level indices as int array; -1 for unobserved."""
        return np.array(
            [-1 if getattr(r, name) is None else getattr(r, name) for r in self.records],
            dtype=np.int64,
        )

    def standard(self) -> "Dataset":
        """Copy without the fever/pain columns."""
        return Dataset([replace(r, fever=None, pain=None) for r in self.records], self.empty_text)

    def subset(self, idx: Iterable[int]) -> "Dataset":
        return Dataset([self.records[i] for i in idx], self.empty_text)


@dataclass
class EmbedderSpec:
    """Synthetic ("synthetic") or file-backed ("file") text embeddings."""

    kind: str = "synthetic"
    d: int = 32
    prototypes: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)
    base: np.ndarray | None = None
    sigma: float = 0.1
    empty_text: np.ndarray | None = None
    distractors: np.ndarray | None = None  # (k, d)
    distractor_scale: float = 0.2
    path: str | None = None
    table: dict | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "file"):
            raise ValueError(f"unknown embedder kind {self.kind!r}")
        if self.kind == "synthetic":
            if self.sigma < 0:
                raise ValueError("sigma must be non-negative")
            if self.empty_text is None or len(self.empty_text) != self.d:
                raise ValueError("synthetic embedder needs an empty-text vector of dimension d")
            for key, vec in self.prototypes.items():
                if len(vec) != self.d:
                    raise ValueError(f"prototype {key} has dimension {len(vec)}, expected {self.d}")


def default_embedder(d: int = 32, seed: int = 1234, sigma: float = 0.1,
                     distractor_scale: float = 0.2, n_distractors: int = 4) -> EmbedderSpec:
    """Random unit-norm prototypes for every non-zero symptom level."""
    rng = np.random.default_rng(seed)

    def unit():
        v = rng.standard_normal(d)
        return v / np.linalg.norm(v)

    prototypes = {}
    for name in TEXT_SYMPTOMS:
        for level in range(1, SPECS[name].card):
            prototypes[(name, level)] = unit()
    base = unit()
    empty = unit()
    distractors = np.stack([unit() for _ in range(n_distractors)]) if n_distractors else None
    return EmbedderSpec(
        kind="synthetic", d=d, prototypes=prototypes, base=base, sigma=sigma,
        empty_text=empty, distractors=distractors, distractor_scale=distractor_scale,
    )


def synth_embed(spec: EmbedderSpec, state: dict[str, int], text_present: bool,
                rng: np.random.Generator) -> np.ndarray:
    """Embedding of a note describing the five-symptom ``state``."""
    if not text_present:
        return spec.empty_text.copy()
    x = np.zeros(spec.d) if spec.base is None else spec.base.copy()
    for name in TEXT_SYMPTOMS:
        proto = spec.prototypes.get((name, int(state[name])))
        if proto is not None:
            x += proto
    if spec.sigma > 0:
        x += spec.sigma * rng.standard_normal(spec.d)
    if spec.distractors is not None and spec.distractor_scale > 0:
        coef = spec.distractor_scale * rng.standard_normal(len(spec.distractors))
        x += coef @ spec.distractors
    return x


@dataclass
class SimulatedData:
    train: Dataset
    test: Dataset
    split: dict[str, list[int]]  # train ids per masking group


def build_dataset(gt: DiscreteBn, emb: EmbedderSpec, n_train: int = 4000,
                  n_test: int = 1000, seed: int = 0) -> SimulatedData:
    """Sample, embed and mask a train/test pair.

    Train masking: a seeded shuffle assigns floor(n/3) records to the
    symptom-masked group, floor(n/3) to the text-masked group and the rest
    to the fully observed group. The test set is fully observed. Records keep
    fever/pain; use :meth:`Dataset.standard` for the tabular view without them.
    """
    check_ground_truth(gt)

    def sample(n, stream, id_offset):
        cols = sample_columns(gt, n, rng_for(seed, stream))
        out = []
        for i in range(n):
            rid = id_offset + i
            vals = {k: int(cols[k][i]) for k in cols}
            rec = PatientRecord(id=rid, **vals)
            out.append(rec)
        return out

    train = sample(n_train, "data.train", 0)
    test = sample(n_test, "data.test", n_train)

    for rec in train + test:
        state = {s: getattr(rec, s) for s in TEXT_SYMPTOMS}
        rec.embedding = _embed_record(emb, rec.id, state, seed)

    order = rng_for(seed, "data.mask").permutation(n_train)
    third = n_train // 3
    sym_masked = sorted(int(i) for i in order[:third])
    text_masked = sorted(int(i) for i in order[third : 2 * third])
    full = sorted(int(i) for i in order[2 * third :])
    for i in sym_masked:
        for s in SYMPTOMS:
            setattr(train[i], s, None)
    for i in text_masked:
        train[i].text_present = False
        train[i].embedding = None
    empty = _empty_vector(emb)
    return SimulatedData(
        Dataset(train, empty), Dataset(test, empty),
        {"symptoms_masked": sym_masked, "text_masked": text_masked, "full": full},
    )


def _embed_record(emb: EmbedderSpec, rid: int, state: dict, seed: int) -> np.ndarray:
    if emb.kind == "file":
        if rid not in emb.table:
            raise KeyError(f"embedding file has no entry for id {rid}")
        return np.asarray(emb.table[rid], dtype=np.float64)
    return synth_embed(emb, state, True, rng_for(seed, "embed", rid))


def _empty_vector(emb: EmbedderSpec) -> np.ndarray:
    if emb.kind == "file":
        if EMPTY_ID not in emb.table:
            raise KeyError(f"embedding file has no {EMPTY_ID!r} entry")
        return np.asarray(emb.table[EMPTY_ID], dtype=np.float64)
    return emb.empty_text.copy()


# -- files -------------------------------------------------------------------

_SEASONS = SPECS["season"].levels
_FEVERS = SPECS["fever"].levels


def record_to_json(rec: PatientRecord, bnpp: bool = False) -> dict:
    doc = {
        "id": rec.id,
        "season": _SEASONS[rec.season],
        "pneu": rec.pneu,
        "inf": rec.inf,
        "dysp": rec.dysp,
        "cough": rec.cough,
        "nasal": rec.nasal,
    }
    if bnpp:
        doc["fever"] = None if rec.fever is None else _FEVERS[rec.fever]
        doc["pain"] = rec.pain
    doc["text_present"] = rec.text_present
    return doc


def record_from_json(doc: dict) -> PatientRecord:
    try:
        fever = doc.get("fever")
        rec = PatientRecord(
            id=int(doc["id"]),
            season=SPECS["season"].index(doc["season"]),
            # diagnoses may be null when the record is only queried, see validate()
            pneu=None if doc.get("pneu") is None else SPECS["pneu"].index(doc["pneu"]),
            inf=None if doc.get("inf") is None else SPECS["inf"].index(doc["inf"]),
            dysp=None if doc.get("dysp") is None else SPECS["dysp"].index(doc["dysp"]),
            cough=None if doc.get("cough") is None else SPECS["cough"].index(doc["cough"]),
            nasal=None if doc.get("nasal") is None else SPECS["nasal"].index(doc["nasal"]),
            fever=None if fever is None else SPECS["fever"].index(fever),
            pain=None if doc.get("pain") is None else SPECS["pain"].index(doc["pain"]),
            text_present=bool(doc["text_present"]),
        )
    except KeyError as exc:
        raise ValueError(f"record is missing field {exc}") from None
    return rec


def write_dataset(ds: Dataset, path: str | Path, bnpp: bool = False) -> None:
    with open(path, "w") as fh:
        for rec in ds.records:
            fh.write(json.dumps(record_to_json(rec, bnpp)) + "\n")


def write_embeddings(datasets: Sequence[Dataset], path: str | Path) -> None:
    """One line per text-bearing record, plus the empty-text entry first."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"id": EMPTY_ID, "vec": datasets[0].empty_text.tolist()}) + "\n")
        for ds in datasets:
            for rec in ds.records:
                if rec.text_present:
                    fh.write(json.dumps({"id": rec.id, "vec": rec.embedding.tolist()}) + "\n")


def read_embeddings(path: str | Path) -> dict:
    table = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            doc = json.loads(line)
            key = doc["id"] if doc["id"] == EMPTY_ID else int(doc["id"])
            if key in table:
                raise ValueError(f"{path}:{n}: duplicate embedding id {key!r}")
            table[key] = np.asarray(doc["vec"], dtype=np.float64)
    return table


def load_external(dataset_path: str | Path, embedding_path: str | Path | None = None,
                  table: dict | None = None) -> Dataset:
    """Join a record file with an embedding file (or an already-read table) by id."""
    if table is None:
        table = read_embeddings(embedding_path)
    if EMPTY_ID not in table:
        raise ValueError(f"embedding table has no {EMPTY_ID!r} entry")
    empty = table[EMPTY_ID]
    d = len(empty)
    records = []
    with open(dataset_path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = record_from_json(json.loads(line))
            vec = table.get(rec.id)
            if rec.text_present:
                if vec is None:
                    raise ValueError(f"{dataset_path}:{n}: no embedding for record {rec.id}")
                if len(vec) != d:
                    raise ValueError(
                        f"{dataset_path}:{n}: embedding dimension {len(vec)} != {d}"
                    )
                rec.embedding = vec
            elif vec is not None:
                raise ValueError(
                    f"{dataset_path}:{n}: record {rec.id} has text_present=false "
                    "but an embedding entry"
                )
            rec.validate()
            records.append(rec)
    return Dataset(records, empty)
