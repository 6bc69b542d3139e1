"""Command-line entry point: simulate, train, infer, evaluate, report.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
Settings resolve as command-line flag > JSON config file > built-in default.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import classifier, discrete, ff, gaussian
from .data import (
    build_dataset,
    default_embedder,
    load_external,
    read_embeddings,
    record_from_json,
    write_dataset,
    write_embeddings,
)
from .domain import check_ground_truth, default_ground_truth
from .evaluation import CLI_PATTERNS, MODELS, PATTERNS, ExperimentPlan, ResultTable, make_model, run_experiment
from .neural import forward, load_net, save_net

MODEL_IDS = {"bn": "BN", "bnpp": "BN++", "ff": "FF", "gen": "GEN", "discr": "DISCR"}

DEFAULTS = {
    "n_train": 4000,
    "n_test": 1000,
    "dim": 32,
    "sigma": 0.1,
    "distractor_scale": 0.2,
    "embedder_seed": 1234,
    "alpha": 0.85,
    "seeds": [0, 1, 2, 3, 4],
    "models": list(MODELS),
    "patterns": list(PATTERNS),
    "workers": 1,
}
TRAIN_KEYS = ("epochs", "batch_size", "learning_rate", "weight_decay", "prior_learning_rate", "diagonal")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bntext", description="Hybrid Bayesian networks over tabular and text evidence.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON file of settings")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path)

    s = sub.add_parser("simulate", help="sample a synthetic train/test pair")
    common(s)
    s.add_argument("--gt", type=Path, help="ground-truth network JSON (default: built-in illustrative network)")

    t = sub.add_parser("train", help="fit one model and write a checkpoint")
    common(t)
    t.add_argument("--model", choices=sorted(MODEL_IDS), required=True)
    t.add_argument("--ablate", action="store_true", help="ablated variant (gen, discr)")
    t.add_argument("--alpha", type=float)
    t.add_argument("--data", type=Path, required=True, help="dataset directory or train file")
    t.add_argument("--embeddings", type=Path)

    i = sub.add_parser("infer", help="posteriors for one record")
    common(i)
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--record", required=True, help="inline JSON object or path to a JSON file")
    i.add_argument("--evidence", choices=sorted(CLI_PATTERNS), default="bst")
    i.add_argument("--embeddings", type=Path)

    e = sub.add_parser("evaluate", help="run the model x evidence x seed plan")
    common(e)
    e.add_argument("--data", type=Path, required=True, help="dataset directory or train file")
    e.add_argument("--test", type=Path, help="test file when --data is a file")
    e.add_argument("--embeddings", type=Path)
    e.add_argument("--seeds", help="comma-separated seeds (overrides --seed)")
    e.add_argument("--alpha", type=float)

    r = sub.add_parser("report", help="print a stored result table")
    common(r)
    r.add_argument("--data", type=Path, required=True, help="results.json or the directory holding it")
    return p


# -- helpers -----------------------------------------------------------------


def load_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        try:
            cfg.update(json.loads(args.config.read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc})") from None
    for key in ("seed", "alpha"):
        if getattr(args, key, None) is not None:
            cfg[key] = getattr(args, key)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def require_seed(cfg: dict) -> int:
    if cfg.get("seed") is None:
        raise UsageError("a seed is required (--seed N or \"seed\" in the config file)")
    return int(cfg["seed"])


def require_out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    return args.out


def _existing(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def resolve_split(data: Path, split: str, test: Path | None = None) -> Path:
    if data.is_dir():
        for name in (f"{split}_bnpp.jsonl", f"{split}.jsonl"):
            if (data / name).is_file():
                return data / name
        raise UsageError(f"no {split}.jsonl in {data}")
    if split == "train":
        return _existing(data, "dataset file")
    if test is None:
        raise UsageError("--test is required when --data is a file")
    return _existing(test, "test file")


def resolve_embeddings(data: Path, embeddings: Path | None) -> Path:
    if embeddings is not None:
        return _existing(embeddings, "embedding file")
    if data.is_dir():
        return _existing(data / "embeddings.jsonl", "embedding file")
    raise UsageError("--embeddings is required when --data is a file")


def _has_hidden_symptoms(ds) -> bool:
    return any(r.fever is not None for r in ds.records)


# -- subcommands -------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = load_config(args)
    seed = require_seed(cfg)
    out = require_out(args)
    gt_path = args.gt or (Path(cfg["gt"]) if cfg.get("gt") else None)
    if gt_path is not None:
        _existing(gt_path, "ground-truth file")
        try:
            gt = discrete.load_bn(gt_path)
            check_ground_truth(gt)
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise UsageError(f"invalid ground-truth network {gt_path}: {exc}") from None
    else:
        gt = default_ground_truth()
    emb = default_embedder(int(cfg["dim"]), seed=int(cfg["embedder_seed"]), sigma=float(cfg["sigma"]),
                           distractor_scale=float(cfg["distractor_scale"]))
    sim = build_dataset(gt, emb, int(cfg["n_train"]), int(cfg["n_test"]), seed)

    out.mkdir(parents=True, exist_ok=True)
    write_dataset(sim.train, out / "train.jsonl")
    write_dataset(sim.test, out / "test.jsonl")
    write_dataset(sim.train, out / "train_bnpp.jsonl", bnpp=True)
    write_dataset(sim.test, out / "test_bnpp.jsonl", bnpp=True)
    write_embeddings([sim.train, sim.test], out / "embeddings.jsonl")
    discrete.save_bn(gt, out / "ground_truth.json")
    files = ["train.jsonl", "test.jsonl", "train_bnpp.jsonl", "test_bnpp.jsonl",
             "embeddings.jsonl", "ground_truth.json"]
    manifest = {
        "seed": seed,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "split": {k: len(v) for k, v in sim.split.items()},
        "sha256": {f: sha256_file(out / f) for f in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    print(f"train {len(sim.train)}: symptoms masked {len(sim.split['symptoms_masked'])}, "
          f"text masked {len(sim.split['text_masked'])}, fully observed {len(sim.split['full'])}")
    print(f"test {len(sim.test)}")
    for name, ds in (("train", sim.train), ("test", sim.test)):
        print(f"{name} positives: pneu {int(ds.column('pneu').sum())}, inf {int(ds.column('inf').sum())}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = require_out(args)
    model_id = MODEL_IDS[args.model]
    if args.ablate:
        if args.model not in ("gen", "discr"):
            raise UsageError("--ablate applies only to gen and discr")
        model_id += "-"
    stochastic = args.model in ("ff", "discr")
    seed = require_seed(cfg) if stochastic else int(cfg.get("seed") or 0)
    _existing(args.data, "dataset")
    train = load_external(resolve_split(args.data, "train"),
                          resolve_embeddings(args.data, args.embeddings))
    if args.model == "bnpp" and not _has_hidden_symptoms(train):
        raise UsageError("bnpp needs fever/pain columns (use the *_bnpp.jsonl dataset variant)")

    overrides = {k: cfg[k] for k in TRAIN_KEYS if k in cfg}
    if args.model == "gen":
        overrides["alpha"] = float(cfg["alpha"])
    model = make_model(model_id).fit(train, seed, overrides)

    out.mkdir(parents=True, exist_ok=True)
    files = []
    if args.model in ("bn", "bnpp", "gen"):
        discrete.save_bn(model.bn, out / "bn.json")
        files.append("bn.json")
    if args.model == "gen":
        gaussian.save_bank(model.bank, out / "bank.bin")
        files += ["bank.bin", "bank.bin.json"]
    if args.model == "discr":
        tc = classifier.TrainConfig(seed=seed, **{k: v for k, v in overrides.items()
                                                   if k in TRAIN_KEYS and k != "diagonal"})
        classifier.save_classifier_bank(model.bank, out / "classifiers", seed=seed, cfg=tc)
        files.append("classifiers/manifest.json")
        files += [f"classifiers/{p.name}" for p in sorted((out / "classifiers").glob("*.bin"))]
    if args.model == "ff":
        for q, m in model.models.items():
            ff_extra = {"diagnosis": q, "interactions": m.interactions,
                        "substitutions": {"no-text": m.empty_text.tolist(),
                                          "no-symptoms": "symptom slots set to unobserved"}}
            save_net(m.net, out / f"ff_{q}.bin", seed=seed, extra=ff_extra)
            files += [f"ff_{q}.bin", f"ff_{q}.bin.json"]

    effective = {k: v for k, v in cfg.items() if k not in ("models", "patterns", "seeds", "workers")}
    manifest = {
        "model": args.model,
        "ablate": bool(args.ablate),
        "seed": seed,
        "alpha": float(cfg["alpha"]) if args.model == "gen" else None,
        "config": effective,
        "config_hash": config_hash(effective),
        "data_sha256": sha256_file(resolve_split(args.data, "train")),
        "sha256": {f: sha256_file(out / f) for f in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(f"trained {model_id} (seed {seed}) -> {out}")
    return 0


def _read_record(spec: str):
    path = Path(spec)
    text = path.read_text() if not spec.lstrip().startswith("{") and path.is_file() else spec
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        if not spec.lstrip().startswith("{"):
            raise UsageError(f"record file not found: {spec}") from None
        raise UsageError("--record is neither a JSON object nor a readable file") from None
    vec = doc.pop("vec", None)
    doc.setdefault("text_present", vec is not None)
    try:
        rec = record_from_json(doc)
    except ValueError as exc:
        raise UsageError(f"invalid record: {exc}") from None
    return rec, None if vec is None else np.asarray(vec, dtype=np.float64)


def cmd_infer(args) -> int:
    ckpt = _existing(args.checkpoint, "checkpoint directory")
    manifest_path = _existing(ckpt / "manifest.json", "checkpoint manifest")
    manifest = json.loads(manifest_path.read_text())
    model, ablate = manifest["model"], manifest["ablate"]
    pattern = CLI_PATTERNS[args.evidence]
    rec, vec = _read_record(args.record)
    if model in ("bn", "bnpp") and pattern != "B+S":
        raise UsageError(f"{MODEL_IDS[model]} only admits evidence B+S (background and symptoms); "
                         f"text evidence ({args.evidence}) is not part of this model")
    use_text = pattern != "B+S"
    use_sym = pattern != "B+T"
    if use_text and vec is None and rec.text_present:
        if args.embeddings is None:
            raise UsageError("record has text but no \"vec\"; pass --embeddings")
        table = read_embeddings(_existing(args.embeddings, "embedding file"))
        if rec.id not in table:
            raise UsageError(f"embedding file has no entry for id {rec.id}")
        vec = table[rec.id]
    if not rec.text_present:
        vec = None

    evidence = {"season": rec.season}
    if use_sym:
        evidence.update({s: getattr(rec, s) for s in ("dysp", "cough", "nasal")})
        if model == "bnpp":
            evidence.update({"fever": rec.fever, "pain": rec.pain})
    evidence = {k: v for k, v in evidence.items() if v is not None}
    x = vec if use_text else None

    out: dict = {"model": model, "ablate": ablate, "evidence": pattern, "posterior": {}}
    if model in ("bn", "bnpp"):
        bn = discrete.load_bn(ckpt / "bn.json")
        for q in ("pneu", "inf"):
            out["posterior"][q] = float(discrete.posterior(bn, q, evidence)[1])
    elif model == "gen":
        bn = discrete.load_bn(ckpt / "bn.json")
        bank = gaussian.load_bank(ckpt / "bank.bin")
        for q in ("pneu", "inf"):
            out["posterior"][q] = float(gaussian.gen_posterior(bank, bn, evidence, x, q)[1])
    elif model == "discr":
        bank = classifier.load_classifier_bank(ckpt / "classifiers")
        if x is None and use_text:
            x = bank.empty_text
        for q in ("pneu", "inf"):
            out["posterior"][q] = float(classifier.discr_posterior(bank, evidence, x, q)[1])
        out["classifiers"] = _classifier_outputs(bank, evidence, x)
    elif model == "ff":
        mode = {"B+S+T": "full", "B+S": "no-text", "B+T": "no-symptoms"}[pattern]
        for q in ("pneu", "inf"):
            meta = json.loads((ckpt / f"ff_{q}.bin.json").read_text())
            m = ff.FFModel(q, load_net(ckpt / f"ff_{q}.bin"), meta["interactions"],
                           np.asarray(meta["substitutions"]["no-text"]))
            if vec is not None:
                rec.embedding, rec.text_present = vec, True
            out["posterior"][q] = ff.ff_predict(m, rec, mode)

    for q, p in out["posterior"].items():
        print(f"P({q}=yes | {pattern}) = {p:.6f}")
    for line in out.get("classifiers", []):
        print(f"  {line['factor']} = {line['p']:.6f}")
    if args.out is not None:
        args.out.write_text(json.dumps(out, indent=1))
    return 0


def _classifier_outputs(bank, evidence, x) -> list[dict]:
    """Each classifier output that enters the posterior for this evidence."""
    emb = bank.empty_text if x is None else x
    t = "T" if x is not None else "T=empty"
    rows = []
    b = evidence.get("season")
    for q in ("pneu", "inf"):
        for bv in ((b,) if b is not None else (0, 1)):
            p = float(classifier.direct_output(bank, q, bv, emb[None])[0])
            rows.append({"factor": f"P({q}=yes | season={bv}, {t})", "p": p})
    for (child, cfg), net in sorted(bank.nets.items()):
        if child in ("pneu", "inf") or child not in evidence:
            continue
        parents = ", ".join(f"{n}={v}" for n, v in zip(classifier.PARENTS[child], cfg))
        p, _ = forward(net, emb)
        rows.append({"factor": f"P({child}=yes | {parents}, {t})", "p": float(p)})
    return rows


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    out = require_out(args)
    _existing(args.data, "dataset")
    emb_path = resolve_embeddings(args.data, args.embeddings)
    table = read_embeddings(emb_path)
    train = load_external(resolve_split(args.data, "train"), table=table)
    test = load_external(resolve_split(args.data, "test", args.test), table=table)
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    elif args.seed is not None:
        seeds = [args.seed]
    else:
        seeds = list(cfg["seeds"])
    models = list(cfg["models"])
    if "BN++" in models and not _has_hidden_symptoms(train):
        raise UsageError("BN++ needs fever/pain columns (use the *_bnpp.jsonl dataset variant)")
    overrides = dict(cfg.get("overrides", {}))
    common = {k: cfg[k] for k in TRAIN_KEYS if k in cfg}
    for m in models:
        overrides[m] = {**common, **overrides.get(m, {})}
        if m.startswith("GEN"):
            overrides[m].setdefault("alpha", float(cfg["alpha"]))
    try:
        plan = ExperimentPlan(train, test, models=models, patterns=list(cfg["patterns"]), seeds=seeds,
                              overrides=overrides, workers=int(cfg["workers"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = run_experiment(plan)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.json").write_text(result.to_json())
    text = result.to_text()
    (out / "results.txt").write_text(text)
    print(text)
    failed = sorted({s for c in result.cells for s in c.failed_seeds})
    if failed:
        print(f"numerical failure in seeds {failed}", file=sys.stderr)
        return 2
    return 0


def cmd_report(args) -> int:
    path = args.data / "results.json" if args.data.is_dir() else args.data
    _existing(path, "result table")
    try:
        table = ResultTable.from_json(path.read_text())
    except (json.JSONDecodeError, TypeError) as exc:
        raise UsageError(f"{path}: not a result table ({exc})") from None
    text = table.to_text()
    print(text)
    if args.out is not None:
        args.out.write_text(text)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"bntext {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"bntext {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as exc:
        print(f"bntext {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
