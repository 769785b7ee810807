"""Command-line interface.

Verbs: ``generate`` (synthetic bilingual corpus), ``train`` (one method, one
seed), ``eval`` (a finished run on a chosen split), ``ablate`` (hyperparameter
sweeps over multiple seeds), ``gradcheck`` (float64 gradient certification),
``report`` (summarize a finished run).

Exit codes: 0 success; 1 configuration/parsing problems; 2 missing
prerequisite (e.g. a method that needs a lexicon); 3 missing artifact
(dataset or run files not found); 4 numeric failure.

Seeds resolve as ``--seed`` > ``BHASHA_SEED`` environment variable > 0.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from copy import deepcopy
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .corpus import SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .corpus import TokenizerModel, encode_instance
from .errors import (ConfigError, MissingArtifactError,
                     MissingPrerequisiteError, NumericError, ParseError, SchemaError)
from .gradcheck import run_gradient_suite
from .lexicon import Lexicon, load_lexicon
from .model import load_checkpoint, save_checkpoint
from .training import (TrainConfig, TrainedModel, evaluate_model,
                       method_flags, train_run, VALID_METHODS)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PREREQUISITE = 2
EXIT_ARTIFACT = 3
EXIT_NUMERIC = 4


# ---------------------------------------------------------------------------
# shared plumbing


def _resolve_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("BHASHA_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"BHASHA_SEED={env!r} is not an integer") from exc
    return 0


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{p}: {exc}") from exc


def _apply_overrides(cfg: dict, sets) -> dict:
    """Apply ``--set dotted.key=value`` overrides; values parse as JSON when possible."""
    for item in sets or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {part} is not a section")
        node[parts[-1]] = value
    return cfg


def _ensure_outdir(path, force: bool, markers) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    existing = [m for m in markers if (out / m).exists()]
    if existing and not force:
        raise ConfigError(
            f"{out} already holds {existing[0]}; pass --force to overwrite")
    return out


def _require(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"{what} not found: {p}")
    return p


def _pick(cfg: dict, cls) -> dict:
    """Keep only keys that are fields of a dataclass."""
    names = {f.name for f in fields(cls)}
    unknown = set(cfg) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cfg


def _load_data_dir(data_dir):
    d = Path(data_dir)
    hrl = load_dataset(_require(d / "hrl.jsonl", "high-resource dataset"))
    lrl = load_dataset(_require(d / "lrl.jsonl", "low-resource dataset"))
    lex_path = d / "lexicon.tsv"
    lex = load_lexicon(lex_path) if lex_path.exists() else None
    return hrl, lrl, lex


# ---------------------------------------------------------------------------
# verbs


def cmd_generate(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args.set)
    cfg.setdefault("seed", _resolve_seed(args))
    spec = SyntheticSpec(**_pick(cfg, SyntheticSpec))
    if "hrl_sizes" in cfg:
        spec.hrl_sizes = tuple(cfg["hrl_sizes"])
    if "lrl_sizes" in cfg:
        spec.lrl_sizes = tuple(cfg["lrl_sizes"])
    out = _ensure_outdir(args.out, args.force, ["hrl.jsonl"])
    hrl, lrl, lexicon = generate_synthetic(spec)
    save_dataset(hrl, out / "hrl.jsonl")
    save_dataset(lrl, out / "lrl.jsonl")
    Lexicon(lexicon).save(out / "lexicon.tsv")
    (out / "generation.json").write_text(
        json.dumps(asdict(spec), indent=2, sort_keys=True), encoding="utf-8")
    sizes = {s: (len(hrl.splits[s]), len(lrl.splits[s])) for s in ("train", "validation", "test")}
    print(f"wrote {out}: HRL/LRL sizes {sizes}, lexicon entries {len(lexicon)}")
    return EXIT_OK


def _train_configs(args):
    cfg = _apply_overrides(_load_config(args.config), args.set)
    enc_base = cfg.pop("model", {})
    cfg.setdefault("seed", _resolve_seed(args))
    if args.method is not None:
        cfg["method"] = args.method
    tcfg = TrainConfig(**_pick(cfg, TrainConfig))
    return tcfg, enc_base


def cmd_train(args) -> int:
    tcfg, enc_base = _train_configs(args)
    hrl, lrl, lex = _load_data_dir(args.data)
    flags = method_flags(tcfg.method)
    if flags["tet"] and lex is None:
        raise MissingPrerequisiteError(
            f"method {tcfg.method} needs {Path(args.data) / 'lexicon.tsv'}")
    out = _ensure_outdir(args.out, args.force, ["report.json"])
    model, report = train_run(enc_base, tcfg, hrl, lrl, lex)
    save_checkpoint(out / "checkpoint.json", model.cfg, model.params,
                    extra={"label_set": model.label_set,
                           "train_config": asdict(tcfg)})
    model.tokenizer.save(out / "tokenizer.txt")
    report.save(out / "report.json")
    report.save_csv(out / "epochs.csv")
    (out / "timing.json").write_text(
        json.dumps(report.timing, indent=2), encoding="utf-8")
    f1 = report.split_macro_f1.get("test")
    shown = f"{f1:.4f}" if f1 is not None else "n/a"
    print(f"method={tcfg.method} seed={tcfg.seed} best_epoch={report.best_epoch} "
          f"test_macro_f1={shown}")
    return EXIT_OK


def _load_run(run_dir, data_dir):
    run = Path(run_dir)
    cfg, params, extra = load_checkpoint(_require(run / "checkpoint.json", "checkpoint"))
    tok = TokenizerModel.load(_require(run / "tokenizer.txt", "tokenizer"))
    tcfg = TrainConfig(**extra["train_config"])
    hrl, lrl, lex = _load_data_dir(data_dir)
    for ds in (hrl, lrl):
        for inst in ds.all_instances():
            encode_instance(inst, tok, tcfg.max_len)
    model = TrainedModel(cfg, params, tok, extra["label_set"], tcfg, lex)
    return model, hrl, lrl


def cmd_eval(args) -> int:
    model, hrl, lrl = _load_run(args.run, args.data)
    split = args.split
    if split not in lrl.splits:
        raise ConfigError(f"unknown split {split!r}")
    insts = lrl.splits[split]
    if not insts:
        raise ConfigError(f"split {split!r} is empty")
    f1, per_class = evaluate_model(model, insts, hrl.splits["train"], lrl.splits["train"])
    result = {"split": split, "macro_f1": f1, "per_class_f1": per_class,
              "num_instances": len(insts), "method": model.train_cfg.method}
    out = Path(args.run) / f"eval_{split}.json"
    out.write_text(json.dumps(result, indent=2, sort_keys=True), encoding="utf-8")
    print(f"{split} macro_f1={f1:.4f} ({len(insts)} instances) -> {out}")
    return EXIT_OK


SWEEPS = {
    # name: (default values, default method, how to apply one value)
    "alpha": ([0.1, 0.2, 0.4, 0.8], "hal",
              lambda v, t, e: e.setdefault("hal", {}).update(alpha=v)),
    "hal_depth": ([1, 2, 3], "hal",
                  lambda v, t, e: e.setdefault("hal", {}).update(depth=int(v))),
    "gnn_depth": ([1, 2, 3], "getr_gat",
                  lambda v, t, e: e.setdefault("getr", {}).update(gnn_depth=int(v))),
    "edge_retention": ([1.0, 0.7, 0.5, 0.3, 0.0], "getr_gat",
                       lambda v, t, e: t.update(rho=float(v))),
    "batch_size": ([8, 16, 32], "getr_gat",
                   lambda v, t, e: t.update(batch_size=int(v))),
    # values are LRL train sizes at fixed HRL size; handled by data subsampling
    "size_ratio": ([10, 50, 100], "getr_gat", None),
}


def _subsample(instances, k: int, seed: int):
    if k > len(instances):
        raise ConfigError(f"cannot subsample {k} from {len(instances)} instances")
    rng = np.random.default_rng(seed)
    idx = sorted(rng.choice(len(instances), size=k, replace=False))
    return [instances[i] for i in idx]


def cmd_ablate(args) -> int:
    if args.sweep not in SWEEPS:
        raise ConfigError(f"unknown sweep {args.sweep!r}; choose from {sorted(SWEEPS)}")
    defaults, default_method, apply = SWEEPS[args.sweep]
    values = json.loads(args.values) if args.values else defaults
    base_cfg = _apply_overrides(_load_config(args.config), args.set)
    enc_base = base_cfg.pop("model", {})
    base_cfg.setdefault("method", args.method or default_method)
    base_seed = _resolve_seed(args)
    out = _ensure_outdir(args.out, args.force, [f"ablate_{args.sweep}.csv"])

    hrl0, lrl0, lex = _load_data_dir(args.data)
    rows = []  # (value, seed, test_macro_f1)
    for v in values:
        for s in range(args.seeds):
            seed = base_seed + s
            tdict = dict(base_cfg)
            edict = json.loads(json.dumps(enc_base))  # deep copy
            if apply is not None:
                apply(v, tdict, edict)
            tdict["seed"] = seed
            tcfg = TrainConfig(**_pick(tdict, TrainConfig))
            hrl, lrl = deepcopy(hrl0), deepcopy(lrl0)
            if args.sweep == "size_ratio":
                lrl.splits["train"] = _subsample(lrl.splits["train"], int(v), seed)
            _, report = train_run(edict, tcfg, hrl, lrl, lex)
            f1 = report.split_macro_f1["test"]
            rows.append((v, seed, f1))
            print(f"{args.sweep}={v} seed={seed} test_macro_f1={f1:.4f}")

    csv_path = out / f"ablate_{args.sweep}.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(f"{args.sweep},seed,test_macro_f1\n")
        for v, s, f1 in rows:
            fh.write(f"{v},{s},{f1!r}\n")

    md_path = out / f"ablate_{args.sweep}.md"
    with open(md_path, "w", encoding="utf-8") as fh:
        fh.write(f"| {args.sweep} | test macro-F1 (mean ± std over {args.seeds} seeds) |\n")
        fh.write("|---|---|\n")
        for v in values:
            vals = np.array([f1 for vv, _, f1 in rows if vv == v])
            fh.write(f"| {v} | {vals.mean():.4f} ± {vals.std():.4f} |\n")
    print(f"wrote {csv_path} and {md_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    res = run_gradient_suite(tolerance=args.tolerance,
                             configs_per_kind=args.configs,
                             base_seed=_resolve_seed(args))
    width = max(len(k) for k in res["kinds"])
    for kind, err in sorted(res["kinds"].items()):
        status = "ok" if err <= res["tolerance"] else "FAIL"
        print(f"{kind:<{width}}  max_rel_err={err:.3e}  {status}")
    print(f"worst={res['worst']:.3e} tolerance={res['tolerance']:.1e} "
          f"configs_per_kind={res['configs_per_kind']}")
    if not res["passed"]:
        raise NumericError("gradient certification failed")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    path = _require(run / "report.json", "run report")
    rep = json.loads(path.read_text(encoding="utf-8"))
    print(f"method: {rep['method']}   seed: {rep['seed']}")
    print(f"parameters: {rep['parameter_count']:,}")
    print(f"epochs trained: {len(rep['epochs'])}   best epoch: {rep['best_epoch']} "
          f"(val loss {rep['best_val_loss']:.4f})")
    for split, f1 in rep["split_macro_f1"].items():
        print(f"{split} macro-F1: {f1:.4f}")
        for cls, v in rep["per_class_f1"].get(split, {}).items():
            print(f"  {cls}: {v:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bhasha",
                                 description="Cross-lingual transfer experiments at desk scale")
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted config override, value parsed as JSON")
        p.add_argument("--seed", type=int, default=None,
                       help="seed (default: BHASHA_SEED env var, then 0)")
        if out:
            p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("generate", help="write a synthetic bilingual corpus")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one method on a generated corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=VALID_METHODS, default=None)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a finished run")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one hyperparameter over seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sweep", required=True, choices=sorted(SWEEPS))
    p.add_argument("--values", help="JSON list overriding the default sweep values")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--method", choices=VALID_METHODS, default=None)
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="float64 finite-difference gradient certification")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--configs", type=int, default=20, help="configurations per op kind")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="summarize a finished run")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PREREQUISITE
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
