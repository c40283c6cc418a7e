"""Command-line interface: generate | train | eval | cv | inspect.

Options resolve as defaults < --config JSON file < explicit flags; unknown
config keys are rejected and every run writes its resolved options next to
its outputs.  Failures exit nonzero with one JSON error line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .data import load_dataset, save_dataset
from .metrics import bootstrap_eval
from .model import load_model, save_model
from .synthetic import SyntheticSpec, generate_synthetic, save_manifest
from .train import TrainConfig, cross_validate, fit, split_train_val, _derive_seed


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


GENERATE_OPTS = {"cases": 200, "features": 4, "baseline": 3, "profile": None,
                 "interaction": [], "noise": 0.0, "prevalence": 0.5, "seed": 0,
                 "w_fast": 1.0, "w_slow": 1.0, "w_int": 1.0}

TRAIN_OPTS = {"lr": 1e-3, "batch_size": 32, "max_epochs": 100, "patience": 10,
              "lambda_decorr": 1.0, "seed": 0, "val_fraction": 0.15,
              "d": 32, "heads": 4, "d_ff": None, "per_position_keys": False,
              "time_aware": True, "pool_positions": False}

EVAL_OPTS = {"bootstrap": 100, "seed": 0}

CV_OPTS = dict(TRAIN_OPTS, k=10, workers=1)

INSPECT_OPTS = {"per_patient": False}


def _resolve(args, schema: dict) -> dict:
    opts = dict(schema)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            filecfg = json.load(fh)
        unknown = sorted(set(filecfg) - set(schema))
        if unknown:
            raise CliError(f"unknown config key '{unknown[0]}'")
        opts.update(filecfg)
    for key in schema:
        v = getattr(args, key, None)
        if v is not None:
            opts[key] = v
    return opts


def _write_resolved(out_dir: Path, command: str, opts: dict, **paths) -> None:
    doc = {"command": command, **{k: str(v) for k, v in paths.items()}, **opts}
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_config(opts: dict) -> TrainConfig:
    return TrainConfig(
        lr=float(opts["lr"]), batch_size=int(opts["batch_size"]),
        max_epochs=int(opts["max_epochs"]), patience=int(opts["patience"]),
        lambda_decorr=float(opts["lambda_decorr"]), seed=int(opts["seed"]),
        val_fraction=float(opts["val_fraction"]), d=int(opts["d"]),
        heads=int(opts["heads"]),
        d_ff=None if opts["d_ff"] is None else int(opts["d_ff"]),
        per_position_keys=bool(opts["per_position_keys"]),
        time_aware=bool(opts["time_aware"]),
        pool_positions=bool(opts["pool_positions"]))


def cmd_generate(args) -> int:
    opts = _resolve(args, GENERATE_OPTS)
    out = _out_dir(args)
    profile = (None if not opts["profile"]
               else [p.strip() for p in str(opts["profile"]).split(",")])
    interaction = []
    for pair in opts["interaction"]:
        fi, _, bi = str(pair).partition(":")
        if not bi:
            raise CliError(f"bad interaction '{pair}', expected FEATURE:FLAG")
        interaction.append((int(fi), int(bi)))
    spec = SyntheticSpec(
        n_features=int(opts["features"]), n_baseline=int(opts["baseline"]),
        n_cases=int(opts["cases"]), decay_profile=profile,
        interaction=interaction, label_noise=float(opts["noise"]),
        seed=int(opts["seed"]), prevalence=float(opts["prevalence"]),
        w_fast=float(opts["w_fast"]), w_slow=float(opts["w_slow"]),
        w_int=float(opts["w_int"]))
    dataset, manifest = generate_synthetic(spec)
    save_dataset(dataset, out / "dataset.jsonl")
    save_manifest(manifest, out / "manifest.json")
    _write_resolved(out, "generate", opts, out=out)
    print(f"wrote {len(dataset)} cases "
          f"(prevalence {manifest['empirical_prevalence']:.3f}) to "
          f"{out / 'dataset.jsonl'}")
    return 0


def cmd_train(args) -> int:
    opts = _resolve(args, TRAIN_OPTS)
    out = _out_dir(args)
    dataset = load_dataset(args.data)
    config = _train_config(opts)
    train_ids, val_ids = split_train_val(
        dataset.ids(), dataset.labels(), config.val_fraction,
        _derive_seed(config.seed, 9))
    model = fit(dataset, train_ids, val_ids, config)
    save_model(model, out / "model.json")
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for entry in model.log:
            fh.write(json.dumps(entry) + "\n")
    _write_resolved(out, "train", opts, data=args.data, out=out)
    best = max((e["val_auprc"] for e in model.log), default=float("nan"))
    print(f"trained {len(model.log)} epochs, best val_auprc {best:.4f}, "
          f"model at {out / 'model.json'}")
    return 0


def cmd_eval(args) -> int:
    opts = _resolve(args, EVAL_OPTS)
    out = _out_dir(args)
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    scores, labels = model.score(dataset)
    report = bootstrap_eval(scores, labels, int(opts["bootstrap"]),
                            int(opts["seed"]))
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump({"metrics": report.to_json()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_resolved(out, "eval", opts, model=args.model, data=args.data, out=out)
    print(report.format_table())
    return 0


def cmd_cv(args) -> int:
    opts = _resolve(args, CV_OPTS)
    out = _out_dir(args)
    dataset = load_dataset(args.data)
    config = _train_config(opts)
    report = cross_validate(dataset, int(opts["k"]), config,
                            workers=int(opts["workers"]))
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump({"metrics": report.to_json()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_resolved(out, "cv", opts, data=args.data, out=out)
    print(report.format_table())
    return 0


def _parse_filters(pairs: list[str]) -> list[tuple[str, float]]:
    out = []
    for pair in pairs:
        key, sep, val = pair.partition("=")
        if not sep:
            raise CliError(f"bad filter '{pair}', expected KEY=VALUE")
        out.append((key.strip(), float(val)))
    return out


def cmd_inspect(args) -> int:
    opts = _resolve(args, INSPECT_OPTS)
    out = _out_dir(args)
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    model.check_compatible(dataset)
    selected = dataset.cases
    for key, val in _parse_filters(args.filter or []):
        if key == "label":
            selected = [c for c in selected if c.label == int(val)]
        elif key in dataset.baseline_names:
            j = dataset.baseline_names.index(key)
            selected = [c for c in selected if c.baseline[j] == val]
        else:
            raise CliError(f"unknown filter key '{key}'")
    if not selected:
        raise CliError("filter matched no cases")
    ids = [c.id for c in selected]

    with open(out / "decay_rates.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "decay_rate"])
        for name, rate in model.decay_rates().items():
            w.writerow([name, f"{rate:.10g}"])

    traces = model.trace_cases(dataset, ids)
    names = model.feature_names + ["baseline"]
    heads = np.stack([t["head_attn"] for t in traces])   # (C, M, P, P)
    for m in range(heads.shape[1]):
        grid = heads[:, m].mean(axis=0)
        with open(out / f"attention_head{m}.csv", "w", newline="",
                  encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["query\\key"] + names)
            for i, row in enumerate(grid):
                w.writerow([names[i]] + [f"{x:.10g}" for x in row])

    with open(out / "final_attention.csv", "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        if opts["per_patient"]:
            w.writerow(["id"] + names)
            for t in traces:
                w.writerow([t["id"]] + [f"{x:.10g}" for x in t["final_alpha"]])
        else:
            w.writerow(names)
            mean_alpha = np.stack([t["final_alpha"] for t in traces]).mean(axis=0)
            w.writerow([f"{x:.10g}" for x in mean_alpha])

    print(f"inspected {len(ids)} cases, tables in {out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="carelens",
                     description="Clinical risk prediction with time-damped, "
                                 "context-aware feature attention")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file of option overrides")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("generate", help="write a synthetic cohort")
    common(p)
    p.add_argument("--cases", type=int)
    p.add_argument("--features", type=int)
    p.add_argument("--baseline", type=int)
    p.add_argument("--profile", help="comma list of fast/slow tags")
    p.add_argument("--interaction", action="append",
                   help="FEATURE:FLAG planted interaction (repeatable)")
    p.add_argument("--noise", type=float, help="label flip probability")
    p.add_argument("--prevalence", type=float)
    p.add_argument("--w-fast", dest="w_fast", type=float)
    p.add_argument("--w-slow", dest="w_slow", type=float)
    p.add_argument("--w-int", dest="w_int", type=float)
    p.set_defaults(func=cmd_generate)

    def train_flags(p):
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--max-epochs", dest="max_epochs", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--lambda-decorr", dest="lambda_decorr", type=float)
        p.add_argument("--val-fraction", dest="val_fraction", type=float)
        p.add_argument("--d", type=int, help="embedding width")
        p.add_argument("--heads", type=int)
        p.add_argument("--d-ff", dest="d_ff", type=int)
        p.add_argument("--per-position-keys", dest="per_position_keys",
                       action=argparse.BooleanOptionalAction, default=None)
        p.add_argument("--time-aware", dest="time_aware",
                       action=argparse.BooleanOptionalAction, default=None)
        p.add_argument("--pool-positions", dest="pool_positions",
                       action=argparse.BooleanOptionalAction, default=None)

    p = sub.add_parser("train", help="fit a model")
    common(p)
    p.add_argument("--data", required=True)
    train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a dataset with bootstrap CIs")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bootstrap", type=int, help="bootstrap replicates")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="k-fold cross-validation")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--workers", type=int)
    train_flags(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("inspect", help="export decay rates and attention maps")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--filter", action="append",
                   help="KEY=VALUE case filter, e.g. label=1 (repeatable)")
    p.add_argument("--per-patient", dest="per_patient",
                   action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # surface anything as one parseable line
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}),
              file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())
