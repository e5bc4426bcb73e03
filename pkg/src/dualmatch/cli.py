"""Command-line entry point: ``dualmatch {train,suite,eval,data}``.

Failures exit non-zero and print one JSON line ``{"error": ..., "message": ...}``
to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    ExperimentConfig,
    build_data,
    load_config,
    parse_value,
    run_experiment,
)
from .data import Dataset, load_dataset, save_dataset
from .evaluation import config_fingerprint, evaluate, pseudo_label_quality, run_suite
from .model import Checkpoint, load_checkpoint, save_checkpoint
from .trainer import ablation_variants, history_csv

log = logging.getLogger("dualmatch")


def _overrides(args) -> dict:
    out = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = parse_value(value.strip())
    if getattr(args, "dataset", None):
        out["data.path"] = args.dataset
        out["data.synthetic"] = None
    if getattr(args, "test_dataset", None):
        out["data.test_path"] = args.test_dataset
    if getattr(args, "synthetic", None):
        out["data.synthetic"] = args.synthetic
    if getattr(args, "unlabeled_includes_labeled", False):
        out["data.unlabeled_includes_labeled"] = True
    return {k: v for k, v in out.items() if v is not None or k == "data.synthetic"}


def _config(args) -> ExperimentConfig:
    return load_config(args.config, _overrides(args))


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> dict:
    exp = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = exp.train.seed if args.seed is None else args.seed
    run = run_experiment(exp, seed)
    (out / "history.csv").write_text(history_csv(run.history))
    meta = {"seed": seed, "fingerprint": config_fingerprint(exp)}
    save_checkpoint(
        Checkpoint(run.result.params, run.result.ema, run.result.state.step, meta),
        out / "checkpoint.json",
    )
    summary = {
        **meta,
        "test_error_ema": run.final_error,
        "unlabeled_error_ema": run.pl_error,
        "high_confidence_ratio": run.high_conf_ratio,
        "steps": exp.train.steps,
    }
    _write_json(out / "summary.json", summary)
    return summary


def cmd_suite(args) -> dict:
    exp = _config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    variants = ablation_variants(exp.train)
    names = [n.strip() for n in args.variants.split(",")]
    unknown = set(names) - set(variants)
    if unknown:
        raise ConfigError(f"unknown variants {sorted(unknown)}; choose from {sorted(variants)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    for name in names:
        variant = dataclasses.replace(exp, train=variants[name])
        report = run_suite(variant, seeds, name=name)
        reports[name] = report.to_dict()
        for seed, curve in report.curves.items():
            (out / f"{name}_seed{seed}.csv").write_text(history_csv(curve))
        log.info("%s: %.2f%% over %d seeds", name, report.mean, len(seeds))
    doc = {"fingerprint": config_fingerprint(exp), "seeds": seeds, "variants": reports}
    _write_json(out / "report.json", doc)
    with open(out / "report.csv", "w") as fh:
        fh.write("variant,seed,test_error_ema\n")
        for name, rep in reports.items():
            for seed, err in zip(rep["seeds"], rep["test_error_ema"]):
                fh.write(f"{name},{seed},{err!r}\n")
    return doc


def cmd_eval(args) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    params = ckpt.params if args.live or ckpt.ema is None else ckpt.ema.shadow
    data = load_dataset(args.dataset)
    labeled = data.subset(np.flatnonzero(~data.hidden))
    doc = {"model": "live" if params is ckpt.params else "ema", "n": len(labeled)}
    doc["error"] = evaluate(params, labeled)
    if args.tau is not None:
        doc["high_confidence_ratio"] = pseudo_label_quality(params, labeled, args.tau)[1]
    return doc


def cmd_data(args) -> dict:
    exp = _config(args)
    x, u, test = build_data(exp.data, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    combined = Dataset(
        np.concatenate([x.features, u.features]),
        np.concatenate([x.labels, u.labels]),
        x.num_classes,
        np.concatenate([x.hidden, u.hidden]),
    )
    save_dataset(combined, out / "train.txt")
    if test is not None:
        save_dataset(test, out / "test.txt")
    return {"train": str(out / "train.txt"), "labeled": len(x), "unlabeled": len(u)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualmatch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=None):
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--dataset", help="training data file (C d N header format)")
        p.add_argument("--test-dataset", help="test data file")
        p.add_argument("--synthetic", help="e.g. blobs:classes=3,dim=2,per_class=204,spread=0.3")
        p.add_argument("--unlabeled-includes-labeled", action="store_true")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train one seed")
    common(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("suite", help="train several seeds and variants, aggregate")
    common(p)
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--variants", default="dualmatch")
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("data", help="write the configured dataset to files")
    common(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_data)

    p = sub.add_parser("eval", help="test error of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--live", action="store_true", help="use live weights instead of the EMA model")
    p.add_argument("--tau", type=float, help="also report the high-confidence ratio at tau")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
