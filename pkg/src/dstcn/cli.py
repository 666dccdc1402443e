"""Command-line front end.

Subcommands: synth (generate a dataset), train (fit on every recording of a
dataset), eval (score a checkpoint), protocol (leave-one-subject-out runs),
selfcheck (built-in verification). Every run writes a run manifest (config
hash, seeds, versions) into the output directory before any artifact, and all
outputs stay under that directory. Exit codes: 0 success, 1 validation or
config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys

import numpy as np

from . import __version__
from . import harness
from . import model as md
from .data import ValidationError
from .selfcheck import run_selfcheck
from .synthgen import ScenarioSpec, dataset_metas, generate_dataset, load_dataset


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit2(message)


class SystemExit2(Exception):
    """Argument/config errors mapped to exit code 1."""


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _write_run_manifest(out_dir, command, config_dict, seed):
    os.makedirs(out_dir, exist_ok=True)
    blob = json.dumps(config_dict, sort_keys=True).encode("utf-8")
    manifest = {
        "command": command,
        "config": config_dict,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "seed": seed,
        "versions": {
            "dstcn": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    return path


def _train_config(args, cfg):
    fields = {
        k: cfg[k]
        for k in (
            "mode", "epochs", "batch_size", "num_layers", "num_filters", "seed",
            "micro_budget", "eta", "lam", "tau", "lr", "beta1", "beta2", "eps",
            "iou_threshold", "log_every", "early_stop_f1", "early_stop_every",
        )
        if k in cfg
    }
    for attr, key in (
        ("mode", "mode"), ("seed", "seed"), ("eta", "eta"),
        ("micro_budget", "micro_budget"), ("epochs", "epochs"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            fields[key] = value
    return harness.TrainConfig(**fields)


def _progress(verbose):
    if not verbose:
        return None

    def report(*parts):
        print("[dstcn]", *parts, file=sys.stderr)

    return lambda *parts: report(*parts)


def cmd_synth(args):
    cfg = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        cfg["seed"] = args.seed
    spec = ScenarioSpec.from_dict(cfg)
    _write_run_manifest(args.out, "synth", spec.to_dict(), spec.seed)
    manifest = generate_dataset(spec, args.out)
    print(os.path.join(args.out, "manifest.json"))
    print(f"{len(manifest['subjects'])} recordings written under {args.out}")
    return 0


def _load_dataset_arg(args, cfg):
    dataset_dir = getattr(args, "dataset", None) or cfg.get("dataset")
    if not dataset_dir:
        raise SystemExit2("no dataset given (use --dataset or a 'dataset' config key)")
    return load_dataset(dataset_dir)


def cmd_train(args):
    cfg = _load_json(args.config) if args.config else {}
    config = _train_config(args, cfg)
    recordings, manifest = _load_dataset_arg(args, cfg)
    _write_run_manifest(args.out, "train", config.to_dict(), config.seed)
    from .data import Fold

    ids = tuple(sorted(recordings))
    fold = Fold(test_subject="__all__", test_recordings=(), train_recordings=ids)
    trained = harness.train_fold(fold, recordings, config, progress=_progress(args.verbose))
    ckpt = os.path.join(args.out, "checkpoint.ckpt")
    harness.save_trained(ckpt, trained)
    trained.run_log.write_text(os.path.join(args.out, "train_log.jsonl"))
    print(ckpt)
    return 0


def cmd_eval(args):
    cfg = _load_json(args.config) if args.config else {}
    expected = None
    if any(k in cfg for k in ("mode", "num_layers", "num_filters")) or args.mode:
        probe = _train_config(args, cfg)
        expected = probe.model_config()
    trained = harness.load_trained(args.checkpoint, expected_config=expected)
    recordings, manifest = _load_dataset_arg(args, cfg)
    if args.out:
        _write_run_manifest(args.out, "eval", trained.config.to_dict(), trained.config.seed)
    from .data import Fold

    ids = tuple(sorted(recordings))
    fold = Fold(test_subject="__eval__", test_recordings=ids, train_recordings=())
    evaluation = harness.evaluate_fold(
        trained, fold, recordings, harness.confusers_from_manifest(manifest)
    )
    text = evaluation.report.to_text()
    print(text, end="")
    if args.out:
        with open(os.path.join(args.out, "report.txt"), "w") as f:
            f.write(text)
    return 0


def cmd_protocol(args):
    cfg = _load_json(args.config) if args.config else {}
    config = _train_config(args, cfg)
    recordings, manifest = _load_dataset_arg(args, cfg)
    _write_run_manifest(args.out, "protocol", config.to_dict(), config.seed)
    result = harness.run_protocol(
        recordings,
        manifest,
        args.protocol,
        config,
        out_dir=args.out,
        jobs=args.jobs,
        progress=_progress(args.verbose),
    )
    with open(os.path.join(args.out, "aggregate_report.txt"), "w") as f:
        f.write(result.aggregate_text())
    summary = {
        "protocol": result.protocol,
        "folds": [ev.test_subject for ev in result.fold_evaluations],
        "stage_segment_counts": result.stage_segment_counts,
        "confusers_total": result.confusers_total,
        "confusers_rejected": result.confusers_rejected,
    }
    with open(os.path.join(args.out, "protocol_summary.json"), "w") as f:
        json.dump(summary, f, sort_keys=True, indent=2)
        f.write("\n")
    print(os.path.join(args.out, "aggregate_report.txt"))
    return 0


def cmd_selfcheck(args):
    results = run_selfcheck(corrupt_gradient=args.corrupt_gradient)
    lines = [f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}" for r in results]
    for line in lines:
        print(line)
    if args.out:
        _write_run_manifest(args.out, "selfcheck", {"corrupt_gradient": args.corrupt_gradient}, 0)
        with open(os.path.join(args.out, "selfcheck_report.txt"), "w") as f:
            f.write("\n".join(lines) + "\n")
    if not all(r.passed for r in results):
        raise RuntimeError("selfcheck failed")
    return 0


def build_parser():
    parser = _Parser(prog="dstcn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train on every recording of a dataset")
    common(p)
    p.add_argument("--dataset", help="dataset directory (overrides config)")
    p.add_argument("--mode", choices=md.MODES)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--micro-budget", dest="micro_budget", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p, out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset directory (overrides config)")
    p.add_argument("--mode", choices=md.MODES)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("protocol", help="run a cross-validation protocol")
    common(p)
    p.add_argument("--dataset", help="dataset directory (overrides config)")
    p.add_argument("--protocol", choices=("lab_losocv", "home_generalization"), default="lab_losocv")
    p.add_argument("--mode", choices=md.MODES)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--micro-budget", dest="micro_budget", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1, help="max concurrent folds")
    p.set_defaults(fn=cmd_protocol)

    p = sub.add_parser("selfcheck", help="run the built-in verification suite")
    p.add_argument("--out", help="optional output directory for the report")
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_selfcheck, config=None, seed=None, verbose=False)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except SystemExit2 as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValidationError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
