"""Command-line entry point.

Exit codes: 0 ok, 1 verification failure, 2 config error, 3 runtime abort.
Every command is a thin wrapper over library calls in :mod:`inner_imaging.run`
and :mod:`inner_imaging.verification`.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from . import data_io, run, verification
from .config import ExperimentConfig, apply_overrides, describe, load_config
from .gfilters import ConfigError
from .tensor import NonFiniteError
from .training import TrainingAborted

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3

_RUNTIME_ERRORS = (TrainingAborted, NonFiniteError, data_io.DataError, data_io.CheckpointError, OSError)


def _pairs(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _flag_overrides(args) -> dict[str, str]:
    pairs = {}
    for key in ("preset", "attention", "seed", "epochs", "out_dir"):
        value = getattr(args, key, None)
        if value is not None:
            pairs[key] = str(value)
    pairs.update(_pairs(args.set or []))
    return pairs


def _checked(cfg: ExperimentConfig) -> ExperimentConfig:
    # building the descriptors surfaces every config-level error before any work starts
    try:
        cfg.descriptor().validate()
        cfg.train_config()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def config_from_args(args) -> ExperimentConfig:
    return _checked(load_config(args.config, _flag_overrides(args)))


def _emit(record: dict) -> None:
    print(json.dumps(record), flush=True)


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    trainer = run.train(cfg, until=args.until)
    _emit(trainer.history[-1] if trainer.history else {})
    return EXIT_OK


def cmd_resume(args) -> int:
    bundle = data_io.load_checkpoint(args.checkpoint)
    stored = bundle["extra"].get("config")
    base = replace(ExperimentConfig(), **stored) if stored else ExperimentConfig()
    if args.config:
        base = load_config(args.config)
    cfg = _checked(apply_overrides(base, _flag_overrides(args)))
    trainer = run.resume(cfg, args.checkpoint, until=args.until)
    _emit(trainer.history[-1] if trainer.history else {"epoch": trainer.epoch})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = config_from_args(args)
    _emit(run.evaluate_checkpoint(cfg, args.checkpoint))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verification.run_suites(args.scope)
    failed = [r for r in results if not r.passed]
    for r in results:
        _emit(r.to_dict())
    for r in failed:
        print(f"FAILED {r.name}: max_err={r.max_err:.3e} tolerance={r.tolerance:.1e}", file=sys.stderr)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed", file=sys.stderr)
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_inspect_groups(args) -> int:
    report = verification.inspect_groups(args.preset, args.rows, args.cols, args.fold)
    if report["discarded"]:
        print(
            f"warning: {args.preset} on a {args.rows}x{args.cols} map discards {', '.join(report['discarded'])}",
            file=sys.stderr,
        )
    if args.json:
        _emit(report)
        return EXIT_OK
    for entry in report["specs"]:
        print(f"[{entry['spec']}]")
        for cell in entry["cells"]:
            print(f"  {tuple(cell['cell'])}: {cell['channels']}")
    print("overlap histogram (groups joined: channels):")
    for joined, n in report["overlap_histogram"].items():
        print(f"  {joined}: {n}")
    return EXIT_OK


def cmd_config(args) -> int:
    for key, default, doc in describe():
        print(f"{key} = {default}    # {doc}")
    return EXIT_OK


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", help="G-filter preset, e.g. square-3 or mix-5-d")
    p.add_argument("--attention", choices=("none", "se", "ini"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inner-imaging", description="Inner-imaging channel attention toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from scratch")
    _add_config_flags(p)
    p.add_argument("--until", type=int, help="stop after this many epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("resume", help="continue training from a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--until", type=int)
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run verification suites")
    p.add_argument("--scope", choices=("grad", "groups", "theory", "all"), default="all")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("inspect-groups", help="dump channel groups of a preset on a map")
    p.add_argument("--preset", required=True)
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--fold", choices=verification.FOLD_KINDS, default="row_major")
    p.add_argument("--json", action="store_true", help="print one JSON record instead of text")
    p.set_defaults(func=cmd_inspect_groups)

    p = sub.add_parser("config", help="list config keys with defaults")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _RUNTIME_ERRORS as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
