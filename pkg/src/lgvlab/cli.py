"""Command-line front end.

    lgvlab train    [--config run.json] [--set training.lr=0.05 ...]
    lgvlab collect  ...
    lgvlab attack   [--split test]
    lgvlab geometry {hessian,rays,interpolate,disk,pca}
    lgvlab sweep    {lr,epochs,weights_per_epoch,iterations,sigma,gamma,C} --values 0,0.025,0.05

Relative output directories are resolved against $LGVLAB_OUTPUT_ROOT (default:
the working directory). Exit codes: 0 success, 2 config error, 3 numeric
divergence, 4 IO error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .attack import AttackError
from .config import SWEEP_PARAMS, ConfigError, config_hash, load_config, parse_value
from .data import InsufficientExamples
from .model import InvalidArgument
from .pipeline import PROBES, Pipeline, aggregate_sweep, run_sweep, write_csv
from .training import TrainingDiverged

log = logging.getLogger("lgvlab")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def _write_config(pipe: Pipeline) -> None:
    pipe.out.mkdir(parents=True, exist_ok=True)
    body = dict(pipe.cfg, config_hash=pipe.hash)
    (pipe.out / "config.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def cmd_train(cfg: dict) -> list:
    pipe = Pipeline(cfg, persist=True)
    _write_config(pipe)
    pipe.targets()
    for seed in cfg["seeds"]:
        pipe.base(seed)
        if pipe.needs_independent():
            pipe.independent(seed)
    return sorted((pipe.out / "weights").glob("*.lgvw"))


def cmd_collect(cfg: dict) -> list:
    pipe = Pipeline(cfg, persist=True, require={"train"})
    _write_config(pipe)
    for seed in cfg["seeds"]:
        pipe.lgv(seed)
        if pipe.needs_independent():
            pipe.lgv_independent(seed)
    return sorted((pipe.out / "lgv").glob("*.lgvw"))


def cmd_attack(cfg: dict, split: str = "test") -> list:
    pipe = Pipeline(cfg, require={"train", "collect"})
    report = pipe.transfer(split=split)
    out = pipe.out / "reports"
    out.mkdir(parents=True, exist_ok=True)
    head = pipe.header()
    paths = [out / "transfer.csv", out / "transfer_aggregate.csv", out / "transfer.json"]
    paths[0].write_text(head + "\n" + report.to_csv())
    paths[1].write_text(head + "\n" + report.aggregate_csv())
    paths[2].write_text(report.to_json(config_hash=pipe.hash, seeds=cfg["seeds"], split=split))
    return paths


def cmd_geometry(cfg: dict, probe: str) -> list:
    fields, fn = PROBES[probe]
    quadratic = probe == "hessian" and cfg["geometry"]["quadratic"] is not None
    pipe = Pipeline(cfg, require=() if quadratic else {"train", "collect"})
    rows = []
    for seed in cfg["seeds"]:
        rows.extend(fn(pipe, seed))
    return [write_csv(pipe.out / "geometry" / f"{probe}.csv", fields, rows, pipe.header())]


def cmd_sweep(cfg: dict, param: str, values: list, split: str = "val") -> list:
    if not values:
        raise ConfigError("sweep: --values must list at least one value")
    pipe = Pipeline(cfg)
    rows = run_sweep(cfg, param, values, split)
    head = pipe.header() + f" sweep={param} split={split}"
    out = pipe.out / "sweeps"
    return [write_csv(out / f"sweep_{param}.csv", ("value", "target", "seed", "success_rate", "n"),
                      rows, head),
            write_csv(out / f"sweep_{param}_aggregate.csv", ("value", "target", "mean", "sd"),
                      aggregate_sweep(rows), head)]


def _parse_values(text: str) -> list:
    return [parse_value(v.strip()) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults: standard blob benchmark)")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted-path override, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="lgvlab", description="LGV transfer-attack lab")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train surrogate DNNs and targets")
    sub.add_parser("collect", parents=[common], help="collect LGV weights from trained DNNs")
    p = sub.add_parser("attack", parents=[common], help="attack and score every target")
    p.add_argument("--split", choices=("test", "val"), default="test")
    p = sub.add_parser("geometry", parents=[common], help="loss-landscape probes")
    p.add_argument("probe", choices=sorted(PROBES))
    p = sub.add_parser("sweep", parents=[common], help="one pipeline per parameter value")
    p.add_argument("param", choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--split", choices=("val", "test"), default="val")
    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "show-config":
            print(json.dumps(dict(cfg, config_hash=config_hash(cfg)), indent=2, sort_keys=True))
            return EXIT_OK
        if args.command == "train":
            paths = cmd_train(cfg)
        elif args.command == "collect":
            paths = cmd_collect(cfg)
        elif args.command == "attack":
            paths = cmd_attack(cfg, args.split)
        elif args.command == "geometry":
            paths = cmd_geometry(cfg, args.probe)
        else:
            paths = cmd_sweep(cfg, args.param, _parse_values(args.values), args.split)
    except (ConfigError, InvalidArgument, InsufficientExamples) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, AttackError) as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
