"""``radioloc`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 computational failure, 2 usage error.  Flags may
also come from a JSON ``--config`` file (keys are the flag names with
dashes or underscores); flags given on the command line win.  When
``--out`` is omitted, ``$RADIOLOC_OUT/<subcommand>`` is used if that
variable is set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__

OUT_ENV = "RADIOLOC_OUT"


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).replace(",", " ").split()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected numbers, got {text!r}") from e


def _names(text: str) -> list[str]:
    return [v for v in str(text).replace(",", " ").split() if v]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<subcommand>)")
    common.add_argument("--config", help="JSON file with default flag values")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="worker processes (1 = fully serial)")

    p = argparse.ArgumentParser(prog="radioloc", description="Radio-map localization benchmark pipeline.")
    p.add_argument("--version", action="version", version=f"radioloc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", parents=[common], help="generate city maps, BS pools, UEs and deployments")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--maps", type=int, default=14)
    g.add_argument("--preset", choices=("desk", "full"), default="desk",
                   help="desk: 64 px at 4 m; full: 256 px at 1 m")

    s = sub.add_parser("simulate", parents=[common], help="dominant-path radio maps for every BS")
    s.add_argument("--scenes", required=True)
    s.add_argument("--cars", choices=("on", "off"), default="off")

    m = sub.add_parser("make-dataset", parents=[common], help="localization instances from scenes and simulations")
    m.add_argument("--scenes", required=True)
    m.add_argument("--sim", required=True, help="cars=off simulation (estimated maps)")
    m.add_argument("--sim-cars", required=True, help="cars=on simulation")
    m.add_argument("--kind", choices=("rss", "toa"), default="rss")
    m.add_argument("--scenario", choices=("Nominal", "Robustness", "OOD-DPM", "OOD-DPM-cars"), default="Nominal")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--noise-db", type=float, default=0.0)
    m.add_argument("--noise-sigma", type=float, default=0.0, help="ToA range noise, m")
    m.add_argument("--excess-delay", action="store_true", help="ToA: add wall-penetration delay on NLOS links")

    t = sub.add_parser("train", parents=[common], help="train LocUNet")
    t.add_argument("--dataset", required=True)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--lr-drop-epoch", type=int, default=30)
    t.add_argument("--lr-drop-factor", type=float, default=10.0)
    t.add_argument("--batch", type=int, default=15)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--loss", choices=("AED", "ASED"), default="AED")
    t.add_argument("--activation", choices=("leaky-relu", "relu", "softmax", "sigmoid"), default="softmax",
                   help="final activation before the CoM readout (leaky-relu is the published choice)")
    t.add_argument("--no-city", action="store_true")
    t.add_argument("--no-tx", action="store_true")
    t.add_argument("--width-div", type=int, default=5, help="divide the published channel widths by this")
    t.add_argument("--min-res", type=int, default=2, help="deepest encoder resolution, px")
    t.add_argument("--head-bias", type=float, default=1.0)

    e = sub.add_parser("evaluate", parents=[common], help="AED, conditional table and CDFs of localizers")
    e.add_argument("--dataset", required=True)
    e.add_argument("--methods", type=_names, default=["knn", "adaptive-knn", "centroid"])
    e.add_argument("--model", help="train output directory (for locnet)")
    e.add_argument("--split", default="test")
    e.add_argument("--k", type=int)

    c = sub.add_parser("compare", parents=[common], help="Nominal vs Robustness table and OOD matrix")
    c.add_argument("--nominal", required=True)
    c.add_argument("--robustness", required=True)
    c.add_argument("--methods", type=_names, default=["knn", "adaptive-knn"])
    c.add_argument("--model-nominal")
    c.add_argument("--model-robustness")
    c.add_argument("--split", default="test")
    c.add_argument("--k", type=int)

    b = sub.add_parser("toa-bench", parents=[common], help="ToA ranging solvers vs noise")
    b.add_argument("--scenes", required=True)
    b.add_argument("--sim", required=True, help="cars=off simulation")
    b.add_argument("--sigma", type=_floats, default=[0.0001, 10.0, 20.0])
    b.add_argument("--bias", type=_floats, default=[0.7, 20.0])
    b.add_argument("--anchors", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--split", default="test")
    b.add_argument("--limit", type=int, help="evaluate at most this many instances per sigma")
    return p


NON_FLAGS = ("out", "config", "jobs", "command")


def _load_config(path: str) -> dict:
    cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    # a stage manifest re-runs that stage with its recorded flags
    if cfg.get("format") == "radioloc-stage":
        cfg = cfg.get("flags") or {}
    return cfg


def parse(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse flags, layering: parser defaults < --config file < explicit flags."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            cfg = _load_config(known.config)
        except (OSError, ValueError) as e:
            parser.error(f"cannot read config {known.config}: {e}")
        subs = parser._subparsers._group_actions[0].choices  # noqa: SLF001
        command = next((a for a in argv if a in subs), None)
        if command is None:
            parser.error("a subcommand is required")
        sub = subs[command]
        actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
        for k, v in cfg.items():
            dest = k.replace("-", "_")
            if dest not in actions or dest in NON_FLAGS:
                parser.error(f"unknown config key {k!r} for {command}")
            actions[dest].required = False
            actions[dest].default = v
    args = parser.parse_args(argv)
    if args.out is None:
        root = os.environ.get(OUT_ENV)
        if not root:
            parser.error(f"--out is required (or set {OUT_ENV})")
        args.out = str(Path(root) / args.command)
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    return args


def flags_of(args: argparse.Namespace) -> dict:
    """Output-relevant flags, as recorded in manifests."""
    return {k: v for k, v in sorted(vars(args).items()) if k not in NON_FLAGS}


def run(args: argparse.Namespace) -> dict:
    from . import pipeline as pl

    if args.command == "gen-scenes":
        from .scenes import SceneGenConfig, desk_config

        if args.maps < 0:
            raise UsageError("--maps must be >= 0")
        cfg = desk_config(seed=args.seed, n_maps=args.maps) if args.preset == "desk" else SceneGenConfig(
            seed=args.seed, n_maps=args.maps)
        return pl.gen_scenes(cfg, args.out, flags=flags_of(args))
    if args.command == "simulate":
        return pl.simulate(args.scenes, args.cars == "on", args.out, jobs=args.jobs, flags=flags_of(args))
    if args.command == "make-dataset":
        return pl.make_dataset(args.scenes, args.sim, args.sim_cars, args.out, args.kind, args.scenario, args.seed,
                               args.noise_db, args.noise_sigma, args.excess_delay, args.jobs, flags=flags_of(args))
    if args.command == "train":
        from .locnet import InputEncoding, TrainConfig

        tc = TrainConfig(loss=args.loss, lr=args.lr, lr_drop_factor=args.lr_drop_factor,
                         lr_drop_epoch=args.lr_drop_epoch, epochs=args.epochs, batch=args.batch, seed=args.seed)
        enc = InputEncoding(not args.no_city, not args.no_tx)
        return pl.train_model(args.dataset, args.out, tc, enc, args.activation, args.width_div, args.min_res,
                              args.head_bias, flags=flags_of(args))
    if args.command == "evaluate":
        return pl.evaluate_stage(args.dataset, args.methods, args.out, args.split, args.model, args.k,
                                 flags=flags_of(args))
    if args.command == "compare":
        return pl.compare_stage(args.nominal, args.robustness, args.methods, args.out, args.split,
                                args.model_nominal, args.model_robustness, args.k, flags=flags_of(args))
    if args.command == "toa-bench":
        return pl.toa_bench_stage(args.scenes, args.sim, args.out, args.sigma, args.bias, args.anchors, args.seed,
                                  args.split, args.limit, flags=flags_of(args))
    raise UsageError(f"unknown command {args.command}")


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse(argv)
    except SystemExit as e:  # argparse usage errors exit with 2
        return int(e.code or 0)
    from .dataset import DatasetError

    try:
        run(args)
    except UsageError as e:
        print(f"radioloc: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, ArithmeticError, DatasetError) as e:
        print(f"radioloc {args.command}: failed: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
