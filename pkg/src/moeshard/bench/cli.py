"""Command line driver: ``run``, ``sweep``, ``gen-weights`` and ``ecdf``."""

from __future__ import annotations

import argparse
import sys

from ..errors import MoEShardError
from .config import ENGINES, MODES, ROUTERS, SCHEDULERS, load_config
from .experiment import append_rows, emit_ecdf, format_rows, run_experiment, run_sweep
from .weights import generate_weights, save_weights

# flag -> config field
_FLAGS = {
    "--batch": ("b", int),
    "--seq-len": ("s", int),
    "--hidden": ("h", int),
    "--d-ff": ("d_ff", int),
    "--experts": ("num_experts", int),
    "--devices": ("num_devices", int),
    "--layers": ("num_layers", int),
    "--router": ("router", str),
    "--alpha-r": ("alpha_r", float),
    "--k-r": ("k_r", int),
    "--engine": ("engine", str),
    "--fusion": ("fusion", str),
    "--cf": ("cf", float),
    "--compute-rate": ("compute_rate", float),
    "--link-bandwidth": ("link_bandwidth", float),
    "--launch-overhead": ("launch_overhead", float),
    "--grouped-launch-factor": ("grouped_launch_factor", float),
    "--bytes-per-element": ("bytes_per_element", int),
    "--mode": ("mode", str),
    "--scheduler": ("scheduler", str),
    "--weights": ("weights", str),
    "--output": ("output", str),
}
_CHOICES = {"--router": ROUTERS, "--engine": ENGINES, "--mode": MODES, "--scheduler": SCHEDULERS}


def _add_config_flags(p: argparse.ArgumentParser, seed_required: bool) -> None:
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--seed", type=int, required=seed_required)
    for flag, (dest, typ) in _FLAGS.items():
        p.add_argument(flag, dest=dest, type=typ, choices=_CHOICES.get(flag), default=None)


def _config_from(args, **extra):
    overrides = {dest: getattr(args, dest) for dest, _ in _FLAGS.values()}
    overrides["seed"] = args.seed
    overrides.update(extra)
    return load_config(args.config, **overrides)


def _emit(rows, output) -> None:
    if output:
        append_rows(output, rows)
    else:
        sys.stdout.write(format_rows(rows))


def cmd_run(args) -> None:
    config = _config_from(args)
    _emit([run_experiment(config).row()], config.output)


def cmd_sweep(args) -> None:
    config = _config_from(args)
    results = run_sweep(
        config,
        experts=args.sweep_experts,
        batches=args.sweep_batch,
        engines=args.engines,
        fusions=args.fusions,
    )
    _emit([r.row() for r in results], config.output)


def cmd_gen_weights(args) -> None:
    config = _config_from(args)
    if not config.output:
        raise SystemExit("gen-weights needs --output")
    w = generate_weights(config.h, config.d_ff, config.num_experts, config.num_layers, config.seed)
    save_weights(w, config.output)


def cmd_ecdf(args) -> None:
    config = _config_from(args)
    if not config.output:
        raise SystemExit("ecdf needs --output (used as the file-name prefix)")
    result = run_experiment(config)
    for path in emit_ecdf(result.metrics, config.output, args.layer or None):
        print(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moeshard", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment and write a metrics CSV row")
    _add_config_flags(p, seed_required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a grid of experiments")
    _add_config_flags(p, seed_required=True)
    p.add_argument("--sweep-experts", type=int, nargs="+")
    p.add_argument("--sweep-batch", type=int, nargs="+")
    p.add_argument("--engines", nargs="+", choices=ENGINES)
    p.add_argument("--fusions", nargs="+")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen-weights", help="write a seeded MOEW weight file")
    _add_config_flags(p, seed_required=True)
    p.set_defaults(func=cmd_gen_weights)

    p = sub.add_parser("ecdf", help="write per-expert token ECDFs for the first and last layer")
    _add_config_flags(p, seed_required=True)
    p.add_argument("--layer", type=int, action="append", help="layer index (repeatable)")
    p.set_defaults(func=cmd_ecdf)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except MoEShardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0
