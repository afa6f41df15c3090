"""Command-line entry point: ``dimlearn {init,gen,train,report,dim,mva}``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure. Errors are
reported on stderr as a single JSON object.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .dataset import Setting
from .dimengine import DimTrajectory, SimulationGrid, mc_dim
from .mva import FundingParams, mva_quadrature

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _config(args) -> ex.ExperimentConfig:
    if args.config:
        cfg = ex.ExperimentConfig.load(args.config)
        raw, base = cfg.raw, cfg.base_dir
    else:
        raw, base = ex.preset(args.preset), Path(".")
    raw = dict(raw)
    if args.setting:
        raw["setting"] = args.setting
    if args.no_spread:
        raw["with_spread"] = False
    if args.portfolio:
        raw["portfolio"] = args.portfolio
    if args.simm:
        raw["simm"] = args.simm
    grid = dict(raw["grid"])
    if args.n_times:
        grid["n_times"] = args.n_times
    if args.t_final:
        grid["t_final"] = args.t_final
    raw["grid"] = grid
    sizes = dict(raw["sizes"])
    for key in ("k_train", "k_val", "m_val"):
        if getattr(args, key) is not None:
            sizes[key] = getattr(args, key)
    raw["sizes"] = sizes
    seeds = dict(raw["seeds"])
    if args.seed is not None:
        seeds = {k: args.seed + i for i, k in enumerate(sorted(seeds))}
    raw["seeds"] = seeds
    train = dict(raw["train"])
    if args.max_steps is not None:
        train["max_steps"] = args.max_steps
    if args.max_epochs is not None:
        train["max_epochs"] = args.max_epochs
    if args.precision:
        train["precision"] = args.precision
    raw["train"] = train
    for key in ("trials", "workers", "ladder_min", "t_gamma"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    if args.out:
        raw["output_dir"] = str(Path(args.out).resolve())
    return ex.ExperimentConfig(raw, base)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--preset", choices=("full", "desk"), default="desk",
                   help="defaults when no config file is given (default: desk)")
    p.add_argument("--setting", choices=("vasicek", "hull-white"))
    p.add_argument("--no-spread", action="store_true", help="state has no strike spread input")
    p.add_argument("--portfolio", help="'single', 'six' or a portfolio JSON file")
    p.add_argument("--simm", help="SIMM parameter JSON")
    p.add_argument("--n-times", type=int)
    p.add_argument("--t-final", type=float)
    p.add_argument("--k-train", type=int)
    p.add_argument("--k-val", type=int)
    p.add_argument("--m-val", type=int)
    p.add_argument("--ladder-min", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--precision", choices=("float64", "float32"))
    p.add_argument("--t-gamma", type=float)
    p.add_argument("--seed", type=int, help="base seed; derives all stream seeds")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dimlearn", description="Learn DIM profiles from noisy MC labels")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write a config file from a preset")
    p.add_argument("path")
    p.add_argument("--preset", choices=("full", "desk"), default="desk")

    p = sub.add_parser("gen", help="generate training and validation sets")
    _add_common(p)

    p = sub.add_parser("train", help="train networks over the dataset-size ladder")
    _add_common(p)
    p.add_argument("--train-set", required=True)
    p.add_argument("--val-set", required=True)

    p = sub.add_parser("report", help="validation metrics, MVA errors and stress grid")
    _add_common(p)
    p.add_argument("--val-set", required=True)
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--stress-paths", type=int)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("dim", help="one-off MC DIM profile for a single market state")
    _add_common(p)
    p.add_argument("--state", required=True, help="comma-separated state values in setting order")
    p.add_argument("--paths", type=int, default=2 ** 14)
    p.add_argument("--csv", required=True, help="output t,dim,stderr CSV")

    p = sub.add_parser("mva", help="MVA of a DIM CSV")
    p.add_argument("--dim", required=True, help="t,dim,stderr CSV on a uniform grid")
    p.add_argument("--recovery", type=float, default=0.4)
    p.add_argument("--lambda-b", type=float, default=1.67e-2)
    p.add_argument("--lambda-c", type=float, default=0.0)
    p.add_argument("--im-spread", type=float, default=0.0)
    return parser


def _grid_from_times(times) -> SimulationGrid:
    times = np.asarray(times, dtype=float)
    grid = SimulationGrid(len(times), float(times[-1]))
    if not np.allclose(times, grid.times, rtol=0, atol=1e-9):
        raise ex.ConfigError("DIM times must be i*T/N for i = 1..N")
    return grid


def _run(args) -> dict:
    if args.command == "init":
        Path(args.path).write_text(json.dumps(ex.preset(args.preset), indent=2) + "\n")
        return {"config": args.path}
    if args.command == "mva":
        if not Path(args.dim).exists():
            raise ex.ConfigError(f"DIM file {args.dim} does not exist")
        traj = DimTrajectory.from_csv(args.dim)
        p = FundingParams(args.recovery, args.lambda_b, args.lambda_c, args.im_spread)
        return {"mva": mva_quadrature(traj.values, _grid_from_times(traj.times), p)}

    cfg = _config(args)
    if args.command == "gen":
        return ex.run_gen(cfg)
    if args.command == "train":
        for f in (args.train_set, args.val_set):
            if not Path(f).exists():
                raise ex.ConfigError(f"dataset file {f} does not exist")
        return ex.run_train(cfg, args.train_set, args.val_set)
    if args.command == "report":
        for f in [args.val_set, *args.models]:
            if not Path(f).exists():
                raise ex.ConfigError(f"file {f} does not exist")
        return ex.run_report(cfg, args.models, args.val_set, stress_paths=args.stress_paths,
                             figures=not args.no_figures)
    if args.command == "dim":
        try:
            state = np.array([float(v) for v in args.state.split(",")])
        except ValueError as exc:
            raise ex.ConfigError(f"bad --state: {exc}") from exc
        setting: Setting = cfg.setting
        if len(state) != len(setting.names):
            raise ex.ConfigError(f"state needs {len(setting.names)} values {setting.names}")
        model, pf = setting.portfolio(state, cfg.templates)
        traj = mc_dim(model, pf, cfg.grid, args.paths, cfg.seeds["val"], simm=cfg.simm,
                      workers=cfg.workers)
        traj.to_csv(args.csv)
        return {"csv": args.csv, "peak_dim": float(traj.values.max()),
                "max_stderr": float(traj.stderr.max())}
    raise ex.ConfigError(f"unknown command {args.command}")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _run(args)
    except ex.ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(json.dumps({"error": "runtime", "type": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(_jsonable(result), indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
