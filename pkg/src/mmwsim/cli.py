"""Command-line front end: ``mmwsim <subcommand> --seed N [options]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import estimation as est
from .experiments import (ExperimentSpec, run_bf_analysis, run_channel_stats,
                          run_estimation, run_netsim)

SUBCOMMANDS = {
    "channel-stats": run_channel_stats,
    "bf-analysis": run_bf_analysis,
    "netsim": run_netsim,
    "estimate": run_estimation,
}


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_seed, required=True, help="64-bit master seed")
    common.add_argument("--config", type=Path, help="parameter card (INI)")
    common.add_argument("--band", default="28ghz-nyc",
                        help="28ghz-nyc, 73ghz-nyc, rank-one-smoke or a card path")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--format", action="append", choices=("csv", "txt"), dest="formats",
                        help="output format; repeat for both (default: both)")
    common.add_argument("--samples", type=_positive, help="links / locations / samples")
    common.add_argument("--ue-array", help="UE array as HxV, e.g. 4x4")
    common.add_argument("--bs-array", help="BS array as HxV, e.g. 8x8")

    p = argparse.ArgumentParser(prog="mmwsim", description=__doc__)
    sub = p.add_subparsers(dest="subcommand", required=True)
    sub.add_parser("channel-stats", parents=[common],
                   help="empirical-vs-model grids of the channel laws")
    sub.add_parser("bf-analysis", parents=[common],
                   help="long-term beamforming gain and spatial energy statistics")
    ns = sub.add_parser("netsim", parents=[common], help="multi-cell SINR and rate simulation")
    ns.add_argument("--drops", type=_positive, default=20)
    ns.add_argument("--area", type=float, help="square side of the site layout, metres")
    ns.add_argument("--d-shift", type=float, help="outage onset shift, metres")
    ns.add_argument("--no-los", action="store_true", help="force every link non-LOS")
    ns.add_argument("--table3", action="store_true", help="run the seven rate-table configurations")
    ns.add_argument("--workers", type=_positive, default=1, help="worker processes for drops")
    es = sub.add_parser("estimate", parents=[common], help="fit a parameter card from data")
    es.add_argument("--self-test", action="store_true",
                    help="draw synthetic data from --band, fit and compare")
    es.add_argument("--path-loss", type=Path, help="CSV of distance_m, pl_db, state")
    es.add_argument("--maps", type=Path, nargs="+", default=(), help="power-map CSVs")
    return p


def spec_from_args(ns: argparse.Namespace) -> ExperimentSpec:
    return ExperimentSpec(
        subcommand=ns.subcommand, seed=ns.seed, out_dir=ns.out, config=ns.config,
        band=ns.band, n_drops=getattr(ns, "drops", 20), n_samples=ns.samples,
        ue_array=ns.ue_array, bs_array=ns.bs_array, d_shift=getattr(ns, "d_shift", None),
        no_los=getattr(ns, "no_los", False), area=getattr(ns, "area", None),
        table3=getattr(ns, "table3", False), self_test=getattr(ns, "self_test", False),
        formats=tuple(ns.formats or ("csv", "txt")), workers=getattr(ns, "workers", 1),
        path_loss_csv=getattr(ns, "path_loss", None), map_csvs=tuple(getattr(ns, "maps", ())))


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        spec = spec_from_args(ns)
        result = SUBCOMMANDS[spec.subcommand](spec)
    except est.CSVFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if spec.subcommand == "netsim" and spec.table3:
        print(result["table"], end="")
    elif spec.subcommand == "estimate":
        if spec.self_test:
            for r in result["rows"]:
                print(f"{'PASS' if r.ok else 'FAIL'} {r.parameter}: truth {r.truth:.6g} "
                      f"fitted {r.fitted:.6g} tol {r.tolerance:g}")
            if not result["ok"]:
                print("self-test FAILED", file=sys.stderr)
                return 3
        print(f"fitted card written to {spec.out_dir / 'fitted_card.txt'}")
    else:
        for k, v in result.items():
            print(f"{k}: {v:.6g}" if isinstance(v, float) else f"{k}: {v}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
