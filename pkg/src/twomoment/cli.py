"""Command-line interface: benchmark runs, studies, and verification scans.

Exit code 0 means every internal assertion of the invoked command held.
The output directory can be overridden with the TWOMOMENT_OUTDIR variable.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import bound_scan, lipschitz_scan, wavespeed_scan_1d, wavespeed_scan_3d
from .closure import APPROXIMATE, EXACT
from .harness import (
    OUTDIR_ENV,
    ProblemSpec,
    convergence_study,
    problem_from_config,
    run,
    solver_bench,
    write_csv,
)


def _scan_outdir(args) -> Path:
    root = os.environ.get(OUTDIR_ENV, "")
    out = Path(root) / args.output if root else Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_run(args) -> int:
    spec = problem_from_config(args.config)
    summary = run(spec)
    for k in sorted(summary):
        print(f"{k} = {summary[k]}")
    ok = summary.get("safeguard_count", 0) == 0
    return 0 if ok else 1


def _cmd_convergence(args) -> int:
    spec = problem_from_config(args.config)
    n_list = [int(n) for n in args.resolutions.split(",")]
    res = convergence_study(spec.name, n_list, spec.degree, spec=spec,
                            reference_n=args.reference_n)
    print(f"errors = {res['errors']}")
    print(f"fitted_order = {res['fitted_order']:.3f}")
    expected = spec.degree + 1
    return 0 if abs(res["fitted_order"] - expected) < 1.0 else 1


def _cmd_solver_bench(args) -> int:
    spec = problem_from_config(args.config) if args.config else ProblemSpec(
        name="solver_bench", output=args.output
    )
    res = solver_bench(spec)
    print(f"total_failures_v_le_0.6 = {res['total_failures_v_le_0.6']}")
    print(f"picard_iterates_realizable = {res['picard_iterates_realizable']}")
    return 0 if res["total_failures_v_le_0.6"] == 0 and res["picard_iterates_realizable"] else 1


def _cmd_scan_wavespeed(args) -> int:
    out = _scan_outdir(args)
    v = np.linspace(0.0, 1.0, args.grid)
    h = np.linspace(0.0, 1.0, args.grid)
    lam = wavespeed_scan_1d(v, h)
    rows = [(vv, hh, lam[i, j]) for i, vv in enumerate(v) for j, hh in enumerate(h)]
    write_csv(out / "wavespeed.csv", "wavespeed", rows)
    v3 = np.linspace(0.05, 0.6, 12)
    lam3 = wavespeed_scan_3d(v3, args.samples, rng=args.seed)
    write_csv(out / "wavespeed3d.csv", "wavespeed3d",
              [(vv, ll, args.samples) for vv, ll in zip(v3, lam3)])
    ok = bool(lam.max() <= 1.0 + 1e-12)
    growth_ok = bool(np.all(lam3 <= 1.0 + 0.8 * v3**2))
    print(f"lambda_max_1d = {lam.max()!r} (bound 1+1e-12: {'ok' if ok else 'VIOLATED'})")
    print(f"lambda_max_3d(v) quadratic growth bound: {'ok' if growth_ok else 'VIOLATED'}")
    return 0 if ok and growth_ok else 1


def _cmd_scan_bounds(args) -> int:
    out = _scan_outdir(args)
    h = np.linspace(1e-6, 1.0, args.grid)
    rows = []
    ok = True
    for name, spec in (("exact", EXACT), ("approximate", APPROXIMATE)):
        res = bound_scan(h, spec)
        ok = ok and res["all"]
        for i in range(h.size):
            rows.append(
                (name, h[i], res["psi"][i], res["psi_prime"][i], res["phi1"][i],
                 res["phi2"][i], res["g"][i])
            )
        print(f"{name}: bounds (a)-(f) {'hold' if res['all'] else 'VIOLATED'}")
    write_csv(out / "bounds.csv", "bounds", rows)
    return 0 if ok else 1


def _cmd_lipschitz(args) -> int:
    out = _scan_outdir(args)
    rd, ri = lipschitz_scan(args.samples, rng=args.seed)
    write_csv(out / "lipschitz.csv", "lipschitz", [(args.samples, rd, ri)])
    ok = rd <= 1.0 + 1e-6 and ri <= 1.0 + 1e-6
    print(f"ratio_dD = {rd!r}, ratio_dI = {ri!r} ({'ok' if ok else 'VIOLATED'})")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="twomoment", description="two-moment radiation-transport benchmarks"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one benchmark from a config file")
    p.add_argument("config")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("convergence", help="resolution sweep with order fit")
    p.add_argument("config")
    p.add_argument("--resolutions", default="16,32,64,128")
    p.add_argument("--reference-n", type=int, default=2048)
    p.set_defaults(fn=_cmd_convergence)

    p = sub.add_parser("solver-bench", help="fixed-point solver iteration study")
    p.add_argument("config", nargs="?", default=None)
    p.add_argument("--output", default="out/solver_bench")
    p.set_defaults(fn=_cmd_solver_bench)

    p = sub.add_parser("scan-wavespeed", help="flux-Jacobian wave-speed scans")
    p.add_argument("--grid", type=int, default=101)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default="out/scans")
    p.set_defaults(fn=_cmd_scan_wavespeed)

    p = sub.add_parser("scan-bounds", help="closure bound verification scan")
    p.add_argument("--grid", type=int, default=10000)
    p.add_argument("--output", default="out/scans")
    p.set_defaults(fn=_cmd_scan_bounds)

    p = sub.add_parser("lipschitz-scan", help="closure Lipschitz-bound scan")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default="out/scans")
    p.set_defaults(fn=_cmd_lipschitz)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
