"""Command-line entry point.

Verbs:
    run             one simulation, ledger + summary
    study-spatial   spatial convergence study over h_list
    study-temporal  temporal convergence study over k_list
    study-balance   mass- and energy-error rate study over k_list
    reproduce-tables  regenerate the benchmark table set

Exit codes: 0 all checks of the invoked profile passed, 1 numeric failure
(solver breakdown or a balance identity violated beyond tolerance), 2
configuration error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import __version__, harness
from .errors import ConfigurationError, SolverError, StepError
from .harness import (ENERGY_RESIDUAL_TOL, MASS_RESIDUAL_TOL,
                      ExperimentConfig, parse_config, run_convergence_study,
                      run_single, summary_text)

_DESK_NOTE = ("desk profile: half domain, coarser space, k=1e-4 floor; "
              "rates remain meaningful, absolute values are not benchmark-grade")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ncnls",
        description="Finite-element solvers with discrete mass/energy "
                    "balance for the forced cubic Schrodinger equation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("-c", "--config", help="config file (key = value lines)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key")
        p.add_argument("-o", "--output-dir", help="output directory")
        p.add_argument("-q", "--quiet", action="store_true")

    common(sub.add_parser("run", help="single simulation"))
    p = sub.add_parser("study-spatial", help="spatial EOC study (h_list)")
    common(p)
    p.add_argument("--target", choices=("u", "phi"), default="u")
    p = sub.add_parser("study-temporal", help="temporal EOC study (k_list)")
    common(p)
    p.add_argument("--target", choices=("u", "phi"), default="u")
    p = sub.add_parser("study-balance",
                       help="mass/energy error rate study (k_list)")
    common(p)
    p = sub.add_parser("reproduce-tables",
                       help="regenerate the benchmark table set")
    common(p)
    p.add_argument("--profile", choices=("desk", "paper"), default="desk",
                   help="desk is CI-sized; paper reruns the full setup")
    return parser


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config, args.overrides)
    if args.output_dir:
        cfg = replace(cfg, output_dir=args.output_dir).validate()
    return cfg


def _check_ledger(bundle) -> bool:
    """Per-row balance identity gate; returns True when all rows pass."""
    if bundle.ledger is None:
        return True
    ok = True
    for row in bundle.ledger.rows:
        if abs(row.mass_residual) > MASS_RESIDUAL_TOL * (1.0 + abs(row.mass)):
            ok = False
        if abs(row.energy_residual) > ENERGY_RESIDUAL_TOL * (1.0 + abs(row.e_total)):
            ok = False
    return ok


def _emit(bundle, quiet: bool) -> int:
    if not quiet:
        sys.stdout.write(summary_text(bundle))
    if bundle.failed or not _check_ledger(bundle):
        sys.stderr.write("numeric failure: balance identities or solver "
                         "tolerance violated\n")
        return 1
    return 0


def _reproduce_tables(args) -> int:
    cfg = _load_config(args) if args.config else \
        parse_config(None, args.overrides)
    if args.output_dir:
        cfg = replace(cfg, output_dir=args.output_dir)
    desk = args.profile == "desk"
    if desk and not args.quiet:
        print(_DESK_NOTE)
    status = 0

    if desk:
        base = replace(cfg, a=-15.0, b=15.0, T=1.0, scenario="r5", k=1e-4)
        spatial_lists = {1: (0.3, 0.15, 0.075), 2: (0.3, 0.15, 0.075)}
        temporal = replace(cfg, a=-15.0, b=15.0, T=1.0, scenario="r2",
                           M=1500, ell=3)
        klist = (2e-2, 1e-2, 5e-3)
        balance = replace(cfg, a=-15.0, b=15.0, T=6.0, M=600, ell=2, k=1e-2)
        rate_klist = (4e-2, 2e-2, 1e-2)
        rate_cfg = replace(cfg, a=-15.0, b=15.0, T=6.0, M=1500, ell=3)
    else:
        base = replace(cfg, T=1.0, scenario="r5", k=1e-5)
        spatial_lists = {1: (0.6, 0.3, 0.15, 0.12, 0.075, 0.06, 0.04, 0.03),
                         2: (0.6, 0.3, 0.15, 0.12, 0.075, 0.06, 0.04, 0.03)}
        temporal = replace(cfg, T=1.0, scenario="r2", M=6000, ell=5)
        klist = (2e-2, 1e-2, 5e-3, 4e-3, 2e-3, 1e-3)
        balance = replace(cfg, T=6.0, M=6000, ell=3, k=1e-3)
        rate_klist = (4e-2, 2e-2, 1e-2, 5e-3, 2.5e-3, 1.25e-3)
        rate_cfg = replace(cfg, T=6.0, M=6000, ell=5)

    for ell, hs in spatial_lists.items():
        for scheme in ("relaxation", "dfp"):
            c = replace(base, scheme=scheme, ell=ell, h_list=hs,
                        run_id=f"spatial_{scheme}_l{ell}").validate()
            status |= _emit(run_convergence_study(c, "u"), args.quiet)

    for scheme in ("relaxation", "dfp"):
        c = replace(temporal, scheme=scheme, k_list=klist,
                    run_id=f"temporal_{scheme}").validate()
        status |= _emit(run_convergence_study(c, "u"), args.quiet)
    c = replace(temporal, scheme="relaxation", k_list=klist,
                run_id="temporal_relaxation_phi").validate()
    status |= _emit(run_convergence_study(c, "phi"), args.quiet)

    timings = {}
    for scheme in ("relaxation", "dfp"):
        for scenario in ("r1", "r2", "r3", "r4", "r5", "r6"):
            c = replace(balance, scheme=scheme, scenario=scenario,
                        run_id=f"balance_{scheme}_{scenario}").validate()
            bundle = run_single(c)
            timings[(scheme, scenario)] = bundle.wall_time
            status |= _emit(bundle, args.quiet)

    for scenario in ("r5", "r6"):
        for target in ("mass", "energy"):
            c = replace(rate_cfg, scheme="relaxation", scenario=scenario,
                        k_list=rate_klist,
                        run_id=f"rates_{scenario}_{target}").validate()
            status |= _emit(run_convergence_study(c, target), args.quiet)

    if not args.quiet and timings:
        rel = sum(t for (s, _), t in timings.items() if s == "relaxation")
        imp = sum(t for (s, _), t in timings.items() if s == "dfp")
        if rel > 0:
            print(f"balance-table wall time: relaxation {rel:.1f}s, "
                  f"implicit {imp:.1f}s, ratio {imp / rel:.2f} "
                  "(informational)")
    return status


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.verb == "run":
            bundle = run_single(_load_config(args))
            return _emit(bundle, args.quiet)
        if args.verb == "study-spatial":
            cfg = _load_config(args)
            if not cfg.h_list:
                raise ConfigurationError("study-spatial needs h_list")
            return _emit(run_convergence_study(cfg, args.target), args.quiet)
        if args.verb == "study-temporal":
            cfg = _load_config(args)
            if not cfg.k_list:
                raise ConfigurationError("study-temporal needs k_list")
            return _emit(run_convergence_study(cfg, args.target), args.quiet)
        if args.verb == "study-balance":
            cfg = _load_config(args)
            if not cfg.k_list:
                raise ConfigurationError("study-balance needs k_list")
            status = _emit(run_convergence_study(
                replace(cfg, run_id=cfg.run_id + "_mass"), "mass"), args.quiet)
            status |= _emit(run_convergence_study(
                replace(cfg, run_id=cfg.run_id + "_energy"), "energy"),
                args.quiet)
            return status
        if args.verb == "reproduce-tables":
            return _reproduce_tables(args)
        raise ConfigurationError(f"unknown verb {args.verb!r}")
    except ConfigurationError as exc:
        sys.stderr.write(f"configuration error: {exc}\n")
        return 2
    except (SolverError, StepError) as exc:
        sys.stderr.write(f"numeric failure: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
