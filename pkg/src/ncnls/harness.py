"""Configuration-driven experiment runner.

Runs single simulations, spatial/temporal convergence studies and
balance-error studies from a flat ``key = value`` config file (an optional
``[newton]`` section or dotted ``newton.*`` keys configure the implicit
solver).  Emits a per-step ledger CSV, a convergence CSV and a plain-text
summary whose tables use 4-significant-digit scientific notation for direct
visual diffing; full-precision values are kept in the CSVs, which round-trip
losslessly.
"""

from __future__ import annotations

import os
import time
import warnings
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from . import dfp, diagnostics, fem, relaxation
from .coefficients import SCENARIO_IDS, SolitonParams, make_scenario, manufactured_solution
from .dfp import NewtonOptions
from .diagnostics import BalanceLedger, ConvergenceTable, LedgerRow, RunResult
from .errors import ConfigurationError, StepError
from .relaxation import TimeGrid

__all__ = [
    "ExperimentConfig",
    "parse_config",
    "run_single",
    "run_convergence_study",
    "emit_reports",
    "ReportBundle",
    "read_ledger_csv",
    "read_convergence_csv",
    "LEDGER_HEADER",
    "CONVERGENCE_HEADER",
]

LEDGER_HEADER = ("run_id,scheme,scenario,ell,h,k,n,t,mass,e_kinetic,"
                 "e_potential,e_total,mass_residual,energy_residual,"
                 "mass_error,energy_error,l2_error")
CONVERGENCE_HEADER = "study,target,scheme,ell,step,error,rate"

# per-row validity thresholds used by the CLI's numeric gate
MASS_RESIDUAL_TOL = 1e-11
ENERGY_RESIDUAL_TOL = 1e-10


@dataclass
class ExperimentConfig:
    """One experiment: scheme, scenario, discretization and outputs."""

    scheme: str = "relaxation"
    scenario: str = "r1"
    a: float = -30.0
    b: float = 30.0
    M: int = 6000
    ell: int = 3
    bc: str = "periodic"
    T: float = 6.0
    k: float = 1e-3
    k_list: tuple = ()
    h_list: tuple = ()
    omega: float = 0.3
    theta0: float = 2.0
    mu: float = 12.0
    init: str = "improved"
    newton: NewtonOptions = field(default_factory=NewtonOptions)
    output_dir: str = "out"
    stride: int = 1
    run_id: str = "run"

    @property
    def h(self) -> float:
        return (self.b - self.a) / self.M

    def validate(self) -> "ExperimentConfig":
        if self.scheme not in ("relaxation", "dfp"):
            raise ConfigurationError(f"unknown scheme {self.scheme!r}")
        if self.scenario not in SCENARIO_IDS:
            raise ConfigurationError(f"unknown scenario {self.scenario!r}")
        if not self.a < self.b:
            raise ConfigurationError("domain bounds must satisfy a < b")
        if self.M < 2:
            raise ConfigurationError("M must be at least 2")
        if not 1 <= self.ell <= 5:
            raise ConfigurationError("ell must be in 1..5")
        if self.bc not in ("periodic", "dirichlet"):
            raise ConfigurationError(f"unknown bc {self.bc!r}")
        if self.T <= 0:
            raise ConfigurationError("T must be positive")
        if self.k <= 0 or self.k > self.T:
            raise ConfigurationError("k must satisfy 0 < k <= T")
        for kk in self.k_list:
            if kk <= 0 or kk > self.T:
                raise ConfigurationError("k_list entries must satisfy 0 < k <= T")
        for hh in self.h_list:
            if hh <= 0 or hh > (self.b - self.a):
                raise ConfigurationError("h_list entries must fit the domain")
        if self.init not in ("naive", "improved"):
            raise ConfigurationError(f"unknown init mode {self.init!r}")
        if self.stride < 1:
            raise ConfigurationError("stride must be >= 1")
        if self.theta0 <= 0:
            raise ConfigurationError("theta0 must be positive")
        if self.mu <= 0:
            raise ConfigurationError("mu must be positive")
        return self


_FLOAT_KEYS = {"a", "b", "T", "k", "omega", "theta0", "mu"}
_INT_KEYS = {"M", "ell", "stride"}
_STR_KEYS = {"scheme", "scenario", "bc", "init", "output_dir", "run_id"}
_LIST_KEYS = {"k_list", "h_list"}
_NEWTON_INT = {"newton_steps", "inner_steps", "fallback_max_iters"}
_NEWTON_FLOAT = {"fallback_tol"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _INT_KEYS:
            return int(raw)
        if key in _LIST_KEYS:
            return tuple(float(tok) for tok in raw.replace(",", " ").split())
        if key in _STR_KEYS:
            return raw
        if key in _NEWTON_INT:
            return int(raw)
        if key in _NEWTON_FLOAT:
            return float(raw)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for key {key!r}: {raw!r}") from exc
    raise ConfigurationError(f"unknown configuration key {key!r}")


def parse_config(path: Optional[str] = None,
                 overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Read a config file plus ``key=value`` override strings.

    The file format is flat ``key = value`` lines with ``#`` comments; a
    ``[newton]`` section (or ``newton.``-prefixed keys) feeds the nonlinear
    solver options.  Unknown keys are rejected by name.
    """
    pairs: list[tuple[str, str]] = []
    if path is not None:
        section = ""
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if line.startswith("[") and line.endswith("]"):
                    section = line[1:-1].strip()
                    if section not in ("", "newton"):
                        raise ConfigurationError(
                            f"unknown config section {section!r} (line {lineno})")
                    continue
                if "=" not in line:
                    raise ConfigurationError(
                        f"expected key = value at line {lineno}: {line!r}")
                key, raw = line.split("=", 1)
                key = key.strip()
                if section:
                    key = f"{section}.{key}"
                pairs.append((key, raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override must be key=value: {item!r}")
        key, raw = item.split("=", 1)
        pairs.append((key.strip(), raw))

    cfg_kwargs: dict = {}
    newton_kwargs: dict = {}
    known = {f.name for f in fields(ExperimentConfig)} - {"newton"}
    for key, raw in pairs:
        if key.startswith("newton."):
            sub = key[len("newton."):]
            if sub not in _NEWTON_INT | _NEWTON_FLOAT:
                raise ConfigurationError(f"unknown configuration key {key!r}")
            newton_kwargs[sub] = _parse_value(sub, raw)
        elif key in known:
            cfg_kwargs[key] = _parse_value(key, raw)
        else:
            raise ConfigurationError(f"unknown configuration key {key!r}")
    cfg = ExperimentConfig(**cfg_kwargs)
    if newton_kwargs:
        cfg = replace(cfg, newton=NewtonOptions(**newton_kwargs))
    return cfg.validate()


# ----------------------------------------------------------------------
# Run assembly
# ----------------------------------------------------------------------

def _problem(config: ExperimentConfig):
    mesh = fem.build_mesh(config.a, config.b, config.M, config.ell, config.bc)
    coeffs = make_scenario(config.scenario, config.T, config.theta0, config.mu)
    exact = manufactured_solution(
        SolitonParams(config.omega, config.theta0), coeffs,
        domain=(config.a, config.b))
    reach = 4.0 * config.omega * config.T
    margin = min(config.b - reach, reach - config.a) if config.omega >= 0 \
        else min(config.b + reach, -reach - config.a)
    if margin < 10.0:
        warnings.warn(
            f"soliton center travels to {reach:.2f}, within 10 units of the "
            "domain boundary; boundary interaction may pollute the run",
            stacklevel=2)
    return mesh, coeffs, exact


def sample_times(config: ExperimentConfig) -> list[float]:
    """The balance-table sampling: first step plus integer times up to T."""
    times = [config.k]
    times += [float(t) for t in (1, 2, 3, 4, 5, 6) if t <= config.T + 1e-12]
    return times


def _execute(config: ExperimentConfig, mesh, coeffs, exact,
             error_times, with_l2: bool, track_phi: bool = False) -> RunResult:
    grid = TimeGrid.uniform(config.T, config.k)
    if config.scheme == "relaxation":
        return relaxation.run(mesh, coeffs, exact.initial_condition(), grid,
                              mode=config.init, exact=exact,
                              error_times=error_times, with_l2=with_l2,
                              track_phi_error=track_phi)
    return dfp.run(mesh, coeffs, exact.initial_condition(), grid,
                   opts=config.newton, exact=exact,
                   error_times=error_times, with_l2=with_l2)


@dataclass
class ReportBundle:
    """Outputs of one harness invocation."""

    config: ExperimentConfig
    summary: dict
    ledger: Optional[BalanceLedger] = None
    table: Optional[ConvergenceTable] = None
    csv_paths: dict = field(default_factory=dict)
    wall_time: float = 0.0
    failed: bool = False


def run_single(config: ExperimentConfig, write: bool = True) -> ReportBundle:
    """Execute one simulation and summarize balance errors at the sampled
    times; a solver failure yields a partial, flagged bundle."""
    config.validate()
    mesh, coeffs, exact = _problem(config)
    times = sample_times(config)
    start = time.perf_counter()
    failed = False
    try:
        result = _execute(config, mesh, coeffs, exact, times, with_l2=True)
        ledger = result.ledger
    except StepError as exc:
        # partial ledger flushed by the run driver
        ledger = getattr(exc, "ledger", BalanceLedger())
        failed = True
    wall = time.perf_counter() - start

    summary = {
        "max_abs_mass_residual": ledger.max_abs("mass_residual"),
        "max_abs_energy_residual": ledger.max_abs("energy_residual"),
        "errors_at": {},
        "wall_time_s": wall,
        "steps": len(ledger.rows) - 1,
        "failed": failed,
    }
    for t in times:
        row = ledger.row_near(t, 0.5 * config.k)
        if row is not None:
            summary["errors_at"][t] = {
                "mass_error": row.mass_error,
                "energy_error": row.energy_error,
                "l2_error": row.l2_error,
            }
    bundle = ReportBundle(config=config, summary=summary, ledger=ledger,
                          wall_time=wall, failed=failed)
    if write:
        emit_reports(bundle)
    return bundle


def run_convergence_study(config: ExperimentConfig, target: str,
                          write: bool = True) -> ReportBundle:
    """Sequence of runs over ``h_list`` (spatial) or ``k_list`` (temporal).

    ``target`` picks the measured error: "u" and "phi" are worst-case L2
    errors over the nodes/half nodes; "mass" and "energy" are the balance
    errors at the final time.  Rates come from consecutive rows.  A failed
    run aborts the study with the completed rows kept in the bundle.
    """
    config.validate()
    if target not in ("u", "phi", "mass", "energy"):
        raise ConfigurationError(f"unknown study target {target!r}")
    if target == "phi" and config.scheme != "relaxation":
        raise ConfigurationError("auxiliary-density studies need the relaxation scheme")
    spatial = bool(config.h_list)
    if spatial == bool(config.k_list):
        raise ConfigurationError("provide exactly one of h_list or k_list")

    study = "spatial" if spatial else "temporal"
    if target in ("mass", "energy"):
        study = target
    table = ConvergenceTable(study=study, target=target,
                             scheme=config.scheme, ell=config.ell)
    start = time.perf_counter()
    failed = False
    runs = []
    if spatial:
        width = config.b - config.a
        for h in config.h_list:
            m = round(width / h)
            if abs(m * h - width) > 1e-9 * width:
                raise ConfigurationError(
                    f"h={h} does not evenly divide the domain width {width}")
            runs.append((h, replace(config, M=int(m))))
    else:
        for k in config.k_list:
            runs.append((k, replace(config, k=float(k))))

    for step_value, cfg in runs:
        mesh, coeffs, exact = _problem(cfg)
        try:
            if target == "u":
                res = _execute(cfg, mesh, coeffs, exact, "all", with_l2=True)
                err = res.max_l2_error
            elif target == "phi":
                res = _execute(cfg, mesh, coeffs, exact, None, with_l2=False,
                               track_phi=True)
                err = res.max_phi_error
            else:
                res = _execute(cfg, mesh, coeffs, exact, [cfg.T], with_l2=False)
                row = res.ledger.row_near(cfg.T, 0.5 * cfg.k)
                err = row.mass_error if target == "mass" else row.energy_error
        except StepError:
            failed = True
            break
        table.add(step_value, err)

    wall = time.perf_counter() - start
    summary = {
        "study": study,
        "target": target,
        "steps": table.steps,
        "errors": table.errors,
        "rates": table.rates,
        "wall_time_s": wall,
        "failed": failed,
    }
    bundle = ReportBundle(config=config, summary=summary, table=table,
                          wall_time=wall, failed=failed)
    if write:
        emit_reports(bundle)
    return bundle


# ----------------------------------------------------------------------
# Emission
# ----------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def emit_reports(bundle: ReportBundle) -> dict:
    """Write ledger/convergence CSVs and the text summary; returns paths."""
    cfg = bundle.config
    outdir = cfg.output_dir
    os.makedirs(outdir, exist_ok=True)
    paths = {}

    if bundle.ledger is not None:
        path = os.path.join(outdir, f"{cfg.run_id}_ledger.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(LEDGER_HEADER + "\n")
            prefix = (f"{cfg.run_id},{cfg.scheme},{cfg.scenario},{cfg.ell},"
                      f"{_fmt(cfg.h)},{_fmt(cfg.k)}")
            for row in bundle.ledger.rows:
                fh.write(prefix + f",{row.n},{_fmt(row.t)},{_fmt(row.mass)},"
                         f"{_fmt(row.e_kinetic)},{_fmt(row.e_potential)},"
                         f"{_fmt(row.e_total)},{_fmt(row.mass_residual)},"
                         f"{_fmt(row.energy_residual)},{_fmt(row.mass_error)},"
                         f"{_fmt(row.energy_error)},{_fmt(row.l2_error)}\n")
        paths["ledger"] = path

    if bundle.table is not None:
        path = os.path.join(outdir, f"{cfg.run_id}_convergence.csv")
        tab = bundle.table
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(CONVERGENCE_HEADER + "\n")
            for s, e, r in zip(tab.steps, tab.errors, tab.rates):
                fh.write(f"{tab.study},{tab.target},{tab.scheme},{tab.ell},"
                         f"{_fmt(s)},{_fmt(e)},{_fmt(r)}\n")
        paths["convergence"] = path

    path = os.path.join(outdir, f"{cfg.run_id}_summary.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(summary_text(bundle))
    paths["summary"] = path

    bundle.csv_paths = paths
    return paths


def summary_text(bundle: ReportBundle) -> str:
    """Human-readable summary mirroring the benchmark table layouts."""
    cfg = bundle.config
    lines = [
        f"run {cfg.run_id}: scheme={cfg.scheme} scenario={cfg.scenario} "
        f"ell={cfg.ell} h={cfg.h:.4e} k={cfg.k:.4e} T={cfg.T} bc={cfg.bc}",
        f"wall time: {bundle.wall_time:.2f} s"
        + ("  [FAILED: partial results]" if bundle.failed else ""),
    ]
    if bundle.ledger is not None:
        s = bundle.summary
        lines.append(f"max |mass residual|   = {s['max_abs_mass_residual']:.4e}")
        lines.append(f"max |energy residual| = {s['max_abs_energy_residual']:.4e}")
        lines.append("")
        lines.append(f"{'t':>8}  {'mass error':>12}  {'energy error':>12}  "
                     f"{'L2 error':>12}")
        for t, errs in s["errors_at"].items():
            label = f"t={t:g}" if t != cfg.k else "t=k"
            lines.append(f"{label:>8}  {errs['mass_error']:>12.4e}  "
                         f"{errs['energy_error']:>12.4e}  "
                         f"{errs['l2_error']:>12.4e}")
    if bundle.table is not None:
        tab = bundle.table
        lines.append("")
        lines.append(f"{tab.study} study, target {tab.target}:")
        lines.append(f"{'step':>12}  {'error':>12}  {'rate':>8}")
        for s_, e_, r_ in zip(tab.steps, tab.errors, tab.rates):
            rate = f"{r_:.3f}" if np.isfinite(r_) else "-"
            lines.append(f"{s_:>12.4e}  {e_:>12.4e}  {rate:>8}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# CSV read-back
# ----------------------------------------------------------------------

def read_ledger_csv(path: str) -> tuple[dict, BalanceLedger]:
    """Parse a ledger CSV back into metadata and a BalanceLedger."""
    ledger = BalanceLedger()
    meta: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != LEDGER_HEADER:
            raise ValueError(f"unexpected ledger header in {path}")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            meta = {"run_id": parts[0], "scheme": parts[1],
                    "scenario": parts[2], "ell": int(parts[3]),
                    "h": float(parts[4]), "k": float(parts[5])}
            vals = [float(v) for v in parts[6:]]
            ledger.append(LedgerRow(int(vals[0]), *vals[1:]))
    return meta, ledger


def read_convergence_csv(path: str) -> ConvergenceTable:
    table = None
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != CONVERGENCE_HEADER:
            raise ValueError(f"unexpected convergence header in {path}")
        for line in fh:
            study, target, scheme, ell, step, error, _rate = line.rstrip("\n").split(",")
            if table is None:
                table = ConvergenceTable(study=study, target=target,
                                         scheme=scheme, ell=int(ell))
            table.add(float(step), float(error))
    if table is None:
        raise ValueError(f"no rows in {path}")
    return table
