"""Discrete mass/energy functionals, per-step balance residuals, errors
against the exact solution, and convergence-rate bookkeeping.

The two schemes share the discrete mass (squared L2 norm) and kinetic energy
(squared H1 seminorm) but discretize the potential energy differently: the
relaxation scheme uses the auxiliary-density combination
``2 * int(phi |u|^2) - int(phi^2)`` while the fully implicit scheme uses the
plain L4 norm to the fourth power.  Balance residuals evaluate the local
discrete balance identities exactly as written; for exact time stepping they
vanish to machine precision, which the property suite asserts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import fem
from .coefficients import CoefficientSet, TravelingSoliton
from .fem import FEFunction, Mesh1D

__all__ = [
    "EnergySplit",
    "discrete_energies",
    "balance_residuals",
    "solution_error",
    "aux_density_error",
    "exact_errors",
    "compute_eoc",
    "LedgerRow",
    "BalanceLedger",
    "ConvergenceTable",
    "RunResult",
]

RELAXATION = "relaxation"
DFP = "dfp"


# ----------------------------------------------------------------------
# Energies
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class EnergySplit:
    mass: float
    kinetic: float
    potential: float
    total: float


def discrete_energies(u: FEFunction, scheme: str, coeffs: CoefficientSet,
                      t: float, dt: float,
                      phi: Optional[FEFunction] = None) -> EnergySplit:
    """Mass, kinetic and potential energies of a scheme state at time t.

    The combined energy weights the parts with coefficients evaluated at the
    step midpoint ``t + dt/2``, matching the ledger convention.  Relaxation
    states must supply the auxiliary density ``phi``.
    """
    if scheme == RELAXATION:
        if phi is None:
            raise ValueError("relaxation energies need the auxiliary density")
        fn = fem.functionals(u, phi)
        potential = 2.0 * fn.weighted_density - fn.weight_sq
    elif scheme == DFP:
        if phi is not None:
            raise ValueError("dfp states carry no auxiliary density")
        fn = fem.functionals(u)
        potential = fn.l4_4
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    t_mid = t + 0.5 * dt
    total = (0.5 * float(coeffs.dispersion(t_mid)) * fn.h1_semi_sq
             + 0.25 * float(coeffs.nonlinearity(t_mid)) * potential)
    return EnergySplit(fn.l2_sq, fn.h1_semi_sq, potential, total)


# ----------------------------------------------------------------------
# Balance residuals
# ----------------------------------------------------------------------

def balance_residuals(mesh: Mesh1D, coeffs: CoefficientSet, t: float, dt: float,
                      u_prev: np.ndarray, u_next: np.ndarray, stage: np.ndarray,
                      scheme: str,
                      phi_prev: Optional[np.ndarray] = None,
                      phi_next: Optional[np.ndarray] = None
                      ) -> tuple[float, float]:
    """Defects of the local discrete mass and energy balance identities for
    the step t -> t + dt.

    The mass identity reads  M_next - M_prev + 2 dt r_mid |stage|^2 = 0  for
    both schemes.  The energy identity combines the kinetic and potential
    rates with opposite signs (the focusing Hamiltonian is their difference)
    and balances them against the damping acting on the midpoint value:

        p/2 * d(E_kin) - q/4 * d(E_pot) + r * (p |grad stage|^2 - C) = 0

    with C the scheme's own discretization of q * int(|u|^2 |stage|^2).
    Both identities hold to machine precision when the step systems are
    solved exactly, so the residuals measure solver exactness.
    """
    t_mid = t + 0.5 * dt
    p = float(coeffs.dispersion(t_mid))
    q = float(coeffs.nonlinearity(t_mid))
    r = float(coeffs.damping(t_mid))
    B = mesh.mass
    S = mesh.stiffness

    def l2sq(c):
        return float(np.real(np.vdot(c, B @ c)))

    def h1sq(c):
        return float(np.real(np.vdot(c, S @ c)))

    mass_res = l2sq(u_next) - l2sq(u_prev) + 2.0 * dt * r * l2sq(stage)

    stage_dens = np.abs(mesh.eval_at_quad(stage)) ** 2
    kin_rate = (h1sq(u_next) - h1sq(u_prev)) / dt

    if scheme == RELAXATION:
        if phi_prev is None or phi_next is None:
            raise ValueError("relaxation residuals need both auxiliary densities")
        phi_prev_q = mesh.eval_at_quad(phi_prev)
        phi_next_q = mesh.eval_at_quad(phi_next)
        dens_prev = np.abs(mesh.eval_at_quad(u_prev)) ** 2
        dens_next = np.abs(mesh.eval_at_quad(u_next)) ** 2
        pot_prev = (2.0 * mesh.integrate(phi_prev_q * dens_prev)
                    - mesh.integrate(phi_prev_q ** 2))
        pot_next = (2.0 * mesh.integrate(phi_next_q * dens_next)
                    - mesh.integrate(phi_next_q ** 2))
        pot_rate = (pot_next - pot_prev) / dt
        forcing = r * (p * h1sq(stage)
                       - q * mesh.integrate(phi_next_q * stage_dens))
    elif scheme == DFP:
        dens_prev = np.abs(mesh.eval_at_quad(u_prev)) ** 2
        dens_next = np.abs(mesh.eval_at_quad(u_next)) ** 2
        pot_rate = (mesh.integrate(dens_next ** 2)
                    - mesh.integrate(dens_prev ** 2)) / dt
        forcing = r * (p * h1sq(stage)
                       - 0.5 * q * mesh.integrate((dens_next + dens_prev)
                                                  * stage_dens))
    else:
        raise ValueError(f"unknown scheme {scheme!r}")

    energy_res = 0.5 * p * kin_rate - 0.25 * q * pot_rate + forcing
    return float(mass_res), float(energy_res)


# ----------------------------------------------------------------------
# Errors against the exact solution
# ----------------------------------------------------------------------

def solution_error(u: FEFunction, exact: TravelingSoliton, t: float) -> float:
    """L2 distance between the FE state and the exact field at time t."""
    mesh = u.mesh
    rule = mesh.error_rule()
    pts = mesh.physical_points(rule)
    diff = mesh.eval_at_quad(u.coeffs, rule) - exact.value(pts, t)
    return float(np.sqrt(mesh.integrate(np.abs(diff) ** 2, rule)))


def aux_density_error(phi: FEFunction, exact: TravelingSoliton, t_half: float) -> float:
    """L2 distance between the auxiliary density and |u|^2 at a half node."""
    mesh = phi.mesh
    rule = mesh.error_rule()
    pts = mesh.physical_points(rule)
    diff = mesh.eval_at_quad(phi.coeffs, rule) - exact.density(pts, t_half)
    return float(np.sqrt(mesh.integrate(diff ** 2, rule)))


def exact_errors(u: FEFunction, scheme: str, coeffs: CoefficientSet,
                 exact: TravelingSoliton, t: float, dt: float,
                 phi: Optional[FEFunction] = None,
                 with_l2: bool = True) -> tuple[float, float, float]:
    """(mass error, energy error, L2 solution error) at time t.

    Both sides of the energy comparison evaluate the coefficients at the
    step midpoint ``t + dt/2``.
    """
    en = discrete_energies(u, scheme, coeffs, t, dt, phi)
    mass_err = abs(en.mass - exact.exact_mass(t))
    energy_err = abs(en.total - exact.exact_energy(t, t + 0.5 * dt))
    l2_err = solution_error(u, exact, t) if with_l2 else math.nan
    return mass_err, energy_err, l2_err


# ----------------------------------------------------------------------
# Convergence rates
# ----------------------------------------------------------------------

def compute_eoc(steps: Sequence[float], errors: Sequence[float]) -> list[float]:
    """Experimental orders of convergence from (step, error) rows.

    The first entry is NaN; non-positive errors flag the affected rates as
    NaN instead of raising.
    """
    steps = np.asarray(steps, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if steps.size != errors.size or steps.size < 2:
        raise ValueError("need at least two (step, error) rows")
    if np.any(steps <= 0) or np.any(np.diff(steps) >= 0):
        raise ValueError("step parameters must be positive and strictly decreasing")
    rates = [math.nan]
    for j in range(1, steps.size):
        if errors[j - 1] <= 0 or errors[j] <= 0:
            rates.append(math.nan)
        else:
            rates.append(float((math.log(errors[j - 1]) - math.log(errors[j]))
                               / (math.log(steps[j - 1]) - math.log(steps[j]))))
    return rates


@dataclass
class ConvergenceTable:
    """Rows of (step parameter, error, rate) for one EOC study."""

    study: str      # "spatial" | "temporal" | "mass" | "energy"
    target: str     # "u" | "phi" | "mass" | "energy"
    scheme: str
    ell: int
    steps: list[float] = field(default_factory=list)
    errors: list[float] = field(default_factory=list)

    def add(self, step: float, error: float):
        if self.steps and step >= self.steps[-1]:
            raise ValueError("step parameters must be strictly decreasing")
        self.steps.append(float(step))
        self.errors.append(float(error))

    @property
    def rates(self) -> list[float]:
        if len(self.steps) < 2:
            return [math.nan] * len(self.steps)
        return compute_eoc(self.steps, self.errors)


# ----------------------------------------------------------------------
# Ledger
# ----------------------------------------------------------------------

@dataclass
class LedgerRow:
    n: int
    t: float
    mass: float
    e_kinetic: float
    e_potential: float
    e_total: float
    mass_residual: float
    energy_residual: float
    mass_error: float
    energy_error: float
    l2_error: float


class BalanceLedger:
    """Per-step record of a run: energies, balance residuals and errors.

    Rows are appended in strictly increasing time; the residual fields of
    row n refer to the step that produced state n (0.0 where no such step
    exists).  Error fields are NaN when no exact solution was attached or
    the row lies outside the requested error times.
    """

    def __init__(self):
        self.rows: list[LedgerRow] = []

    def append(self, row: LedgerRow):
        if self.rows and row.t <= self.rows[-1].t:
            raise ValueError("ledger rows must have strictly increasing time")
        if not (np.isfinite(row.mass_residual) and np.isfinite(row.energy_residual)):
            raise ValueError("balance residuals must be finite")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def max_abs(self, name: str) -> float:
        col = self.column(name)
        col = col[np.isfinite(col)]
        return float(np.abs(col).max()) if col.size else math.nan

    def row_near(self, t: float, tol: float) -> Optional[LedgerRow]:
        best, dist = None, tol
        for r in self.rows:
            d = abs(r.t - t)
            if d <= dist:
                best, dist = r, d
        return best


@dataclass
class RunResult:
    """Outcome of one time-stepped run."""

    final_state: object
    ledger: BalanceLedger
    max_l2_error: float = math.nan       # sup over recorded nodes
    max_phi_error: float = math.nan      # sup over half nodes (relaxation)
    snapshots: dict = field(default_factory=dict)


# ----------------------------------------------------------------------
# Per-run recording
# ----------------------------------------------------------------------

@dataclass
class _StateMeasure:
    step_index: int
    l2sq: float
    h1sq: float
    dens_q: np.ndarray
    phi_q: Optional[np.ndarray]
    potential: float


class LedgerRecorder:
    """Fills a BalanceLedger as a run advances.

    Quantities of the most recent state are cached so consecutive steps do
    not recompute them.  Row energies follow the midpoint-coefficient
    convention (weights at ``t + dt/2`` with dt the arriving step size), on
    both the discrete and the exact side of the error columns.
    """

    def __init__(self, mesh: Mesh1D, coeffs: CoefficientSet, scheme: str,
                 exact: Optional[TravelingSoliton] = None,
                 error_times="all", with_l2: bool = True):
        if scheme not in (RELAXATION, DFP):
            raise ValueError(f"unknown scheme {scheme!r}")
        self.mesh = mesh
        self.coeffs = coeffs
        self.scheme = scheme
        self.exact = exact
        self.with_l2 = with_l2
        if error_times is None or isinstance(error_times, str):
            self.error_times = error_times
        else:
            self.error_times = np.sort(np.asarray(error_times, dtype=float))
        self.ledger = BalanceLedger()
        self.max_l2_error = math.nan
        self._cache: Optional[_StateMeasure] = None

    # -- helpers -------------------------------------------------------

    def _wants_errors(self, t: float, dt: float) -> bool:
        if self.exact is None or self.error_times is None:
            return False
        if isinstance(self.error_times, str):  # "all"
            return True
        idx = np.searchsorted(self.error_times, t)
        for j in (idx - 1, idx):
            if 0 <= j < self.error_times.size \
                    and abs(self.error_times[j] - t) <= 0.5 * dt:
                return True
        return False

    def _measure(self, state) -> _StateMeasure:
        if self._cache is not None and self._cache.step_index == state.step_index:
            return self._cache
        mesh = self.mesh
        u = state.u.coeffs
        l2sq = float(np.real(np.vdot(u, mesh.mass @ u)))
        h1sq = float(np.real(np.vdot(u, mesh.stiffness @ u)))
        dens_q = np.abs(mesh.eval_at_quad(u)) ** 2
        if self.scheme == RELAXATION:
            phi_q = mesh.eval_at_quad(state.phi.coeffs)
            potential = float(2.0 * mesh.integrate(phi_q * dens_q)
                              - mesh.integrate(phi_q ** 2))
        else:
            phi_q = None
            potential = float(mesh.integrate(dens_q ** 2))
        m = _StateMeasure(state.step_index, l2sq, h1sq, dens_q, phi_q, potential)
        self._cache = m
        return m

    def _append(self, state, measure: _StateMeasure, dt: float,
                mass_res: float, energy_res: float):
        t = state.time
        t_mid = t + 0.5 * dt
        p = float(self.coeffs.dispersion(t_mid))
        q = float(self.coeffs.nonlinearity(t_mid))
        e_total = 0.5 * p * measure.h1sq + 0.25 * q * measure.potential
        mass_err = energy_err = l2_err = math.nan
        if self._wants_errors(t, dt):
            mass_err = abs(measure.l2sq - self.exact.exact_mass(t))
            energy_err = abs(e_total - self.exact.exact_energy(t, t_mid))
            if self.with_l2:
                l2_err = solution_error(state.u, self.exact, t)
                if not (l2_err <= self.max_l2_error):  # NaN-safe max
                    self.max_l2_error = l2_err
        self.ledger.append(LedgerRow(
            n=state.step_index, t=t, mass=measure.l2sq,
            e_kinetic=measure.h1sq, e_potential=measure.potential,
            e_total=e_total, mass_residual=mass_res,
            energy_residual=energy_res, mass_error=mass_err,
            energy_error=energy_err, l2_error=l2_err))

    # -- recording entry points -----------------------------------------

    def record_initial(self, state, dt_next: float):
        self._append(state, self._measure(state), dt_next, 0.0, 0.0)

    def record_step(self, prev, new, dt: float, energy_valid: bool = True):
        """Record arrival at ``new`` produced by a step of size dt from
        ``prev``.  ``energy_valid=False`` marks transitions for which the
        energy identity does not apply (the improved-initialization step)."""
        mesh = self.mesh
        mp = self._measure(prev)
        self._cache = None
        mn = self._measure(new)
        t_mid = prev.time + 0.5 * dt
        p = float(self.coeffs.dispersion(t_mid))
        q = float(self.coeffs.nonlinearity(t_mid))
        r = float(self.coeffs.damping(t_mid))
        stage = new.stage
        stage_l2 = float(np.real(np.vdot(stage, mesh.mass @ stage)))
        mass_res = mn.l2sq - mp.l2sq + 2.0 * dt * r * stage_l2

        energy_res = 0.0
        if energy_valid:
            stage_dens = np.abs(mesh.eval_at_quad(stage)) ** 2
            stage_h1 = float(np.real(np.vdot(stage, mesh.stiffness @ stage)))
            kin_rate = (mn.h1sq - mp.h1sq) / dt
            pot_rate = (mn.potential - mp.potential) / dt
            if self.scheme == RELAXATION:
                forcing = r * (p * stage_h1
                               - q * mesh.integrate(mn.phi_q * stage_dens))
            else:
                forcing = r * (p * stage_h1
                               - 0.5 * q * mesh.integrate(
                                   (mn.dens_q + mp.dens_q) * stage_dens))
            energy_res = 0.5 * p * kin_rate - 0.25 * q * pot_rate + forcing
        self._append(new, mn, dt, float(mass_res), float(energy_res))
