"""Uniform 1D Lagrange finite elements: meshes, quadrature, assembly and
direct complex linear solves.

Everything is built around a fixed connectivity stencil per mesh: all
assembled matrices (mass, stiffness, weighted mass) share one sparsity
layout, stored in LAPACK band form plus, for periodic meshes, the two wrap
vectors that couple the first degree of freedom to the last element.  Linear
systems are solved by banded LU (``*gbtrf``/``*gbtrs``) with a rank-2
Woodbury correction for the wrap; a sparse-LU fallback covers degenerate
cases.  Solves are deterministic, which the golden-table harness relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import get_lapack_funcs

from .errors import ConfigurationError, SolverError

__all__ = [
    "QuadratureRule",
    "gauss_rule",
    "lagrange_tables",
    "Mesh1D",
    "build_mesh",
    "FEFunction",
    "StencilMatrix",
    "BandedLU",
    "assemble_operators",
    "assemble_weighted_mass",
    "l2_project",
    "solve_complex_system",
    "functionals",
    "Functionals",
]


# ----------------------------------------------------------------------
# Quadrature and reference-element shape functions
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre rule on the reference element [0, 1]."""

    points: np.ndarray
    weights: np.ndarray
    exactness: int  # exact for polynomials up to this degree

    @property
    def npoints(self) -> int:
        return self.points.size


_RULESET: dict[int, QuadratureRule] = {}


def gauss_rule(npoints: int) -> QuadratureRule:
    """Gauss-Legendre quadrature with ``npoints`` nodes on [0, 1]."""
    if npoints < 1:
        raise ConfigurationError("quadrature rule needs at least one point")
    rule = _RULESET.get(npoints)
    if rule is None:
        x, w = np.polynomial.legendre.leggauss(npoints)
        rule = QuadratureRule(0.5 * (x + 1.0), 0.5 * w, 2 * npoints - 1)
        _RULESET[npoints] = rule
    return rule


def lagrange_tables(degree: int, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values and derivatives of the equispaced nodal Lagrange basis on [0, 1].

    Returns arrays of shape ``(len(points), degree + 1)``.
    """
    nodes = np.linspace(0.0, 1.0, degree + 1)
    x = np.asarray(points, dtype=float)
    nbasis = degree + 1
    vals = np.empty((x.size, nbasis))
    ders = np.empty((x.size, nbasis))
    for j in range(nbasis):
        others = np.delete(nodes, j)
        denom = np.prod(nodes[j] - others)
        diffs = x[:, None] - others[None, :]
        vals[:, j] = np.prod(diffs, axis=1) / denom
        der = np.zeros(x.size)
        for m in range(others.size):
            der += np.prod(np.delete(diffs, m, axis=1), axis=1)
        ders[:, j] = der / denom
    return vals, ders


# ----------------------------------------------------------------------
# Mesh
# ----------------------------------------------------------------------

class Mesh1D:
    """Uniform partition of [a, b] into ``num_elements`` Lagrange elements.

    Periodic meshes identify the last node with the first; Dirichlet meshes
    eliminate the two boundary nodes, keeping interior dofs only.  The mesh
    owns the connectivity, the default quadrature rule (exact to degree
    ``4*degree``, enough for projections of products of four basis
    functions), and the canonical sparsity layout shared by every matrix
    assembled on it.
    """

    def __init__(self, a: float, b: float, num_elements: int,
                 degree: int = 1, bc: str = "periodic"):
        if not (np.isfinite(a) and np.isfinite(b) and a < b):
            raise ConfigurationError(f"invalid interval [{a}, {b}]")
        if num_elements < 2:
            raise ConfigurationError("need at least 2 elements")
        if not 1 <= degree <= 5:
            raise ConfigurationError(f"element degree must be in 1..5, got {degree}")
        if bc not in ("periodic", "dirichlet"):
            raise ConfigurationError(f"unknown boundary condition {bc!r}")

        self.a = float(a)
        self.b = float(b)
        self.num_elements = int(num_elements)
        self.degree = int(degree)
        self.bc = bc
        self.h = (self.b - self.a) / self.num_elements

        nnodes = num_elements * degree + 1
        self.nodes = np.linspace(self.a, self.b, nnodes)

        conn = (np.arange(num_elements)[:, None] * degree
                + np.arange(degree + 1)[None, :])
        if bc == "periodic":
            self.num_dofs = num_elements * degree
            self.element_dofs = conn % self.num_dofs
            self.dof_coords = self.nodes[:-1].copy()
        else:
            self.num_dofs = num_elements * degree - 1
            dofs = conn - 1
            dofs[conn == 0] = -1
            dofs[conn == nnodes - 1] = -1
            self.element_dofs = dofs
            self.dof_coords = self.nodes[1:-1].copy()

        # default rule: 2*degree + 1 Gauss points, exact to degree 4l + 1
        self.quadrature = gauss_rule(2 * self.degree + 1)
        self._tables: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._layout = _StencilLayout(self)
        self._mass: Optional[StencilMatrix] = None
        self._stiffness: Optional[StencilMatrix] = None
        self._mass_lu: Optional[BandedLU] = None

    # -- tabulation ----------------------------------------------------

    def tables(self, rule: QuadratureRule) -> tuple[np.ndarray, np.ndarray]:
        """Shape-function values/derivatives at the rule's points, cached."""
        tab = self._tables.get(rule.npoints)
        if tab is None:
            tab = lagrange_tables(self.degree, rule.points)
            self._tables[rule.npoints] = tab
        return tab

    def load_rule(self) -> QuadratureRule:
        """Boosted rule for loads of non-polynomial integrands."""
        return gauss_rule(2 * self.degree + 5)

    def error_rule(self) -> QuadratureRule:
        """Default rule plus two points, for error integrals."""
        return gauss_rule(2 * self.degree + 3)

    def physical_points(self, rule: QuadratureRule) -> np.ndarray:
        """Quadrature point coordinates, shape (num_elements, npoints)."""
        lefts = self.a + self.h * np.arange(self.num_elements)
        return lefts[:, None] + self.h * rule.points[None, :]

    # -- pointwise evaluation -------------------------------------------

    def eval_at_quad(self, coeffs: np.ndarray, rule: Optional[QuadratureRule] = None
                     ) -> np.ndarray:
        """Values of the FE function at quadrature points, (num_elements, nq)."""
        rule = rule or self.quadrature
        vals, _ = self.tables(rule)
        local = self._gather(coeffs)
        return np.einsum("qi,ei->eq", vals, local)

    def eval_deriv_at_quad(self, coeffs: np.ndarray,
                           rule: Optional[QuadratureRule] = None) -> np.ndarray:
        rule = rule or self.quadrature
        _, ders = self.tables(rule)
        local = self._gather(coeffs)
        return np.einsum("qi,ei->eq", ders, local) / self.h

    def _gather(self, coeffs: np.ndarray) -> np.ndarray:
        """Local coefficient blocks, eliminated dofs read as zero."""
        padded = np.concatenate([coeffs, np.zeros(1, dtype=coeffs.dtype)])
        return padded[self.element_dofs]

    def evaluate(self, coeffs: np.ndarray, x) -> np.ndarray:
        """Point evaluation of the FE function at arbitrary coordinates."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        elem = np.clip(((x - self.a) / self.h).astype(int), 0,
                       self.num_elements - 1)
        xi = (x - self.a - elem * self.h) / self.h
        vals, _ = lagrange_tables(self.degree, xi)
        local = self._gather(coeffs)[elem]
        return np.einsum("pi,pi->p", vals, local)

    # -- integration ----------------------------------------------------

    def integrate(self, values: np.ndarray, rule: Optional[QuadratureRule] = None):
        """Integral of pointwise values given at quadrature points."""
        rule = rule or self.quadrature
        return self.h * np.einsum("q,eq->", rule.weights, values)

    def load_vector(self, values: np.ndarray,
                    rule: Optional[QuadratureRule] = None) -> np.ndarray:
        """Dof vector of integrals of ``values`` against each basis function."""
        rule = rule or self.quadrature
        vals, _ = self.tables(rule)
        local = self.h * np.einsum("q,qi,eq->ei", rule.weights, vals, values)
        return self._scatter_vector(local)

    def _scatter_vector(self, local: np.ndarray) -> np.ndarray:
        dofs = self.element_dofs.ravel()
        keep = dofs >= 0
        data = local.reshape(-1, local.shape[-1]).ravel() if local.ndim > 2 else local.ravel()
        if np.iscomplexobj(data):
            re = np.bincount(dofs[keep], weights=data.real[keep],
                             minlength=self.num_dofs)
            im = np.bincount(dofs[keep], weights=data.imag[keep],
                             minlength=self.num_dofs)
            return re + 1j * im
        return np.bincount(dofs[keep], weights=data[keep], minlength=self.num_dofs)

    # -- cached operators -------------------------------------------------

    @property
    def mass(self) -> "StencilMatrix":
        if self._mass is None:
            self._mass, self._stiffness = assemble_operators(self)
        return self._mass

    @property
    def stiffness(self) -> "StencilMatrix":
        if self._stiffness is None:
            self._mass, self._stiffness = assemble_operators(self)
        return self._stiffness

    @property
    def mass_lu(self) -> "BandedLU":
        if self._mass_lu is None:
            self._mass_lu = BandedLU(self.mass)
        return self._mass_lu

    def project_values(self, values: np.ndarray, rule: QuadratureRule) -> np.ndarray:
        """Coefficients of the L2 projection of pointwise values."""
        load = self.load_vector(values, rule)
        return self.mass_lu.solve(load)

    def __repr__(self) -> str:  # pragma: no cover
        return (f"Mesh1D([{self.a}, {self.b}], M={self.num_elements}, "
                f"degree={self.degree}, bc={self.bc!r})")


def build_mesh(a: float, b: float, num_elements: int, degree: int = 1,
               bc: str = "periodic") -> Mesh1D:
    """Construct a uniform mesh; raises ConfigurationError on bad input."""
    return Mesh1D(a, b, num_elements, degree=degree, bc=bc)


# ----------------------------------------------------------------------
# FE functions
# ----------------------------------------------------------------------

@dataclass
class FEFunction:
    """Coefficient vector on a mesh; complex or real by dtype."""

    mesh: Mesh1D
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs)
        if self.coeffs.shape != (self.mesh.num_dofs,):
            raise ValueError(
                f"coefficient length {self.coeffs.shape} does not match "
                f"{self.mesh.num_dofs} dofs")

    @property
    def is_real(self) -> bool:
        return not np.iscomplexobj(self.coeffs)

    def __call__(self, x):
        return self.mesh.evaluate(self.coeffs, x)


# ----------------------------------------------------------------------
# Sparsity layout shared by all matrices on one mesh
# ----------------------------------------------------------------------

class _StencilLayout:
    """Canonical storage layout of the FE stencil.

    Entries live in a flat array: the LAPACK band workspace (column-major,
    ``3*l + 1`` rows so LU fill fits in place) followed by the periodic wrap
    entries of row 0 and column 0.  Assembly is one ``bincount`` over
    precomputed slots; the same flat data maps to CSC for matvecs.
    """

    def __init__(self, mesh: Mesh1D):
        n = mesh.num_dofs
        l = mesh.degree
        ldab = 3 * l + 1
        self.n = n
        self.halfband = l
        self.ldab = ldab

        de = mesh.element_dofs
        nb = mesh.degree + 1
        rows = np.broadcast_to(de[:, :, None], (de.shape[0], nb, nb)).ravel()
        cols = np.broadcast_to(de[:, None, :], (de.shape[0], nb, nb)).ravel()
        keep = (rows >= 0) & (cols >= 0)
        self.entry_positions = np.flatnonzero(keep)
        rows = rows[keep].astype(np.int64)
        cols = cols[keep].astype(np.int64)

        diag = rows - cols
        inband = np.abs(diag) <= l
        slots = np.empty(rows.size, dtype=np.int64)
        slots[inband] = cols[inband] * ldab + (2 * l + diag[inband])

        out = ~inband
        orow, ocol = rows[out], cols[out]
        if out.any() and not np.all((orow == 0) | (ocol == 0)):
            raise AssertionError("unexpected out-of-band coupling")
        self.wrap_u_cols = np.unique(ocol[orow == 0])   # entries (0, j)
        self.wrap_v_rows = np.unique(orow[ocol == 0])   # entries (i, 0)
        base = ldab * n
        uofs = {c: base + i for i, c in enumerate(self.wrap_u_cols)}
        vofs = {r: base + self.wrap_u_cols.size + i
                for i, r in enumerate(self.wrap_v_rows)}
        oslots = np.where(orow == 0,
                          [uofs.get(c, -1) for c in ocol],
                          [vofs.get(r, -1) for r in orow])
        slots[out] = oslots
        self.slots = slots
        self.size = base + self.wrap_u_cols.size + self.wrap_v_rows.size

        # CSC view of the exact stencil
        keys = cols * np.int64(n) + rows
        ukeys, first = np.unique(keys, return_index=True)
        self.csc_rows = (ukeys % n).astype(np.int32)
        counts = np.bincount((ukeys // n).astype(np.int64), minlength=n)
        self.csc_indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
        self.csc_from_flat = slots[first]

    def assemble(self, local: np.ndarray) -> np.ndarray:
        """Scatter local element matrices (num_elements, nb, nb) to flat data."""
        contrib = local.ravel()[self.entry_positions]
        return np.bincount(self.slots, weights=contrib, minlength=self.size)


class StencilMatrix:
    """Matrix on a mesh's FE stencil (the spec-level sparse complex matrix).

    Stores the flat canonical data; supports scalar combinations, CSC export
    and matvec.  Symmetric bilinear forms yield symmetric data because the
    layout assigns (i, j) and (j, i) distinct slots filled symmetrically.
    """

    def __init__(self, mesh: Mesh1D, data: np.ndarray):
        self.mesh = mesh
        self.data = data
        self._csc = None

    @property
    def shape(self) -> tuple[int, int]:
        n = self.mesh.num_dofs
        return (n, n)

    def tocsc(self) -> sp.csc_matrix:
        if self._csc is None:
            lay = self.mesh._layout
            self._csc = sp.csc_matrix(
                (self.data[lay.csc_from_flat], lay.csc_rows, lay.csc_indptr),
                shape=self.shape)
        return self._csc

    def toarray(self) -> np.ndarray:
        return self.tocsc().toarray()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.tocsc() @ x

    def __matmul__(self, x: np.ndarray) -> np.ndarray:
        return self.matvec(x)

    def __add__(self, other: "StencilMatrix") -> "StencilMatrix":
        if other.mesh is not self.mesh:
            raise ValueError("matrices live on different meshes")
        return StencilMatrix(self.mesh, self.data + other.data)

    def __sub__(self, other: "StencilMatrix") -> "StencilMatrix":
        if other.mesh is not self.mesh:
            raise ValueError("matrices live on different meshes")
        return StencilMatrix(self.mesh, self.data - other.data)

    def __mul__(self, scalar) -> "StencilMatrix":
        return StencilMatrix(self.mesh, self.data * scalar)

    __rmul__ = __mul__

    def band_and_wrap(self):
        """LAPACK band workspace (F-order view) and the wrap vectors."""
        lay = self.mesh._layout
        band = self.data[:lay.ldab * lay.n].reshape(lay.n, lay.ldab).T
        nu = lay.wrap_u_cols.size
        u = self.data[lay.ldab * lay.n: lay.ldab * lay.n + nu]
        v = self.data[lay.ldab * lay.n + nu:]
        return band, u, v


# ----------------------------------------------------------------------
# Assembly
# ----------------------------------------------------------------------

def assemble_operators(mesh: Mesh1D) -> tuple[StencilMatrix, StencilMatrix]:
    """Mass and stiffness matrices on the mesh's canonical layout."""
    rule = mesh.quadrature
    vals, ders = mesh.tables(rule)
    w = rule.weights
    mass_loc = mesh.h * np.einsum("q,qi,qj->ij", w, vals, vals)
    stiff_loc = np.einsum("q,qi,qj->ij", w, ders, ders) / mesh.h
    ne = mesh.num_elements
    lay = mesh._layout
    mass = lay.assemble(np.broadcast_to(mass_loc, (ne,) + mass_loc.shape))
    stiff = lay.assemble(np.broadcast_to(stiff_loc, (ne,) + stiff_loc.shape))
    return StencilMatrix(mesh, mass), StencilMatrix(mesh, stiff)


def assemble_weighted_mass(mesh: Mesh1D, weight: FEFunction) -> StencilMatrix:
    """Matrix of integrals of ``weight * phi_i * phi_j`` for a real FE weight."""
    if weight.mesh is not mesh:
        raise ValueError("weight lives on a different mesh")
    if not weight.is_real:
        raise ValueError("weight must be real-valued")
    wq = mesh.eval_at_quad(weight.coeffs)
    return weighted_mass_from_values(mesh, wq)


def weighted_mass_from_values(mesh: Mesh1D, weight_at_quad: np.ndarray) -> StencilMatrix:
    """Weighted mass matrix from pointwise weight values at the default rule."""
    rule = mesh.quadrature
    vals, _ = mesh.tables(rule)
    local = mesh.h * np.einsum("q,qi,qj,eq->eij", rule.weights, vals, vals,
                               weight_at_quad)
    return StencilMatrix(mesh, mesh._layout.assemble(local))


def l2_project(mesh: Mesh1D, f: Callable[[np.ndarray], np.ndarray]) -> FEFunction:
    """L2 projection of a pointwise-evaluable function onto the FE space."""
    rule = mesh.load_rule()
    pts = mesh.physical_points(rule)
    values = np.asarray(f(pts.ravel())).reshape(pts.shape)
    return FEFunction(mesh, mesh.project_values(values, rule))


# ----------------------------------------------------------------------
# Linear solves
# ----------------------------------------------------------------------

class BandedLU:
    """LU factorization of a StencilMatrix.

    Banded LAPACK factorization plus a rank-2 Woodbury correction for the
    periodic wrap entries.  Falls back to SuperLU when the banded part is
    reported singular (the wrap correction needs an invertible band).
    """

    def __init__(self, matrix: StencilMatrix):
        self.matrix = matrix
        lay = matrix.mesh._layout
        self._n = lay.n
        self._l = lay.halfband
        band, u, v = matrix.band_and_wrap()
        self._splu = None
        work = band.copy(order="F")  # gbtrf factors in place; keep the matrix intact
        gbtrf, gbtrs = get_lapack_funcs(("gbtrf", "gbtrs"), (work,))
        self._gbtrs = gbtrs
        lu, piv, info = gbtrf(work, self._l, self._l, overwrite_ab=1)
        if info != 0:
            self._splu = spla.splu(matrix.tocsc())
            return
        self._lu = lu
        self._piv = piv

        self._rank = 0
        if u.size or v.size:
            # A = A_band + e0 u^T + v e0^T with u, v on the flagged dofs
            n = self._n
            dtype = lu.dtype
            P = np.zeros((n, 2), dtype=dtype)
            Q = np.zeros((n, 2), dtype=dtype)
            P[0, 0] = 1.0
            Q[lay.wrap_u_cols, 0] = u
            P[lay.wrap_v_rows, 1] = v
            Q[0, 1] = 1.0
            Z, info = gbtrs(lu, self._l, self._l, np.asfortranarray(P), piv)
            if info != 0:
                self._splu = spla.splu(matrix.tocsc())
                return
            cap = np.eye(2, dtype=dtype) + Q.T @ Z
            if not np.isfinite(cap).all() or abs(np.linalg.det(cap)) < 1e-300:
                self._splu = spla.splu(matrix.tocsc())
                return
            self._rank = 2
            self._Z = Z
            self._Q = Q
            self._cap = cap

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._splu is not None:
            return self._splu.solve(rhs.astype(self.matrix.data.dtype, copy=False))
        fdtype = self._lu.dtype
        complex_rhs_real_factor = (np.iscomplexobj(rhs)
                                   and not np.iscomplexobj(self._lu))
        if complex_rhs_real_factor:
            cols = np.column_stack([rhs.real, rhs.imag])
        else:
            cols = rhs.astype(fdtype, copy=False).reshape(self._n, -1)
        x, info = self._gbtrs(self._lu, self._l, self._l,
                              np.asfortranarray(cols), self._piv)
        if info != 0:
            raise SolverError(f"banded back-substitution failed (info={info})")
        if self._rank:
            y = self._Q.T @ x
            x = x - self._Z @ np.linalg.solve(self._cap, y)
        if complex_rhs_real_factor:
            return x[:, 0] + 1j * x[:, 1]
        return x[:, 0] if rhs.ndim == 1 else x


def solve_complex_system(matrix: StencilMatrix, rhs: np.ndarray,
                         check: bool = True) -> np.ndarray:
    """Direct solve with a relative-residual guarantee of 1e-12.

    Residuals above the guarantee are attacked by iterative refinement on
    the same factorization.  The measured residual of any double-precision
    solve is bounded below by the rounding floor eps*(|A| |x| + |b|)/|b|;
    where that floor exceeds 1e-12 (possible for badly scaled systems) the
    solve is accepted at the floor, which certifies backward stability.
    """
    lu = BandedLU(matrix)
    x = lu.solve(rhs)
    if check:
        rhs_norm = np.linalg.norm(rhs)
        if rhs_norm == 0.0:
            return np.zeros_like(x)
        norm1 = _matrix_norm1(matrix)
        resid = np.inf
        for attempt in range(4):
            defect = rhs - matrix.matvec(x)
            resid = np.linalg.norm(defect) / rhs_norm
            floor = 64.0 * np.finfo(float).eps \
                * (norm1 * np.linalg.norm(x) + rhs_norm) / rhs_norm
            if resid <= max(1e-12, floor):
                return x
            if attempt < 3:
                x = x + lu.solve(defect)
        cond = _condition_estimate(matrix.tocsc())
        raise SolverError(
            f"linear solve residual {resid:.3e} exceeds 1e-12 "
            f"(1-norm condition estimate {cond:.3e})")
    return x


def _matrix_norm1(matrix: StencilMatrix) -> float:
    csc = matrix.tocsc()
    if csc.nnz == 0:
        return 0.0
    return float(abs(csc).sum(axis=0).max())


def _condition_estimate(csc: sp.csc_matrix) -> float:
    try:
        lu = spla.splu(csc)
        n = csc.shape[0]
        inv = spla.LinearOperator((n, n), matvec=lu.solve, dtype=csc.dtype)
        return spla.onenormest(csc) * spla.onenormest(inv)
    except Exception:
        return np.inf


# ----------------------------------------------------------------------
# Discrete functionals
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class Functionals:
    """Quadrature values of the standard integrals of one FE function."""

    l2_sq: float
    h1_semi_sq: float
    l4_4: float
    weighted_density: float = 0.0   # integral of w |v|^2
    weight_sq: float = 0.0          # integral of w^2


def functionals(v: FEFunction, w: Optional[FEFunction] = None) -> Functionals:
    """L2/H1-seminorm/L4 integrals of ``v`` and, optionally, the weighted
    density integrals against a real weight ``w`` on the same mesh."""
    mesh = v.mesh
    if w is not None and w.mesh is not mesh:
        raise ValueError("weight lives on a different mesh")
    vals = mesh.eval_at_quad(v.coeffs)
    ders = mesh.eval_deriv_at_quad(v.coeffs)
    dens = (vals * vals.conj()).real if np.iscomplexobj(vals) else vals * vals
    dens_d = (ders * ders.conj()).real if np.iscomplexobj(ders) else ders * ders
    l2_sq = mesh.integrate(dens)
    h1 = mesh.integrate(dens_d)
    l4 = mesh.integrate(dens * dens)
    wd = wsq = 0.0
    if w is not None:
        wq = mesh.eval_at_quad(w.coeffs)
        wd = mesh.integrate(wq * dens)
        wsq = mesh.integrate(wq * wq)
    return Functionals(float(l2_sq), float(h1), float(l4), float(wd), float(wsq))
