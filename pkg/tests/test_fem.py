"""FEM core: meshes, quadrature, assembly, projection, solves, functionals."""

import numpy as np
import pytest
from scipy.integrate import quad

from ncnls import fem
from ncnls.errors import ConfigurationError


def identity_on_stencil(mesh):
    lay = mesh._layout
    data = np.zeros(lay.size)
    data[np.arange(lay.n) * lay.ldab + 2 * lay.halfband] = 1.0
    return fem.StencilMatrix(mesh, data)


# ----------------------------------------------------------------------
# mesh construction
# ----------------------------------------------------------------------

def test_mesh_counts_periodic():
    m = fem.build_mesh(-30, 30, 100, 1, "periodic")
    assert m.h == pytest.approx(0.6, rel=1e-15)
    assert m.num_dofs == 100


def test_mesh_counts_dirichlet():
    m = fem.build_mesh(-30, 30, 100, 1, "dirichlet")
    assert m.num_dofs == 99


def test_mesh_counts_cubic():
    m = fem.build_mesh(-30, 30, 6000, 3, "periodic")
    assert m.h == pytest.approx(1e-2, rel=1e-14)
    assert m.num_dofs == 18000


def test_mesh_nodes_uniform():
    m = fem.build_mesh(-1.7, 2.9, 23, 4, "dirichlet")
    widths = np.diff(m.nodes[::4])
    assert np.all(np.diff(m.nodes) > 0)
    assert np.allclose(widths, m.h, rtol=1e-14)


def test_periodic_wraps_connectivity():
    m = fem.build_mesh(0, 1, 5, 2, "periodic")
    assert m.element_dofs[-1, -1] == 0


@pytest.mark.parametrize("bad", [
    dict(a=1.0, b=0.0, num_elements=10),
    dict(a=0.0, b=1.0, num_elements=1),
    dict(a=0.0, b=1.0, num_elements=10, degree=0),
    dict(a=0.0, b=1.0, num_elements=10, degree=6),
    dict(a=0.0, b=1.0, num_elements=10, bc="neumann"),
])
def test_mesh_rejects_bad_input(bad):
    with pytest.raises(ConfigurationError):
        fem.build_mesh(**bad)


# ----------------------------------------------------------------------
# quadrature
# ----------------------------------------------------------------------

@pytest.mark.parametrize("npoints", [1, 2, 3, 5, 7, 11])
def test_gauss_rule_exactness(npoints):
    rule = fem.gauss_rule(npoints)
    assert rule.weights.sum() == pytest.approx(1.0, abs=1e-14)
    for deg in range(rule.exactness + 1):
        val = np.sum(rule.weights * rule.points ** deg)
        assert val == pytest.approx(1.0 / (deg + 1), rel=1e-13)


@pytest.mark.parametrize("degree", [1, 2, 3, 4, 5])
def test_default_rule_covers_quartic_products(degree):
    m = fem.build_mesh(0, 1, 4, degree)
    assert m.quadrature.exactness >= 4 * degree


@pytest.mark.parametrize("degree", [1, 2, 3, 5])
def test_assembly_insensitive_to_extra_quadrature(degree):
    # the default rule is already exact for the polynomial integrands
    m = fem.build_mesh(-2, 3, 9, degree, "periodic")
    B, S = fem.assemble_operators(m)
    rule = fem.gauss_rule(m.quadrature.npoints + 2)
    vals, ders = fem.lagrange_tables(degree, rule.points)
    w = rule.weights
    mass_loc = m.h * np.einsum("q,qi,qj->ij", w, vals, vals)
    stiff_loc = np.einsum("q,qi,qj->ij", w, ders, ders) / m.h
    ne = m.num_elements
    B2 = fem.StencilMatrix(m, m._layout.assemble(
        np.broadcast_to(mass_loc, (ne,) + mass_loc.shape)))
    S2 = fem.StencilMatrix(m, m._layout.assemble(
        np.broadcast_to(stiff_loc, (ne,) + stiff_loc.shape)))
    scale_b = np.abs(B.data).max()
    scale_s = np.abs(S.data).max()
    assert np.abs(B.data - B2.data).max() <= 1e-13 * scale_b
    assert np.abs(S.data - S2.data).max() <= 1e-13 * scale_s


# ----------------------------------------------------------------------
# operator assembly
# ----------------------------------------------------------------------

def test_linear_element_blocks_match_symbolic_values():
    m = fem.build_mesh(0.0, 1.4, 2, 1, "dirichlet")
    h = m.h
    rule = m.quadrature
    vals, ders = m.tables(rule)
    mass_loc = h * np.einsum("q,qi,qj->ij", rule.weights, vals, vals)
    stiff_loc = np.einsum("q,qi,qj->ij", rule.weights, ders, ders) / h
    assert np.abs(mass_loc - h / 6 * np.array([[2, 1], [1, 2]])).max() < 1e-15
    assert np.abs(stiff_loc - 1 / h * np.array([[1, -1], [-1, 1]])).max() < 1e-13


@pytest.mark.parametrize("bc", ["periodic", "dirichlet"])
@pytest.mark.parametrize("degree", [1, 2, 3, 5])
def test_mass_row_sums_partition_of_unity(bc, degree):
    m = fem.build_mesh(-30, 30, 40, degree, bc)
    B = m.mass.toarray()
    assert np.allclose(B, B.T, atol=1e-14)
    # each row sums to the integral of the basis function; the total is b-a
    # minus, under dirichlet, the integrals of the two eliminated functions
    total = B.sum()
    if bc == "periodic":
        assert total == pytest.approx(60.0, rel=1e-13)
    else:
        ones = np.ones(m.num_dofs)
        load = m.load_vector(np.ones((m.num_elements, m.quadrature.npoints)))
        inner = slice(degree, m.num_dofs - degree)  # rows with full support
        assert np.allclose((B @ ones)[inner], load[inner], atol=1e-13)


@pytest.mark.parametrize("degree", [1, 3])
def test_stiffness_periodic_nullspace(degree):
    m = fem.build_mesh(-5, 5, 20, degree, "periodic")
    S = m.stiffness
    ones = np.ones(m.num_dofs)
    assert np.abs(S @ ones).max() == 0.0


def test_mass_positive_definite_stiffness_semidefinite():
    m = fem.build_mesh(0, 2, 8, 2, "periodic")
    B = m.mass.toarray()
    S = m.stiffness.toarray()
    assert np.linalg.eigvalsh(B).min() > 0
    evs = np.linalg.eigvalsh(S)
    assert evs.min() > -1e-12
    assert np.allclose(S, S.T, atol=1e-13)


def test_interior_stencils_agree_across_bc():
    mp = fem.build_mesh(-3, 3, 12, 3, "periodic")
    md = fem.build_mesh(-3, 3, 12, 3, "dirichlet")
    Bp = mp.mass.toarray()
    Bd = md.mass.toarray()
    # periodic dof j+1 corresponds to dirichlet dof j away from the wrap
    inner = slice(4, 20)
    shift = slice(5, 21)
    assert np.allclose(Bp[shift, shift], Bd[inner, inner], atol=1e-14)
    Sp = mp.stiffness.toarray()
    Sd = md.stiffness.toarray()
    assert np.allclose(Sp[shift, shift], Sd[inner, inner], atol=1e-12)


# ----------------------------------------------------------------------
# weighted mass
# ----------------------------------------------------------------------

def test_weighted_mass_weight_one_is_mass():
    m = fem.build_mesh(-2, 2, 10, 2, "periodic")
    w = fem.FEFunction(m, np.ones(m.num_dofs))
    W = fem.assemble_weighted_mass(m, w)
    assert np.abs(W.data - m.mass.data).max() < 1e-14


def test_weighted_mass_weight_zero_is_zero():
    m = fem.build_mesh(-2, 2, 10, 2, "periodic")
    w = fem.FEFunction(m, np.zeros(m.num_dofs))
    W = fem.assemble_weighted_mass(m, w)
    assert np.abs(W.data).max() == 0.0


def test_weighted_mass_hat_function_matches_dense_quadrature():
    m = fem.build_mesh(0, 1, 6, 1, "dirichlet")
    w = fem.FEFunction(m, np.zeros(m.num_dofs))
    w.coeffs[2] = 1.0  # hat at the third interior node
    W = fem.assemble_weighted_mass(m, w).toarray()

    # oracle: dense high-order quadrature of w * phi_i * phi_j per element
    rule = fem.gauss_rule(12)
    vals, _ = fem.lagrange_tables(1, rule.points)
    wq = m.eval_at_quad(w.coeffs, rule)
    dense = np.zeros_like(W)
    for e in range(m.num_elements):
        loc = m.h * np.einsum("q,qi,qj,q->ij", rule.weights, vals, vals, wq[e])
        for i_loc, i in enumerate(m.element_dofs[e]):
            for j_loc, j in enumerate(m.element_dofs[e]):
                if i >= 0 and j >= 0:
                    dense[i, j] += loc[i_loc, j_loc]
    assert np.abs(W - dense).max() < 1e-13


def test_weighted_mass_linear_in_weight():
    rng = np.random.default_rng(7)
    m = fem.build_mesh(-1, 1, 8, 3, "periodic")
    w1 = fem.FEFunction(m, rng.standard_normal(m.num_dofs))
    w2 = fem.FEFunction(m, rng.standard_normal(m.num_dofs))
    a, b = 0.7, -1.3
    combo = fem.FEFunction(m, a * w1.coeffs + b * w2.coeffs)
    left = fem.assemble_weighted_mass(m, combo).data
    right = (a * fem.assemble_weighted_mass(m, w1).data
             + b * fem.assemble_weighted_mass(m, w2).data)
    assert np.abs(left - right).max() < 1e-13 * max(1.0, np.abs(left).max())


def test_weighted_mass_rejects_foreign_mesh():
    m1 = fem.build_mesh(0, 1, 4, 1)
    m2 = fem.build_mesh(0, 1, 4, 1)
    w = fem.FEFunction(m2, np.ones(m2.num_dofs))
    with pytest.raises(ValueError):
        fem.assemble_weighted_mass(m1, w)


# ----------------------------------------------------------------------
# projection
# ----------------------------------------------------------------------

@pytest.mark.parametrize("degree", [1, 2, 3])
def test_projection_reproduces_polynomials(degree):
    m = fem.build_mesh(-1, 2, 9, degree, "dirichlet")
    coef = [0.3, -0.8, 0.25, -0.05, 0.01][: degree + 1]
    f = np.polynomial.Polynomial(coef)
    p = fem.l2_project(m, f)
    x = np.linspace(-1, 2, 500)
    err2 = np.trapezoid(np.abs(m.evaluate(p.coeffs, x) - f(x)) ** 2, x)
    # dirichlet projection only matches where the eliminated dofs don't bite
    interior = (x > -1 + 3 * m.h) & (x < 2 - 3 * m.h)
    err2_int = np.trapezoid(
        np.abs(m.evaluate(p.coeffs, x) - f(x))[interior] ** 2, x[interior])
    assert np.sqrt(err2_int) < 1e-12


def test_projection_idempotent():
    m = fem.build_mesh(-30, 30, 200, 2, "periodic")
    p1 = fem.l2_project(m, lambda x: np.cosh(x) ** -2)
    p2 = fem.l2_project(m, lambda x: m.evaluate(p1.coeffs, x))
    assert np.abs(p1.coeffs - p2.coeffs).max() < 1e-12


def test_projection_orthogonality_against_fine_quadrature():
    # residual f - P_h f must be L2-orthogonal to every basis function
    m = fem.build_mesh(-30, 30, 200, 2, "periodic")  # h = 0.3
    f = lambda x: np.cosh(x) ** -2
    p = fem.l2_project(m, f)
    rule = fem.gauss_rule(16)
    pts = m.physical_points(rule)
    resid_q = f(pts) - m.eval_at_quad(p.coeffs, rule)
    defect = m.load_vector(resid_q, rule)
    assert np.abs(defect).max() < 1e-12


# ----------------------------------------------------------------------
# linear solves
# ----------------------------------------------------------------------

def test_solve_identity():
    m = fem.build_mesh(0, 1, 6, 2, "periodic")
    eye = identity_on_stencil(m)
    rng = np.random.default_rng(1)
    rhs = rng.standard_normal(m.num_dofs) + 1j * rng.standard_normal(m.num_dofs)
    x = fem.solve_complex_system(eye, rhs)
    assert np.abs(x - rhs).max() < 1e-14


@pytest.mark.parametrize("bc", ["periodic", "dirichlet"])
def test_solve_mass_constructed(bc):
    m = fem.build_mesh(-30, 30, 50, 3, bc)
    ones = np.ones(m.num_dofs, dtype=complex)
    x = fem.solve_complex_system(m.mass, m.mass @ ones)
    assert np.abs(x - 1.0).max() < 1e-12


@pytest.mark.parametrize("bc", ["periodic", "dirichlet"])
@pytest.mark.parametrize("degree", [1, 3, 5])
def test_solve_random_banded_dominant(bc, degree):
    rng = np.random.default_rng(degree)
    m = fem.build_mesh(-4, 4, 32, degree, bc)
    w = fem.FEFunction(m, rng.standard_normal(m.num_dofs))
    A = ((3.0 + 0.2j) * m.mass + 0.35j * m.stiffness * m.h
         + 0.1 * fem.assemble_weighted_mass(m, w))
    rhs = rng.standard_normal(m.num_dofs) + 1j * rng.standard_normal(m.num_dofs)
    x = fem.solve_complex_system(A, rhs)
    resid = np.linalg.norm(A @ x - rhs) / np.linalg.norm(rhs)
    assert resid <= 1e-12


def test_solve_zero_rhs():
    m = fem.build_mesh(0, 1, 4, 1)
    x = fem.solve_complex_system(m.mass, np.zeros(m.num_dofs))
    assert np.all(x == 0)


def test_banded_lu_agrees_with_sparse_lu():
    import scipy.sparse.linalg as spla
    rng = np.random.default_rng(3)
    m = fem.build_mesh(-2, 2, 17, 4, "periodic")
    A = m.mass * (1.0 + 0.0j) + 0.05j * m.stiffness * m.h
    rhs = rng.standard_normal(m.num_dofs) + 1j * rng.standard_normal(m.num_dofs)
    x1 = fem.BandedLU(A).solve(rhs)
    x2 = spla.splu(A.tocsc()).solve(rhs)
    assert np.abs(x1 - x2).max() < 1e-11


# ----------------------------------------------------------------------
# functionals
# ----------------------------------------------------------------------

def test_functionals_constant_function():
    m = fem.build_mesh(-30, 30, 40, 2, "periodic")
    fn = fem.functionals(fem.FEFunction(m, np.ones(m.num_dofs)))
    assert fn.l2_sq == pytest.approx(60.0, rel=1e-13)
    assert abs(fn.h1_semi_sq) < 1e-12


def test_functionals_sech_limits():
    m = fem.build_mesh(-30, 30, 1200, 3, "periodic")
    p = fem.l2_project(m, lambda x: 1.0 / np.cosh(x))
    fn = fem.functionals(p)
    l2_oracle = quad(lambda x: np.cosh(x) ** -2, -30, 30, epsabs=1e-13)[0]
    l4_oracle = quad(lambda x: np.cosh(x) ** -4, -30, 30, epsabs=1e-13)[0]
    assert fn.l2_sq == pytest.approx(l2_oracle, rel=1e-9)
    assert fn.l4_4 == pytest.approx(l4_oracle, rel=1e-8)
    assert fn.l2_sq == pytest.approx(2 * np.tanh(30), rel=1e-9)


def test_functionals_match_quadratic_forms():
    rng = np.random.default_rng(11)
    m = fem.build_mesh(-3, 3, 30, 3, "periodic")
    c = rng.standard_normal(m.num_dofs) + 1j * rng.standard_normal(m.num_dofs)
    fn = fem.functionals(fem.FEFunction(m, c))
    l2_form = np.real(np.vdot(c, m.mass @ c))
    h1_form = np.real(np.vdot(c, m.stiffness @ c))
    assert fn.l2_sq == pytest.approx(l2_form, rel=1e-12)
    assert fn.h1_semi_sq == pytest.approx(h1_form, rel=1e-12)


def test_functionals_weighted_parts():
    m = fem.build_mesh(0, 1, 10, 2, "periodic")
    v = fem.FEFunction(m, np.full(m.num_dofs, 2.0 + 0j))
    w = fem.FEFunction(m, np.full(m.num_dofs, 0.5))
    fn = fem.functionals(v, w)
    assert fn.weighted_density == pytest.approx(0.5 * 4.0 * 1.0, rel=1e-13)
    assert fn.weight_sq == pytest.approx(0.25, rel=1e-13)


def test_fefunction_validates_length():
    m = fem.build_mesh(0, 1, 4, 1)
    with pytest.raises(ValueError):
        fem.FEFunction(m, np.zeros(3))


def test_evaluate_is_nodal():
    rng = np.random.default_rng(5)
    m = fem.build_mesh(-1, 1, 10, 3, "periodic")
    c = rng.standard_normal(m.num_dofs)
    vals = m.evaluate(c, m.dof_coords)
    assert np.abs(vals - c).max() < 1e-11
