import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from saapde.errors import DegenerateTriangle, NonpositiveCoefficient, SpaceMismatch
from saapde.mesh_fem import (
    Grid1D,
    Mesh2D,
    assemble_1d,
    assemble_2d,
    assemble_2d_boundary_like,
    export_matrix_market,
    friedrichs_constant,
    operator_norm_power,
    trace_adjoint_apply,
    trace_apply,
    trace_constant,
    trace_matrix,
    weighted_boundary_mass,
    weighted_mass,
    weighted_stiffness,
)


def p1_min_eigenvalue(n):
    # closed form for the P1 pencil (tridiag(-1,2,-1)/h, h/6 tridiag(1,4,1))
    h = 1.0 / (n + 1)
    c = np.cos(np.pi * h)
    return 6.0 / h**2 * (1 - c) / (2 + c)


def test_grid_width():
    g = Grid1D(7)
    assert g.h * 8 == 1.0
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 1.0
    with pytest.raises(ValueError):
        Grid1D(0)


def test_1d_hand_assembly():
    s = assemble_1d(Grid1D(3), "H01")
    np.testing.assert_array_equal(s.stiffness.diagonal(), [8.0, 8.0, 8.0])
    np.testing.assert_allclose(s.stiffness.toarray(), 4.0 * np.array([[2, -1, 0], [-1, 2, -1], [0, -1, 2]]))
    full = assemble_1d(Grid1D(3), "H1")
    np.testing.assert_allclose(np.asarray(full.mass.sum(axis=1)).ravel()[1:-1], 0.25)
    np.testing.assert_array_equal(assemble_1d(Grid1D(1), "H01").stiffness.toarray(), [[4.0]])


def test_2d_totals():
    one = assemble_2d(Mesh2D.unit_square(1), "H1")
    assert one.mass.sum() == pytest.approx(1.0, abs=1e-15)
    s = assemble_2d(Mesh2D.unit_square(6), "H1")
    assert s.mass.sum() == pytest.approx(1.0, abs=1e-14)
    assert s.boundary_mass.sum() == pytest.approx(4.0, abs=1e-13)
    assert np.abs(s.stiffness @ np.ones(s.dim)).max() < 1e-13


def test_mesh_orientation_and_boundary_loop():
    m = Mesh2D.unit_square(5)
    assert np.all(m.signed_areas() > 0)
    e = m.boundary_edges
    assert np.array_equal(e[1:, 0], e[:-1, 1]) and e[-1, 1] == e[0, 0]
    # counterclockwise loop: shoelace area of the boundary polygon is +1
    p = m.nodes[e[:, 0]]
    area = 0.5 * np.sum(p[:, 0] * np.roll(p[:, 1], -1) - np.roll(p[:, 0], -1) * p[:, 1])
    assert area == pytest.approx(1.0)


def test_degenerate_triangle():
    m = Mesh2D.unit_square(2)
    bad = Mesh2D(m.nodes, m.triangles[:, [0, 2, 1]], m.boundary_edges)
    with pytest.raises(DegenerateTriangle):
        assemble_2d(bad, "H1")


@pytest.mark.parametrize("kind", ["H1", "H01", "L2_domain", "L2_boundary"])
def test_mass_spd_and_norm_consistency(kind):
    s = assemble_2d(Mesh2D.unit_square(5), kind)
    scipy.linalg.cholesky(s.mass.toarray())
    v = np.random.default_rng(0).standard_normal(s.dim)
    direct = sum(v[i] * s.mass[i, j] * v[j] for i, j in zip(*s.mass.nonzero()))
    assert s.l2_norm(v) ** 2 == pytest.approx(direct, rel=1e-14)
    np.testing.assert_allclose(s.stiffness.toarray(), s.stiffness.toarray().T)


def test_h01_stiffness_spd():
    scipy.linalg.cholesky(assemble_2d(Mesh2D.unit_square(5), "H01").stiffness.toarray())
    scipy.linalg.cholesky(assemble_1d(Grid1D(9), "H01").stiffness.toarray())


def test_weighted_forms():
    s = assemble_1d(Grid1D(3), "H01")
    ne = s.layout.n_elements
    assert (weighted_stiffness(s, np.ones(ne)) != s.stiffness).nnz == 0
    np.testing.assert_array_equal(weighted_stiffness(s, 2.0).toarray(), 2 * s.stiffness.toarray())
    np.testing.assert_array_equal(weighted_mass(s, 1.0).toarray(), s.mass.toarray())
    # halves of (0,1) with coefficients 1 and 3; elements are [0,h],[h,2h],[2h,3h],[3h,1]
    k = weighted_stiffness(s, [1.0, 1.0, 3.0, 3.0]).toarray()
    hand = 4.0 * np.array([[1 + 1, -1, 0], [-1, 1 + 3, -3], [0, -3, 3 + 3]])
    np.testing.assert_allclose(k, hand)
    with pytest.raises(NonpositiveCoefficient):
        weighted_stiffness(s, [1.0, 0.0, 1.0, 1.0])
    with pytest.raises(SpaceMismatch):
        weighted_stiffness(s, [1.0, 1.0])


def test_weighted_boundary_mass():
    s = assemble_2d(Mesh2D.unit_square(4), "H1")
    nb = len(s.layout.boundary_edges)
    assert weighted_boundary_mass(s, np.full(nb, 0.5)).sum() == pytest.approx(2.0)
    assert abs(weighted_boundary_mass(s, np.zeros(nb))).sum() == 0.0
    with pytest.raises(NonpositiveCoefficient):
        weighted_boundary_mass(s, np.full(nb, -1.0))


def test_friedrichs_examples():
    c = friedrichs_constant(assemble_1d(Grid1D(127), "H01"))
    assert 0.3181 <= c <= 0.3185
    assert c == pytest.approx(1 / np.sqrt(p1_min_eigenvalue(127)), rel=1e-12)
    # single dof: sqrt(mass / stiffness) with h = 1/2
    assert friedrichs_constant(assemble_1d(Grid1D(1), "H01")) == pytest.approx(np.sqrt((0.5 / 6 * 4) / 4.0))
    with pytest.raises(SpaceMismatch):
        friedrichs_constant(assemble_1d(Grid1D(3), "H1"))


def test_friedrichs_scale_invariance():
    s = assemble_1d(Grid1D(20), "H01")
    scaled = type(s)(s.layout, s.kind, s.dofs, 2 * s.mass, 2 * s.stiffness)
    assert friedrichs_constant(scaled) == pytest.approx(friedrichs_constant(s), rel=1e-13)


def test_friedrichs_sparse_branch_matches_dense():
    n = 2600  # above the dense cutoff
    assert friedrichs_constant(assemble_1d(Grid1D(n), "H01")) == pytest.approx(
        1 / np.sqrt(p1_min_eigenvalue(n)), rel=1e-9)


def test_friedrichs_2d_below_continuum():
    # continuum constant of the unit square is 1/(pi sqrt 2); P1 overestimates lambda
    c = friedrichs_constant(assemble_2d(Mesh2D.unit_square(16), "H01"))
    assert c < 1 / (np.pi * np.sqrt(2)) and c == pytest.approx(1 / (np.pi * np.sqrt(2)), rel=0.01)


def test_trace_examples():
    s = assemble_2d(Mesh2D.unit_square(4), "H1")
    b = assemble_2d_boundary_like(s)
    np.testing.assert_array_equal(trace_apply(s, np.ones(s.dim), b).coeffs, np.ones(b.dim))
    y = np.random.default_rng(1).standard_normal(s.dim)
    y[b.dofs] = 0.0
    assert not np.any(trace_apply(s, y, b).coeffs)
    with pytest.raises(SpaceMismatch):
        trace_apply(assemble_1d(Grid1D(3), "H1"), np.ones(5))


def test_trace_adjoint_identity():
    s = assemble_2d(Mesh2D.unit_square(5), "H1")
    b = assemble_2d_boundary_like(s)
    rng = np.random.default_rng(2)
    for _ in range(100):
        w, y = rng.standard_normal(b.dim), rng.standard_normal(s.dim)
        lhs = trace_adjoint_apply(s, w, b) @ y
        rhs = b.inner(w, trace_apply(s, y, b).coeffs)
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_trace_constant_power_iteration_oracle():
    s = assemble_2d(Mesh2D.unit_square(6), "H1")
    b = assemble_2d_boundary_like(s)
    t = trace_matrix(s, b)
    # adjoint of T: boundary L2 -> H1 with respect to the H1 inner product
    h1_inner = lambda p, q: float(p @ (s.norm_matrix @ q))  # noqa: E731
    est = operator_norm_power(lambda x: t @ x, lambda w: s.riesz(t.T @ (b.mass @ w)), s.dim,
                              inner=h1_inner)
    c = trace_constant(s, b)
    assert est == pytest.approx(c, rel=1e-6)
    rng = np.random.default_rng(3)
    for _ in range(50):
        y = rng.standard_normal(s.dim)
        assert b.l2_norm(t @ y) <= c * s.h1_norm(y) * (1 + 1e-12)


def test_export_matrix_market(tmp_path):
    paths = export_matrix_market(assemble_2d(Mesh2D.unit_square(2), "H1"), tmp_path)
    assert len(paths) == 3
    import scipy.io
    m = scipy.io.mmread(paths[0])
    assert m.shape == (9, 9)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=200))
def test_friedrichs_matches_closed_form(n):
    assert friedrichs_constant(assemble_1d(Grid1D(n), "H01")) == pytest.approx(
        1 / np.sqrt(p1_min_eigenvalue(n)), rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=12), st.integers(min_value=0, max_value=2**32 - 1))
def test_2d_mass_partition_of_unity(n, seed):
    s = assemble_2d(Mesh2D.unit_square(n), "H1")
    c = np.random.default_rng(seed).uniform(0.1, 5.0, s.layout.n_elements)
    # integral of the piecewise constant coefficient = sum of weighted mass entries
    areas = np.full(s.layout.n_elements, 0.5 / n**2)
    assert weighted_mass(s, c).sum() == pytest.approx(float(c @ areas), rel=1e-12)
    assert np.abs(weighted_stiffness(s, c) @ np.ones(s.dim)).max() < 1e-11 * c.max() * n**2
