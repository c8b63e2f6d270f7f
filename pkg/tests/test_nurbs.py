import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nurbstrack.errors import ContractViolationError, DegenerateSurfaceError
from nurbstrack.nurbs import (
    GridBasis,
    KnotVector,
    NurbsSurface,
    SurfaceLayout,
    basis_row,
    basis_rows_with_derivatives,
    eval_basis,
    eval_differentials,
    eval_grid,
    eval_grid_curvature,
    eval_surface,
    gaussian_curvature,
    greville_abscissae,
    tessellate,
)


# --- independent oracles ----------------------------------------------------

def oracle_basis(knots, p, i, t):
    """Plain recursive Cox-de Boor evaluation, closed at the right endpoint."""
    if p == 0:
        if knots[i] <= t < knots[i + 1]:
            return 1.0
        # closed right end: last non-empty span owns t == knots[-1]
        if t == knots[-1] and knots[i] < knots[i + 1] == knots[-1]:
            return 1.0
        return 0.0
    left = 0.0
    if knots[i + p] > knots[i]:
        left = (t - knots[i]) / (knots[i + p] - knots[i]) * oracle_basis(knots, p - 1, i, t)
    right = 0.0
    if knots[i + p + 1] > knots[i + 1]:
        right = (knots[i + p + 1] - t) / (knots[i + p + 1] - knots[i + 1]) * oracle_basis(
            knots, p - 1, i + 1, t
        )
    return left + right


def oracle_surface_point(surf, u, v):
    """Direct double-sum evaluation of the scaled rational formula."""
    nu, nv = surf.weights.shape
    num = np.zeros(3)
    den = 0.0
    for i in range(nu):
        for j in range(nv):
            b = oracle_basis(surf.knots_u.knots, surf.knots_u.degree, i, u) * oracle_basis(
                surf.knots_v.knots, surf.knots_v.degree, j, v
            )
            num += b * surf.weights[i, j] * surf.net[i, j]
            den += b * surf.weights[i, j]
    return surf.scaling * num / den


def random_surface(rng, nu=6, nv=5, pu=3, pv=2, scaling=None):
    net = rng.uniform(-1.0, 1.0, size=(nu, nv, 3)) + np.array([2.0, 0.0, 0.0])
    weights = rng.uniform(0.5, 2.0, size=(nu, nv))
    if scaling is None:
        scaling = rng.uniform(0.5, 2.0, size=3)
    return NurbsSurface(
        net,
        weights,
        KnotVector.clamped_uniform(nu, pu),
        KnotVector.clamped_uniform(nv, pv),
        scaling,
    )


def sphere_octant(radius=1.0):
    """Exact rational biquadratic octant of a sphere (tensor product of arcs)."""
    s = 1.0 / np.sqrt(2.0)
    arc = [(1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]  # quarter circle control polygon
    net = np.zeros((3, 3, 3))
    for i, (cx, cy) in enumerate(arc):
        net[i, 0] = (cx, cy, 0.0)
        net[i, 1] = (cx, cy, 1.0)
        net[i, 2] = (0.0, 0.0, 1.0)
    net *= radius
    w1d = np.array([1.0, s, 1.0])
    weights = np.outer(w1d, w1d)
    kv = KnotVector(np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0]), 2)
    return NurbsSurface(net, weights, kv, kv)


# --- eval_basis -------------------------------------------------------------

def test_basis_clamped_endpoint_interpolation():
    kv = KnotVector.clamped_uniform(6, 3)
    assert eval_basis(kv, 0, 0.0) == 1.0
    assert eval_basis(kv, 5, 1.0) == 1.0


def test_basis_partition_of_unity_cubic():
    kv = KnotVector.clamped_uniform(7, 3)
    t = np.linspace(0.0, 1.0, 257)
    rows = basis_row(kv, t)
    assert np.all(rows >= 0)
    np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-13)


def test_basis_matches_recursion_oracle_quadratic():
    # clamped quadratic, uniform interior knots, 5 basis functions
    kv = KnotVector.clamped_uniform(5, 2)
    expected = [oracle_basis(kv.knots, 2, i, 0.5) for i in range(5)]
    got = [eval_basis(kv, i, 0.5) for i in range(5)]
    np.testing.assert_allclose(got, expected, atol=1e-14)
    assert abs(sum(expected) - 1.0) < 1e-14


@pytest.mark.parametrize("n,p", [(4, 1), (5, 2), (7, 3), (9, 4)])
def test_basis_matches_recursion_oracle_grid(n, p):
    kv = KnotVector.clamped_uniform(n, p)
    for t in np.linspace(0.0, 1.0, 23):
        want = [oracle_basis(kv.knots, p, i, t) for i in range(n)]
        np.testing.assert_allclose(basis_row(kv, np.asarray([t]))[0], want, atol=1e-13)


def test_basis_index_out_of_range():
    kv = KnotVector.clamped_uniform(5, 2)
    with pytest.raises(ContractViolationError):
        eval_basis(kv, 5, 0.5)
    with pytest.raises(ContractViolationError):
        eval_basis(kv, -1, 0.5)


def test_basis_local_support():
    kv = KnotVector.clamped_uniform(8, 3)
    t = np.linspace(0, 1, 401)
    rows = basis_row(kv, t)
    for i in range(8):
        lo, hi = kv.knots[i], kv.knots[i + 3 + 1]
        outside = (t < lo) | (t > hi)
        assert np.all(rows[outside, i] == 0.0)


def test_basis_derivatives_match_finite_differences():
    kv = KnotVector.clamped_uniform(7, 3)
    t = np.linspace(0.02, 0.98, 31)
    h = 1e-6
    vals, d1, d2 = basis_rows_with_derivatives(kv, t)
    fd1 = (basis_row(kv, t + h) - basis_row(kv, t - h)) / (2 * h)
    fd2 = (basis_row(kv, t + h) - 2 * vals + basis_row(kv, t - h)) / h**2
    np.testing.assert_allclose(d1, fd1, atol=1e-5)
    np.testing.assert_allclose(d2, fd2, atol=2e-3)
    # derivative rows of a partition of unity sum to zero
    np.testing.assert_allclose(d1.sum(axis=1), 0.0, atol=1e-9)
    np.testing.assert_allclose(d2.sum(axis=1), 0.0, atol=1e-7)


# --- eval_surface -----------------------------------------------------------

def test_surface_planar_net_stays_planar():
    rng = np.random.default_rng(0)
    net = rng.uniform(-1, 1, size=(5, 4, 3))
    net[:, :, 2] = 0.0
    surf = NurbsSurface(
        net, np.ones((5, 4)),
        KnotVector.clamped_uniform(5, 2), KnotVector.clamped_uniform(4, 2),
    )
    for u in np.linspace(0, 1, 7):
        for v in np.linspace(0, 1, 7):
            assert abs(eval_surface(surf, u, v)[2]) < 1e-14


def test_surface_scaling_doubles_x():
    rng = np.random.default_rng(1)
    surf = random_surface(rng, scaling=np.ones(3))
    surf2 = surf.with_shape(scaling=np.array([2.0, 1.0, 1.0]))
    p1 = eval_surface(surf, 0.37, 0.61)
    p2 = eval_surface(surf2, 0.37, 0.61)
    np.testing.assert_allclose(p2, p1 * np.array([2.0, 1.0, 1.0]), rtol=1e-14)


def test_surface_matches_double_sum_oracle():
    rng = np.random.default_rng(42)
    surf = random_surface(rng, nu=6, nv=5)
    got = eval_surface(surf, 0.3, 0.7)
    want = oracle_surface_point(surf, 0.3, 0.7)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_surface_unit_weights_equal_plain_bspline():
    rng = np.random.default_rng(3)
    surf = random_surface(rng, scaling=np.ones(3))
    flat = surf.with_shape(weights=np.ones_like(surf.weights))
    for u, v in rng.uniform(0, 1, size=(20, 2)):
        bu = basis_row(flat.knots_u, np.asarray([u]))[0]
        bv = basis_row(flat.knots_v, np.asarray([v]))[0]
        plain = np.einsum("i,j,ijc->c", bu, bv, flat.net)
        np.testing.assert_allclose(eval_surface(flat, u, v), plain, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(0.0, 1.0),
    st.floats(0.0, 1.0),
    st.integers(0, 2**31 - 1),
)
def test_surface_grid_matches_pointwise(u, v, seed):
    rng = np.random.default_rng(seed)
    surf = random_surface(rng)
    basis = GridBasis.build(surf, np.asarray([u]), np.asarray([v]))
    grid = eval_grid(basis, surf.net, surf.weights, surf.scaling)
    np.testing.assert_allclose(grid[0, 0], eval_surface(surf, u, v), atol=1e-12)


# --- eval_differentials -----------------------------------------------------

def test_differentials_flat_surface_zero_second_form():
    net = np.zeros((5, 4, 3))
    xs = np.linspace(0, 2, 5)
    ys = np.linspace(0, 1, 4)
    net[:, :, 0] = xs[:, None]
    net[:, :, 1] = ys[None, :]
    surf = NurbsSurface(
        net, np.ones((5, 4)),
        KnotVector.clamped_uniform(5, 2), KnotVector.clamped_uniform(4, 2),
    )
    d = eval_differentials(surf, 0.4, 0.6)
    np.testing.assert_allclose(d.second_form, 0.0, atol=1e-10)
    assert gaussian_curvature(d) == pytest.approx(0.0, abs=1e-10)


def test_differentials_normal_orthogonality():
    rng = np.random.default_rng(7)
    surf = random_surface(rng)
    for u, v in rng.uniform(0.05, 0.95, size=(10, 2)):
        d = eval_differentials(surf, u, v)
        if d.degenerate:
            continue
        assert abs(d.normal @ d.du) < 1e-9
        assert abs(d.normal @ d.dv) < 1e-9
        assert np.linalg.norm(d.normal) == pytest.approx(1.0, abs=1e-12)


def test_differentials_match_finite_differences():
    rng = np.random.default_rng(11)
    surf = random_surface(rng)
    h = 1e-6
    for u, v in rng.uniform(0.05, 0.95, size=(12, 2)):
        d = eval_differentials(surf, u, v)
        fd_u = (eval_surface(surf, u + h, v) - eval_surface(surf, u - h, v)) / (2 * h)
        fd_v = (eval_surface(surf, u, v + h) - eval_surface(surf, u, v - h)) / (2 * h)
        np.testing.assert_allclose(d.du, fd_u, rtol=1e-4, atol=1e-7)
        np.testing.assert_allclose(d.dv, fd_v, rtol=1e-4, atol=1e-7)
        fd_uu = (
            eval_surface(surf, u + h, v) - 2 * eval_surface(surf, u, v) + eval_surface(surf, u - h, v)
        ) / h**2
        fd_vv = (
            eval_surface(surf, u, v + h) - 2 * eval_surface(surf, u, v) + eval_surface(surf, u, v - h)
        ) / h**2
        np.testing.assert_allclose(d.duu, fd_uu, rtol=1e-3, atol=5e-3)
        np.testing.assert_allclose(d.dvv, fd_vv, rtol=1e-3, atol=5e-3)


def test_first_form_determinant_is_lagrange_identity():
    rng = np.random.default_rng(13)
    surf = random_surface(rng)
    for u, v in rng.uniform(0.05, 0.95, size=(10, 2)):
        d = eval_differentials(surf, u, v)
        det = np.linalg.det(d.first_form)
        cross_sq = np.linalg.norm(np.cross(d.du, d.dv)) ** 2
        assert det >= -1e-12
        np.testing.assert_allclose(det, cross_sq, rtol=1e-9, atol=1e-9)


# --- gaussian_curvature -----------------------------------------------------

def test_curvature_sphere_octant():
    r = 2.0
    surf = sphere_octant(r)
    for u, v in np.random.default_rng(17).uniform(0.1, 0.9, size=(25, 2)):
        d = eval_differentials(surf, u, v)
        # sanity: point lies on the sphere
        assert np.linalg.norm(d.position) == pytest.approx(r, abs=1e-12)
        assert gaussian_curvature(d) == pytest.approx(1.0 / r**2, rel=0.02)


def test_curvature_cylinder_patch_is_zero():
    # quarter-circle arc extruded linearly in v: developable, K = 0
    s = 1.0 / np.sqrt(2.0)
    arc = np.array([(1.0, 0.0), (1.0, 1.0), (0.0, 1.0)])
    net = np.zeros((3, 2, 3))
    net[:, 0, :2] = arc
    net[:, 1, :2] = arc
    net[:, 1, 2] = 3.0
    weights = np.outer([1.0, s, 1.0], [1.0, 1.0])
    surf = NurbsSurface(
        net, weights,
        KnotVector(np.array([0, 0, 0, 1, 1, 1.0]), 2),
        KnotVector(np.array([0, 0, 1, 1.0]), 1),
    )
    for u, v in np.random.default_rng(19).uniform(0.1, 0.9, size=(10, 2)):
        assert abs(gaussian_curvature(eval_differentials(surf, u, v))) < 1e-6


def test_curvature_invariant_under_uniform_weight_scaling():
    rng = np.random.default_rng(23)
    surf = random_surface(rng)
    scaled = surf.with_shape(weights=surf.weights * 3.7)
    for u, v in rng.uniform(0.1, 0.9, size=(8, 2)):
        k1 = gaussian_curvature(eval_differentials(surf, u, v))
        k2 = gaussian_curvature(eval_differentials(scaled, u, v))
        np.testing.assert_allclose(k1, k2, rtol=1e-9, atol=1e-9)


def test_curvature_degenerate_raises():
    # collapsed net row makes du x dv vanish at v=1
    surf = sphere_octant(1.0)
    d = eval_differentials(surf, 0.5, 1.0)
    assert d.degenerate
    with pytest.raises(DegenerateSurfaceError):
        gaussian_curvature(d)


def test_grid_curvature_matches_pointwise():
    surf = sphere_octant(2.0)
    us = np.linspace(0.1, 0.9, 5)
    vs = np.linspace(0.1, 0.9, 4)
    basis = GridBasis.build(surf, us, vs, derivs=True)
    grid_k = eval_grid_curvature(basis, surf.net, surf.weights, surf.scaling)
    for a, u in enumerate(us):
        for b, v in enumerate(vs):
            want = gaussian_curvature(eval_differentials(surf, u, v))
            np.testing.assert_allclose(grid_k[a, b], want, rtol=1e-9)


# --- knots / layout / misc --------------------------------------------------

def test_knot_vector_invariants():
    kv = KnotVector.clamped_uniform(8, 3)
    assert kv.knots.size == 8 + 3 + 1
    assert kv.num_basis == 8
    with pytest.raises(ContractViolationError):
        KnotVector(np.array([0, 0, 0.5, 0.4, 1, 1.0]), 1)
    with pytest.raises(ContractViolationError):
        KnotVector(np.array([0, 0.1, 0.5, 1, 1.0, 1.0]), 1)


def test_greville_abscissae_endpoints():
    kv = KnotVector.clamped_uniform(7, 3)
    g = greville_abscissae(kv)
    assert g[0] == 0.0
    assert g[-1] == 1.0
    assert np.all(np.diff(g) > 0)


def test_layout_expand_columns_wraps():
    lay = SurfaceLayout(n_u=5, n_v=3, degree_u=2, degree_v=2, closed_u=True)
    distinct = np.arange(lay.num_weight_params, dtype=float).reshape(
        lay.num_distinct_cols, lay.num_rows
    )
    full = lay.expand_columns(distinct)
    assert full.shape == (lay.num_cols, lay.num_rows)
    np.testing.assert_array_equal(full[-1], full[0])


def test_surface_invariant_validation():
    rng = np.random.default_rng(29)
    surf = random_surface(rng)
    with pytest.raises(ContractViolationError):
        surf.with_shape(weights=-surf.weights)
    with pytest.raises(ContractViolationError):
        surf.with_shape(scaling=np.array([1.0, 0.0, 1.0]))


def test_tessellate_counts_and_scaling():
    surf = sphere_octant(1.0)
    verts, faces = tessellate(surf, 9, 7)
    assert verts.shape == (63, 3)
    assert faces.shape == (2 * 8 * 6, 3)
    wide = surf.with_shape(scaling=np.array([2.0, 1.0, 1.0]))
    verts2, _ = tessellate(wide, 9, 7)
    span = verts[:, 0].max() - verts[:, 0].min()
    span2 = verts2[:, 0].max() - verts2[:, 0].min()
    assert span2 == pytest.approx(2 * span, rel=1e-12)
