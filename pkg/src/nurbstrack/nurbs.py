"""B-spline basis evaluation and NURBS surface geometry.

Surfaces are rational tensor products over a rectangular control net with an
extra per-axis Cartesian scaling applied to the evaluated point:

    S(u, v) = scale * (sum_ij Nu_i(u) Nv_j(v) w_ij P_ij) / (sum_ij Nu_i(u) Nv_j(v) w_ij)

All evaluation is clamped to the unit parameter square.  Derivatives are
analytic (basis derivative recursion plus quotient rule), not finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError, DegenerateSurfaceError, InvalidLayoutError

# Below this tangent-cross-product norm the tangent plane is degenerate.
DEGENERATE_TANGENT_TOL = 1e-9


@dataclass(frozen=True)
class KnotVector:
    """Clamped non-decreasing knot sequence on [0, 1]."""

    knots: np.ndarray
    degree: int

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", knots)
        p = self.degree
        if p < 0:
            raise ContractViolationError("degree must be non-negative")
        if knots.ndim != 1 or knots.size < 2 * (p + 1):
            raise ContractViolationError("knot vector too short for degree")
        if np.any(np.diff(knots) < 0):
            raise ContractViolationError("knot vector must be non-decreasing")
        if not (np.all(knots[: p + 1] == 0.0) and np.all(knots[-(p + 1):] == 1.0)):
            raise ContractViolationError("knot vector must be clamped to [0, 1]")

    @property
    def num_basis(self) -> int:
        """Number of basis functions (control points) this vector supports."""
        return self.knots.size - self.degree - 1

    @staticmethod
    def clamped_uniform(num_ctrl: int, degree: int) -> "KnotVector":
        """Clamped vector with uniformly spaced interior knots."""
        if num_ctrl < degree + 1:
            raise ContractViolationError(
                f"need at least degree+1={degree + 1} control points, got {num_ctrl}"
            )
        n_interior = num_ctrl - degree - 1
        interior = np.arange(1, n_interior + 1) / (n_interior + 1)
        knots = np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])
        return KnotVector(knots, degree)


def eval_basis(kv: KnotVector, i: int, t: float) -> float:
    """Single B-spline basis value N_{i,degree}(t) by the Cox-de Boor recursion.

    The half-open support convention is closed on the right so the last basis
    function evaluates to 1 at t=1.
    """
    if not 0 <= i < kv.num_basis:
        raise ContractViolationError(f"basis index {i} out of range [0, {kv.num_basis})")
    if not 0.0 <= t <= 1.0:
        raise ContractViolationError("parameter must lie in [0, 1]")
    return float(basis_row(kv, np.asarray([t]))[0, i])


def basis_row(kv: KnotVector, t: np.ndarray) -> np.ndarray:
    """All basis values N_{i,p}(t): shape (len(t), num_basis)."""
    return _basis_table(kv.knots, kv.degree, np.asarray(t, dtype=float))[0]


def basis_rows_with_derivatives(kv: KnotVector, t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Basis values plus first and second derivatives, each (len(t), num_basis)."""
    return _basis_table(kv.knots, kv.degree, np.asarray(t, dtype=float), derivs=2)


def _degree_zero(knots: np.ndarray, t: np.ndarray) -> np.ndarray:
    # Half-open spans [k_i, k_{i+1}), except the last non-empty span which is
    # closed so that t = 1 is covered.
    lo = knots[:-1]
    hi = knots[1:]
    n0 = ((t[:, None] >= lo[None, :]) & (t[:, None] < hi[None, :])).astype(float)
    last = np.flatnonzero(hi > lo)
    if last.size:
        n0[t == knots[-1], last[-1]] = 1.0
    return n0


def _basis_table(knots: np.ndarray, degree: int, t: np.ndarray, derivs: int = 0):
    """Cox-de Boor triangle, vectorized over t; optionally first/second derivatives."""
    rows = {0: _degree_zero(knots, t)}
    for d in range(1, degree + 1):
        prev = rows[d - 1]
        n = knots.size - d - 1
        left_den = knots[d:d + n] - knots[:n]
        right_den = knots[d + 1:d + 1 + n] - knots[1:1 + n]
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(left_den > 0, (t[:, None] - knots[:n]) / left_den, 0.0)
            b = np.where(right_den > 0, (knots[d + 1:d + 1 + n] - t[:, None]) / right_den, 0.0)
        rows[d] = a * prev[:, :n] + b * prev[:, 1:n + 1]
        if d < degree - 1:
            del rows[d - 1]
    if derivs == 0:
        return (rows[degree],)

    def derivative_of(lower: np.ndarray, d: int) -> np.ndarray:
        # d/dt N_{i,d} from the degree d-1 row.
        n = knots.size - d - 1
        left_den = knots[d:d + n] - knots[:n]
        right_den = knots[d + 1:d + 1 + n] - knots[1:1 + n]
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(left_den > 0, d / left_den, 0.0)
            b = np.where(right_den > 0, d / right_den, 0.0)
        return a * lower[:, :n] - b * lower[:, 1:n + 1]

    num = knots.size - degree - 1
    if degree >= 1:
        d1 = derivative_of(rows[degree - 1], degree)
    else:
        d1 = np.zeros((t.size, num))
    if degree >= 2:
        d_lower = derivative_of(rows[degree - 2], degree - 1)
        d2 = derivative_of(d_lower, degree)
    else:
        d2 = np.zeros((t.size, num))
    return rows[degree], d1, d2


@dataclass(frozen=True)
class SurfaceLayout:
    """Control net size, degrees, and u-closure of a surface family.

    The net has (n_u + 1) x (n_v + 1) control points.  When closed in u the
    last control column duplicates the first one, so the clamped surface is
    watertight around the ring and the duplicated column shares one parameter
    per row with column zero.
    """

    n_u: int
    n_v: int
    degree_u: int
    degree_v: int
    closed_u: bool = True

    def __post_init__(self):
        if self.n_u < self.degree_u or self.n_v < self.degree_v:
            raise InvalidLayoutError("control net smaller than the surface degree")
        if self.closed_u and self.n_u < 2:
            raise InvalidLayoutError("closing the u ring needs at least 3 control columns")

    @property
    def num_cols(self) -> int:
        return self.n_u + 1

    @property
    def num_rows(self) -> int:
        return self.n_v + 1

    @property
    def num_distinct_cols(self) -> int:
        return self.n_u if self.closed_u else self.n_u + 1

    @property
    def num_weight_params(self) -> int:
        return self.num_distinct_cols * self.num_rows

    def knots_u(self) -> KnotVector:
        return KnotVector.clamped_uniform(self.num_cols, self.degree_u)

    def knots_v(self) -> KnotVector:
        return KnotVector.clamped_uniform(self.num_rows, self.degree_v)

    def expand_columns(self, distinct: np.ndarray) -> np.ndarray:
        """Map per-distinct-column values (..., distinct, rows) onto the full net."""
        arr = np.asarray(distinct)
        if arr.shape[-2:] != (self.num_distinct_cols, self.num_rows):
            raise ContractViolationError("distinct weight grid has the wrong shape")
        if not self.closed_u:
            return arr
        return np.concatenate([arr, arr[..., :1, :]], axis=-2)


@dataclass(frozen=True)
class NurbsSurface:
    """Rational tensor-product surface with per-axis Cartesian scaling."""

    net: np.ndarray           # (n_u+1, n_v+1, 3) control points, meters
    weights: np.ndarray       # (n_u+1, n_v+1) positive weights
    knots_u: KnotVector
    knots_v: KnotVector
    scaling: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        net = np.asarray(self.net, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        scaling = np.asarray(self.scaling, dtype=float)
        object.__setattr__(self, "net", net)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "scaling", scaling)
        if net.ndim != 3 or net.shape[2] != 3:
            raise ContractViolationError("control net must have shape (nu+1, nv+1, 3)")
        if weights.shape != net.shape[:2]:
            raise ContractViolationError("weight grid shape must match the control net")
        if np.any(weights <= 0):
            raise ContractViolationError("all weights must be positive")
        if scaling.shape != (3,) or np.any(scaling <= 0):
            raise ContractViolationError("scaling must be a positive 3-vector")
        if self.knots_u.num_basis != net.shape[0] or self.knots_v.num_basis != net.shape[1]:
            raise ContractViolationError("knot vector lengths inconsistent with the net")

    def with_shape(self, scaling=None, weights=None) -> "NurbsSurface":
        return NurbsSurface(
            self.net,
            self.weights if weights is None else weights,
            self.knots_u,
            self.knots_v,
            self.scaling if scaling is None else np.asarray(scaling, dtype=float),
        )


@dataclass(frozen=True)
class SurfaceDifferentials:
    """Point, first/second partials, unit normal, and fundamental forms."""

    position: np.ndarray
    du: np.ndarray
    dv: np.ndarray
    duu: np.ndarray
    duv: np.ndarray
    dvv: np.ndarray
    normal: np.ndarray
    first_form: np.ndarray
    second_form: np.ndarray
    degenerate: bool


def eval_surface(surf: NurbsSurface, u: float, v: float) -> np.ndarray:
    """Scaled rational surface point at (u, v)."""
    bu = basis_row(surf.knots_u, np.asarray([u]))[0]
    bv = basis_row(surf.knots_v, np.asarray([v]))[0]
    wb = surf.weights * bu[:, None] * bv[None, :]
    den = wb.sum()
    num = (wb[:, :, None] * surf.net).sum(axis=(0, 1))
    return surf.scaling * (num / den)


def eval_differentials(surf: NurbsSurface, u: float, v: float) -> SurfaceDifferentials:
    """Analytic partials, normal and fundamental forms at (u, v).

    Quotient rule applied to the weighted numerator/denominator sums; scaling
    is componentwise so it distributes onto every derivative.
    """
    bu, dbu, ddbu = (r[0] for r in basis_rows_with_derivatives(surf.knots_u, np.asarray([u])))
    bv, dbv, ddbv = (r[0] for r in basis_rows_with_derivatives(surf.knots_v, np.asarray([v])))

    def combo(fu, fv):
        wb = surf.weights * fu[:, None] * fv[None, :]
        return (wb[:, :, None] * surf.net).sum(axis=(0, 1)), wb.sum()

    a, d = combo(bu, bv)
    a_u, d_u = combo(dbu, bv)
    a_v, d_v = combo(bu, dbv)
    a_uu, d_uu = combo(ddbu, bv)
    a_uv, d_uv = combo(dbu, dbv)
    a_vv, d_vv = combo(bu, ddbv)

    c = a / d
    c_u = (a_u - c * d_u) / d
    c_v = (a_v - c * d_v) / d
    c_uu = (a_uu - 2.0 * c_u * d_u - c * d_uu) / d
    c_uv = (a_uv - c_u * d_v - c_v * d_u - c * d_uv) / d
    c_vv = (a_vv - 2.0 * c_v * d_v - c * d_vv) / d

    s = surf.scaling
    pos, du, dv = s * c, s * c_u, s * c_v
    duu, duv, dvv = s * c_uu, s * c_uv, s * c_vv

    cross = np.cross(du, dv)
    cross_norm = float(np.linalg.norm(cross))
    degenerate = cross_norm < DEGENERATE_TANGENT_TOL
    normal = cross / cross_norm if not degenerate else np.zeros(3)
    first = np.array([[du @ du, du @ dv], [du @ dv, dv @ dv]])
    second = np.array(
        [[duu @ normal, duv @ normal], [duv @ normal, dvv @ normal]]
    )
    return SurfaceDifferentials(pos, du, dv, duu, duv, dvv, normal, first, second, degenerate)


def gaussian_curvature(diff: SurfaceDifferentials, det_tol: float = 1e-18) -> float:
    """det(II) / det(I); raises when the first form is degenerate."""
    if diff.degenerate:
        raise DegenerateSurfaceError("tangent plane is degenerate at this parameter")
    det_first = float(np.linalg.det(diff.first_form))
    if det_first <= det_tol:
        raise DegenerateSurfaceError("first fundamental form is singular")
    return float(np.linalg.det(diff.second_form)) / det_first


def greville_abscissae(kv: KnotVector) -> np.ndarray:
    """Canonical parameter per control point: mean of degree consecutive knots."""
    p = kv.degree
    if p == 0:
        return 0.5 * (kv.knots[:-1] + kv.knots[1:])
    n = kv.num_basis
    return np.array([kv.knots[i + 1:i + 1 + p].mean() for i in range(n)])


# ---------------------------------------------------------------------------
# Batched grid evaluation.  Basis matrices depend only on the layout and the
# parameter grid, so they are computed once and reused for every shape state.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridBasis:
    """Precomputed basis (and derivative) matrices on a fixed parameter grid."""

    us: np.ndarray
    vs: np.ndarray
    bu: np.ndarray
    bv: np.ndarray
    dbu: np.ndarray | None = None
    dbv: np.ndarray | None = None
    ddbu: np.ndarray | None = None
    ddbv: np.ndarray | None = None

    @staticmethod
    def build(layout_or_surface, us: np.ndarray, vs: np.ndarray, derivs: bool = False) -> "GridBasis":
        if isinstance(layout_or_surface, NurbsSurface):
            ku, kvv = layout_or_surface.knots_u, layout_or_surface.knots_v
        else:
            ku, kvv = layout_or_surface.knots_u(), layout_or_surface.knots_v()
        us = np.asarray(us, dtype=float)
        vs = np.asarray(vs, dtype=float)
        if derivs:
            bu, dbu, ddbu = basis_rows_with_derivatives(ku, us)
            bv, dbv, ddbv = basis_rows_with_derivatives(kvv, vs)
            return GridBasis(us, vs, bu, bv, dbu, dbv, ddbu, ddbv)
        return GridBasis(us, vs, basis_row(ku, us), basis_row(kvv, vs))


def eval_grid(basis: GridBasis, net: np.ndarray, weights: np.ndarray, scaling: np.ndarray) -> np.ndarray:
    """Surface points on the basis grid for a batch of shapes.

    weights: (..., nu+1, nv+1), scaling: (..., 3).  Returns (..., Gu, Gv, 3).
    """
    wnet = weights[..., None] * net
    num = np.einsum("ui,vj,...ijc->...uvc", basis.bu, basis.bv, wnet)
    den = np.einsum("ui,vj,...ij->...uv", basis.bu, basis.bv, weights)
    return scaling[..., None, None, :] * (num / den[..., None])


def eval_grid_curvature(basis: GridBasis, net: np.ndarray, weights: np.ndarray,
                        scaling: np.ndarray) -> np.ndarray:
    """Gaussian curvature on the grid for a batch of shapes: (..., Gu, Gv).

    Degenerate nodes (near-zero tangent cross product or singular first form)
    are reported as zero curvature, which keeps downstream regularizers bounded.
    """
    if basis.dbu is None:
        raise ContractViolationError("GridBasis must be built with derivs=True")
    wnet = weights[..., None] * net

    def pair(mu, mv):
        num = np.einsum("ui,vj,...ijc->...uvc", mu, mv, wnet)
        den = np.einsum("ui,vj,...ij->...uv", mu, mv, weights)
        return num, den[..., None]

    a, d = pair(basis.bu, basis.bv)
    a_u, d_u = pair(basis.dbu, basis.bv)
    a_v, d_v = pair(basis.bu, basis.dbv)
    a_uu, d_uu = pair(basis.ddbu, basis.bv)
    a_uv, d_uv = pair(basis.dbu, basis.dbv)
    a_vv, d_vv = pair(basis.bu, basis.ddbv)

    c = a / d
    c_u = (a_u - c * d_u) / d
    c_v = (a_v - c * d_v) / d
    c_uu = (a_uu - 2.0 * c_u * d_u - c * d_uu) / d
    c_uv = (a_uv - c_u * d_v - c_v * d_u - c * d_uv) / d
    c_vv = (a_vv - 2.0 * c_v * d_v - c * d_vv) / d

    s = scaling[..., None, None, :]
    du, dv = s * c_u, s * c_v
    duu, duv, dvv = s * c_uu, s * c_uv, s * c_vv

    cross = np.cross(du, dv)
    cross_norm = np.linalg.norm(cross, axis=-1)
    ok = cross_norm >= DEGENERATE_TANGENT_TOL
    normal = np.where(ok[..., None], cross / np.where(ok, cross_norm, 1.0)[..., None], 0.0)

    e = np.einsum("...c,...c->...", du, du)
    f = np.einsum("...c,...c->...", du, dv)
    g = np.einsum("...c,...c->...", dv, dv)
    ell = np.einsum("...c,...c->...", duu, normal)
    m = np.einsum("...c,...c->...", duv, normal)
    n = np.einsum("...c,...c->...", dvv, normal)

    det_first = e * g - f * f
    det_second = ell * n - m * m
    valid = ok & (det_first > 1e-18)
    return np.where(valid, det_second / np.where(valid, det_first, 1.0), 0.0)


# ---------------------------------------------------------------------------
# Mesh export
# ---------------------------------------------------------------------------


def tessellate(surf: NurbsSurface, grid_u: int, grid_v: int) -> tuple[np.ndarray, np.ndarray]:
    """Triangulate the surface on a grid_u x grid_v parameter grid.

    Returns vertices (grid_u*grid_v, 3) in u-major order and triangle index
    triples (2*(grid_u-1)*(grid_v-1), 3).
    """
    if grid_u < 2 or grid_v < 2:
        raise ContractViolationError("tessellation grid must be at least 2x2")
    basis = GridBasis.build(surf, np.linspace(0, 1, grid_u), np.linspace(0, 1, grid_v))
    verts = eval_grid(basis, surf.net, surf.weights, surf.scaling).reshape(-1, 3)
    faces = []
    for i in range(grid_u - 1):
        for j in range(grid_v - 1):
            a = i * grid_v + j
            b = (i + 1) * grid_v + j
            faces.append((a, b, b + 1))
            faces.append((a, b + 1, a + 1))
    return verts, np.asarray(faces, dtype=int)


def write_obj(path, verts: np.ndarray, faces: np.ndarray) -> None:
    """Write a minimal Wavefront OBJ file (1-indexed faces)."""
    with open(path, "w") as fh:
        for v in verts:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
