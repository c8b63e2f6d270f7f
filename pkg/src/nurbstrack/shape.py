"""Level-set shape representation over a scaled NURBS surface.

Measurements are mapped into the target frame, matched to the surface node
with the smallest angle to the local origin ray, and scored with a signed
Mahalanobis distance: positive inside the star-convex body, negative outside.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky
from scipy.spatial import cKDTree

from .errors import (
    CenterPointError,
    ContractViolationError,
    InvalidShapeError,
    SingularCovarianceError,
)
from .nurbs import GridBasis, NurbsSurface, eval_grid

ORIGIN_TOL = 1e-12
# Queries per grid above which the batched angle lookup switches from a dense
# cosine matrix to a KD-tree on the unit directions (chord distance on the
# unit sphere is monotone in angle, so nearest neighbour == smallest angle).
KDTREE_QUERY_THRESHOLD = 384


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def to_local(world_point: np.ndarray, center: np.ndarray, yaw: float) -> np.ndarray:
    """World point into the target frame: subtract center, unrotate yaw."""
    return yaw_matrix(yaw).T @ (np.asarray(world_point, dtype=float) - center)


def from_local(local_point: np.ndarray, center: np.ndarray, yaw: float) -> np.ndarray:
    return yaw_matrix(yaw) @ np.asarray(local_point, dtype=float) + center


@dataclass
class ParamGrid:
    """Cached surface samples used as the candidate set for the angle argmin."""

    us: np.ndarray
    vs: np.ndarray
    points: np.ndarray          # (Gu, Gv, 3)
    flat_points: np.ndarray     # (Gu*Gv, 3), u-major
    norms: np.ndarray           # (Gu*Gv,)
    dirs: np.ndarray            # (Gu*Gv, 3) unit directions from the origin
    _tree: cKDTree | None = field(default=None, repr=False)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.us.size, self.vs.size

    def param_of(self, flat_index: int) -> tuple[float, float]:
        gu, gv = self.resolution
        return float(self.us[flat_index // gv]), float(self.vs[flat_index % gv])

    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.dirs)
        return self._tree


def build_grid(surf: NurbsSurface, resolution: tuple[int, int] = (32, 32),
               mode: str = "uniform", basis: GridBasis | None = None) -> ParamGrid:
    """Sample the surface on a parameter grid.

    mode "uniform" covers [0,1]^2 inclusively at the given resolution; mode
    "knots" uses the distinct knot values of each direction as candidates.
    """
    if basis is None:
        if mode == "uniform":
            us = np.linspace(0.0, 1.0, resolution[0])
            vs = np.linspace(0.0, 1.0, resolution[1])
        elif mode == "knots":
            us = np.unique(surf.knots_u.knots)
            vs = np.unique(surf.knots_v.knots)
        else:
            raise ContractViolationError(f"unknown grid mode {mode!r}")
        basis = GridBasis.build(surf, us, vs)
    points = eval_grid(basis, surf.net, surf.weights, surf.scaling)
    return grid_from_points(basis.us, basis.vs, points)


def grid_from_points(us: np.ndarray, vs: np.ndarray, points: np.ndarray) -> ParamGrid:
    flat = points.reshape(-1, 3)
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return ParamGrid(us, vs, points, flat, norms, flat / safe[:, None])


def closest_surface_param(grid: ParamGrid, z_local: np.ndarray) -> tuple[float, float]:
    """Grid node whose surface point has the smallest angle to z_local.

    Ties break toward the smallest (u, then v).  The angle is undefined at the
    local origin, which raises CenterPointError.
    """
    z = np.asarray(z_local, dtype=float)
    nz = np.linalg.norm(z)
    if nz < ORIGIN_TOL:
        raise CenterPointError("closest-point angle undefined at the local origin")
    cos = grid.dirs @ (z / nz)
    return grid.param_of(int(np.argmax(cos)))


def closest_node_indices(grid: ParamGrid, z_batch: np.ndarray) -> np.ndarray:
    """Flat node index of the angle-closest grid node for each row of z_batch.

    Exact up to ties (duplicated seam nodes carry identical surface points, so
    any tie winner yields the same distance).  Rows at the origin get index -1.
    """
    z = np.asarray(z_batch, dtype=float)
    norms = np.linalg.norm(z, axis=1)
    ok = norms > ORIGIN_TOL
    idx = np.full(z.shape[0], -1, dtype=int)
    if not np.any(ok):
        return idx
    dirs = z[ok] / norms[ok, None]
    if dirs.shape[0] >= KDTREE_QUERY_THRESHOLD:
        _, nearest = grid.tree().query(dirs)
    else:
        nearest = np.argmax(dirs @ grid.dirs.T, axis=1)
    idx[ok] = nearest
    return idx


def mahalanobis(z_local: np.ndarray, surface_point: np.ndarray, noise_cov: np.ndarray) -> float:
    """R-weighted distance sqrt((z - s)^T R^-1 (z - s))."""
    diff = np.asarray(z_local, dtype=float) - np.asarray(surface_point, dtype=float)
    try:
        factor = cho_factor(np.asarray(noise_cov, dtype=float), lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError(str(exc)) from exc
    return float(np.sqrt(diff @ cho_solve(factor, diff)))


def noise_sqrt_inverse(noise_cov: np.ndarray) -> np.ndarray:
    """L^-1 with R = L L^T, for vectorized Mahalanobis norms."""
    try:
        low = cholesky(np.asarray(noise_cov, dtype=float), lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError(str(exc)) from exc
    return np.linalg.inv(low)


def signed_distances(grid: ParamGrid, z_local: np.ndarray, sqrt_inv: np.ndarray,
                     dmax: float | None = None) -> np.ndarray:
    """Signed Mahalanobis shape-function values for a batch of local points.

    Positive inside or on the body (radial star-convex test: |z| <= |S| at the
    angle-closest node), negative outside.  Points at the local origin take
    the deepest-interior value d_max when it is supplied.
    """
    z = np.atleast_2d(np.asarray(z_local, dtype=float))
    idx = closest_node_indices(grid, z)
    d = np.empty(z.shape[0])
    at_origin = idx < 0
    if np.any(at_origin):
        if dmax is None:
            raise CenterPointError("origin point needs a d_max value")
        d[at_origin] = dmax
    ok = ~at_origin
    if np.any(ok):
        nodes = grid.flat_points[idx[ok]]
        diff = (z[ok] - nodes) @ sqrt_inv.T
        dist = np.linalg.norm(diff, axis=1)
        inside = np.linalg.norm(z[ok], axis=1) <= grid.norms[idx[ok]]
        d[ok] = np.where(inside, dist, -dist)
    return d


def shape_function(grid: ParamGrid, z_world: np.ndarray, center: np.ndarray,
                   yaw: float, noise_cov: np.ndarray) -> float:
    """Signed Mahalanobis distance of one world point to the shape boundary."""
    z = to_local(z_world, center, yaw)
    sqrt_inv = noise_sqrt_inverse(noise_cov)
    dm = d_max(grid, noise_cov)
    return float(signed_distances(grid, z[None, :], sqrt_inv, dmax=dm)[0])


def d_max(grid: ParamGrid, noise_cov: np.ndarray) -> float:
    """Shape-function value at the deepest interior point (the local origin).

    For a star-convex body about the origin this is the largest R-weighted
    norm over the boundary, which is what interior points approach as they
    slide toward the center.
    """
    if np.any(grid.norms < ORIGIN_TOL):
        raise InvalidShapeError("surface touches the local origin")
    sqrt_inv = noise_sqrt_inverse(noise_cov)
    weighted = np.linalg.norm(grid.flat_points @ sqrt_inv.T, axis=1)
    value = float(weighted.max())
    if value <= 0.0:
        raise InvalidShapeError("surface does not enclose the local origin")
    return value


@dataclass(frozen=True)
class MeasurementSet:
    """World-frame 3D points with per-point Gaussian noise covariances."""

    points: np.ndarray                 # (n, 3)
    noise_cov: np.ndarray              # (3, 3) shared, or (n, 3, 3)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        cov = np.asarray(self.noise_cov, dtype=float)
        if cov.ndim == 2:
            if cov.shape != (3, 3):
                raise ContractViolationError("shared noise covariance must be 3x3")
        elif cov.shape != (pts.shape[0], 3, 3):
            raise ContractViolationError("per-point covariances must be (n, 3, 3)")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "noise_cov", cov)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def homogeneous(self) -> bool:
        return self.noise_cov.ndim == 2

    def cov_of(self, index: int) -> np.ndarray:
        return self.noise_cov if self.homogeneous else self.noise_cov[index]

    def cov_stack(self) -> np.ndarray:
        if self.homogeneous:
            return np.broadcast_to(self.noise_cov, (len(self), 3, 3))
        return self.noise_cov

    def mean_cov(self) -> np.ndarray:
        """Average noise covariance; the metric used for d_max."""
        if self.homogeneous:
            return self.noise_cov
        return self.noise_cov.mean(axis=0)
