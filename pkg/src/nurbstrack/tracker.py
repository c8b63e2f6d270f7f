"""End-to-end tracking pipelines: the two surface methods and the box baseline.

The shape prototype is a vehicle-like ring: control columns sit on a rounded
rectangle in plan view (half-offset azimuths keep it symmetric about the long
axis), rows run from a small bottom cap over the flanks to a small roof cap,
and the net is normalized so the unit-scale surface's encasing box matches the
nominal dimensions exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import (
    ContractViolationError,
    FrameParseError,
    InsufficientInitializationError,
)
from .evalio import FrameRecord
from .motion import (
    IDX_C,
    IDX_S,
    IDX_V,
    IDX_YAW,
    ProcessNoiseConfig,
    ShapeDynamicsContext,
    StateLayout,
    wrap_angle,
)
from .nurbs import GridBasis, KnotVector, NurbsSurface, SurfaceLayout, eval_grid
from .shape import MeasurementSet
from .sim import GroundTruthFrame, OrientedBox
from .ukf import GaussianBelief, ShapeMeasurementModel, UtParams, predict, update

# height fractions of the prototype's control rows; the end rows close the
# body with small caps so it stays star-convex about the origin
PROFILE_Z = np.array([-0.995, -0.55, 0.0, 0.55, 0.995])
CAP_RADIUS_FRACTION = 0.04

REVERSE_FLIP_THRESHOLD = -0.2  # m/s; below this the track is re-parametrized


@dataclass
class TrackerConfig:
    """Layout, noise, and initialization settings for one tracking method."""

    method: str = "m2"
    n_u: int = 5
    n_v: int = 4
    degree_u: int = 2
    degree_v: int = 2
    closed_u: bool = True
    base_dims: tuple[float, float, float] = (4.5, 1.8, 1.5)
    grid_resolution: tuple[int, int] = (32, 32)
    grid_mode: str = "uniform"
    meas_noise_var: float = 0.01
    pseudo_noise_floor: float = 1e-6
    # width of the uniform level band the measurement sources live in; None
    # keeps the full-body U(0,1) default of the measurement model
    level_band: float | None = None
    ut_alpha: float = 1.0
    ut_beta: float = 2.0
    ut_kappa: float = 0.0
    process: ProcessNoiseConfig = field(default_factory=ProcessNoiseConfig)
    init_pos_var: float = 0.5**2
    init_yaw_var: float = 0.2**2
    init_v_var: float = 1.0**2
    init_c_var: float = 0.01**2
    init_scale_var: float = 0.05**2
    init_weight_var: float = 0.1**2

    def layout(self) -> StateLayout:
        return StateLayout(self.method, SurfaceLayout(
            self.n_u, self.n_v, self.degree_u, self.degree_v, self.closed_u,
        ))

    def ut_params(self) -> UtParams:
        return UtParams(self.ut_alpha, self.ut_beta, self.ut_kappa)

    def noise_cov(self) -> np.ndarray:
        return self.meas_noise_var * np.eye(3)

    def init_cov_diag(self, layout: StateLayout) -> np.ndarray:
        return np.concatenate([
            np.full(3, self.init_pos_var),
            [self.init_yaw_var, self.init_v_var, self.init_c_var],
            np.full(3, self.init_scale_var),
            np.full(layout.num_weights, self.init_weight_var),
        ])

    @staticmethod
    def from_json(path) -> "TrackerConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FrameParseError(f"invalid tracker config: {exc}", line=exc.lineno)
        proc = data.pop("process", None)
        known = {f.name for f in fields(TrackerConfig)}
        for key in data:
            if key not in known:
                raise FrameParseError(f"unknown tracker config key {key!r}")
        cfg = make_config(data.pop("method", "m2"), **data)
        if proc is not None:
            cfg = replace(cfg, process=ProcessNoiseConfig(**proc))
        return cfg


def make_config(method: str = "m2", preset: str | None = None, **overrides) -> TrackerConfig:
    """Method defaults (net size, degrees) plus optional scenario preset."""
    method = method.lower()
    if method == "m1":
        base = dict(method="m1", n_u=7, n_v=4, degree_u=3, degree_v=3)
    elif method in ("m2", "sp"):
        base = dict(method=method, n_u=5, n_v=4, degree_u=2, degree_v=2)
    else:
        raise ContractViolationError(f"unknown method {method!r}")
    process_kw = {}
    if preset == "static":
        process_kw = dict(c_vdot=1e-4, c_cdot=1e-4, q_weight=0.1)
        base["init_v_var"] = 0.1**2
        base["level_band"] = 0.04
    elif preset == "dynamic":
        process_kw = dict(c_vdot=0.2, c_cdot=0.05, q_weight=0.01)
        base["level_band"] = 0.04
    elif preset is not None:
        raise ContractViolationError(f"unknown preset {preset!r}")
    proc_overrides = overrides.pop("process", {})
    if isinstance(proc_overrides, ProcessNoiseConfig):
        process = proc_overrides
    else:
        process = ProcessNoiseConfig(**{**process_kw, **proc_overrides})
    base.update(overrides)
    return TrackerConfig(process=process, **base)


def build_prototype(layout: SurfaceLayout, base_dims) -> NurbsSurface:
    """Vehicle-like closed prototype whose encasing box equals base_dims * 2.

    Control columns sit on rays of a rounded-cuboid body (the same nested-norm
    family the simulator uses).  A short fixed-point calibration scales each
    control ray so the clamped rational surface lands on the target body, then
    the net is normalized so the surface extents match the nominal dimensions.
    """
    from .sim import superellipsoid_radius

    dims = np.asarray(base_dims, dtype=float)
    if dims.shape != (3,) or np.any(dims <= 0):
        raise ContractViolationError("base_dims must be a positive 3-vector of half sizes")
    if not layout.closed_u:
        raise ContractViolationError("the vehicle prototype requires a closed u ring")
    n_ring = layout.num_distinct_cols
    n_rows = layout.num_rows
    full_dims = 2.0 * dims

    thetas = 2.0 * np.pi * (np.arange(n_ring) + 0.5) / n_ring
    t_rows = np.linspace(0.0, 1.0, n_rows)
    prof_t = np.linspace(0.0, 1.0, PROFILE_Z.size)
    z_frac = np.interp(t_rows, prof_t, PROFILE_Z)

    # rays: caps shrink toward the vertical axis, other rows point outward at
    # their height on the target body
    net = np.zeros((layout.num_cols, n_rows, 3))
    for j, zf in enumerate(z_frac):
        cap = j in (0, n_rows - 1)
        rho = CAP_RADIUS_FRACTION if cap else np.sqrt(max(1e-6, 1.0 - zf * zf))
        ray = np.stack([rho * np.cos(thetas), rho * np.sin(thetas),
                        np.full(n_ring, zf)], axis=1)
        ray /= np.linalg.norm(ray, axis=1, keepdims=True)
        radius = superellipsoid_radius(ray, full_dims)
        net[:n_ring, j] = ray * radius[:, None]
    net[-1] = net[0]

    knots_u, knots_v = layout.knots_u(), layout.knots_v()
    gu = greville_abscissae(knots_u)[:n_ring]
    gv = greville_abscissae(knots_v)
    basis = GridBasis.build(layout, gu, gv)
    ones = np.ones((layout.num_cols, n_rows))
    # pull the surface onto the target body: scale each control ray by the
    # radial error of the surface point it dominates
    for _ in range(5):
        pts = eval_grid(basis, net, ones, np.ones(3))
        r_surf = np.linalg.norm(pts, axis=2)
        dirs = pts / r_surf[:, :, None]
        want = superellipsoid_radius(dirs.reshape(-1, 3), full_dims).reshape(r_surf.shape)
        ratio = np.clip(want / r_surf, 0.7, 1.4)
        net[:n_ring] *= ratio[:, :, None]
        net[-1] = net[0]

    surf = NurbsSurface(net, ones, knots_u, knots_v)
    # normalize the net so the unit-scale surface extents hit 2 * base_dims
    fine = GridBasis.build(surf, np.linspace(0, 1, 64), np.linspace(0, 1, 33))
    pts = eval_grid(fine, surf.net, surf.weights, surf.scaling).reshape(-1, 3)
    extent = pts.max(axis=0) - pts.min(axis=0)
    if np.any(extent <= 0):
        raise ContractViolationError("degenerate prototype extents")
    net = net * (2.0 * dims / extent)
    return NurbsSurface(net, surf.weights, surf.knots_u, surf.knots_v)


def initialize(first_frame: MeasurementSet, config: TrackerConfig) -> GaussianBelief:
    """Centroid position, principal-axis yaw, zero motion, unit shape."""
    pts = first_frame.points
    if pts.shape[0] < 4:
        raise InsufficientInitializationError(
            f"initialization needs at least 4 points, got {pts.shape[0]}"
        )
    layout = config.layout()
    mean = np.zeros(layout.dim)
    centroid = pts.mean(axis=0)
    mean[0:3] = centroid
    xy = pts[:, :2] - centroid[:2]
    cov2 = xy.T @ xy / pts.shape[0]
    vals, vecs = np.linalg.eigh(cov2)
    principal = vecs[:, np.argmax(vals)]
    mean[IDX_YAW] = wrap_angle(np.arctan2(principal[1], principal[0]))
    mean[IDX_S] = 1.0
    if layout.method == "m1":
        mean[layout.idx_weights] = 1.0
    return GaussianBelief(mean, np.diag(config.init_cov_diag(layout)))


class Tracker:
    """Single-target surface tracker; one instance per track, single-writer."""

    def __init__(self, config: TrackerConfig):
        if config.method not in ("m1", "m2"):
            raise ContractViolationError("Tracker supports methods m1 and m2")
        self.config = config
        self.layout = config.layout()
        half_dims = np.asarray(config.base_dims, dtype=float) / 2.0
        self.prototype = build_prototype(self.layout.surface, half_dims)
        self.ctx = ShapeDynamicsContext(self.layout, self.prototype.net)
        if config.grid_mode == "uniform":
            us = np.linspace(0, 1, config.grid_resolution[0])
            vs = np.linspace(0, 1, config.grid_resolution[1])
        elif config.grid_mode == "knots":
            us = np.unique(self.prototype.knots_u.knots)
            vs = np.unique(self.prototype.knots_v.knots)
        else:
            raise ContractViolationError(f"unknown grid mode {config.grid_mode!r}")
        model_kw = {}
        if config.level_band is not None:
            model_kw = dict(level_mean=config.level_band / 2.0,
                            level_var=config.level_band**2 / 12.0)
        self.model = ShapeMeasurementModel(
            self.layout, self.prototype.net, GridBasis.build(self.layout.surface, us, vs),
            config.pseudo_noise_floor, **model_kw,
        )
        self.params = config.ut_params()
        self.belief: GaussianBelief | None = None

    def initialize(self, first_frame: MeasurementSet) -> GaussianBelief:
        self.belief = initialize(first_frame, self.config)
        return self.belief

    def surface(self) -> NurbsSurface:
        """Current posterior-mean surface in the local frame."""
        state = self.belief.mean
        return self.prototype.with_shape(
            scaling=state[IDX_S], weights=self.layout.full_weights(state),
        )

    def encasing_rectangle(self) -> tuple[float, float]:
        """Length and width of the local x-y bounding rectangle of the surface."""
        pts = self.model.surface_points(self.belief.mean[None, :])[0]
        ext = pts.max(axis=0) - pts.min(axis=0)
        return float(ext[0]), float(ext[1])

    def step(self, frame: MeasurementSet, truth: GroundTruthFrame | None = None,
             frame_index: int = 0, zero_time: bool = False) -> FrameRecord:
        """Predict + update, measured over exactly those two calls."""
        if self.belief is None:
            raise ContractViolationError("tracker must be initialized before stepping")
        t0 = time.perf_counter()
        self.belief = predict(self.belief, self.config.process, self.ctx, self.params)
        if len(frame) > 0:
            self.belief = update(self.belief, frame, self.model, self.params)
        elapsed_ms = (time.perf_counter() - t0) * 1e3
        self._canonicalize_heading()
        return self._record(truth, frame_index, 0.0 if zero_time else elapsed_ms)

    def _canonicalize_heading(self):
        # (yaw, v, c) -> (yaw+pi, -v, -c) is the same CCV trajectory; keep the
        # forward-motion representative so velocity reads as speed
        mean = self.belief.mean
        if mean[IDX_V] < REVERSE_FLIP_THRESHOLD:
            mean[IDX_V] = -mean[IDX_V]
            mean[IDX_C] = -mean[IDX_C]
            mean[IDX_YAW] = wrap_angle(mean[IDX_YAW] + np.pi)

    def _record(self, truth, frame_index, elapsed_ms) -> FrameRecord:
        mean = self.belief.mean
        length, width = self.encasing_rectangle()
        gt = _truth_fields(truth)
        return FrameRecord(
            frame=frame_index,
            gx=float(mean[0]), gy=float(mean[1]), gz=float(mean[2]),
            gyaw=float(mean[IDX_YAW]), gv=float(mean[IDX_V]), gc=float(mean[IDX_C]),
            l=length, w=width,
            time_ms=elapsed_ms, **gt,
        )


def _truth_fields(truth: GroundTruthFrame | None) -> dict:
    if truth is None:
        return dict(ginssx=0.0, ginssy=0.0, ginssz=0.0, ginsyaw=0.0,
                    ginsv=0.0, ginsc=0.0, insl=0.0, insw=0.0)
    return dict(
        ginssx=float(truth.center[0]), ginssy=float(truth.center[1]),
        ginssz=float(truth.center[2]), ginsyaw=float(truth.yaw),
        ginsv=float(truth.velocity), ginsc=float(truth.curvature),
        insl=float(truth.dims[0]), insw=float(truth.dims[1]),
    )


class SpTracker:
    """Constant-velocity point tracker over oriented-box detections.

    Linear Kalman filter on [x, y, z, vx, vy, length, width, height], measured
    by the box center and dimensions.  Yaw is read straight off the box.
    """

    MEAS_VAR_POS = 0.1**2
    MEAS_VAR_DIM = 0.1**2

    def __init__(self, dt: float = 0.1, meas_var_pos: float | None = None,
                 meas_var_dim: float | None = None):
        self.dt = dt
        self.f_mat = np.eye(8)
        self.f_mat[0, 3] = dt
        self.f_mat[1, 4] = dt
        self.h_mat = np.zeros((6, 8))
        for row, col in enumerate([0, 1, 2, 5, 6, 7]):
            self.h_mat[row, col] = 1.0
        self.q = np.diag([1e-4, 1e-4, 1e-4, 0.1**2, 0.1**2, 0.05**2, 0.05**2, 0.05**2])
        rp = self.MEAS_VAR_POS if meas_var_pos is None else meas_var_pos
        rd = self.MEAS_VAR_DIM if meas_var_dim is None else meas_var_dim
        self.r = np.diag([rp] * 3 + [rd] * 3)
        self.mean: np.ndarray | None = None
        self.cov: np.ndarray | None = None
        self.yaw = 0.0

    def initialize(self, box: OrientedBox) -> None:
        self.mean = np.array([box.center[0], box.center[1], box.center[2], 0.0, 0.0,
                              box.length, box.width, box.height])
        self.cov = np.diag([0.5**2] * 3 + [1.0**2] * 2 + [0.5**2] * 3)
        self.yaw = box.yaw

    def step(self, box: OrientedBox | None, truth: GroundTruthFrame | None = None,
             frame_index: int = 0, zero_time: bool = False) -> FrameRecord:
        if self.mean is None:
            raise ContractViolationError("SP tracker must be initialized first")
        t0 = time.perf_counter()
        self.mean = self.f_mat @ self.mean
        self.cov = self.f_mat @ self.cov @ self.f_mat.T + self.q
        if box is not None and not box.degenerate:
            z = np.array([box.center[0], box.center[1], box.center[2],
                          box.length, box.width, box.height])
            s = self.h_mat @ self.cov @ self.h_mat.T + self.r
            gain = self.cov @ self.h_mat.T @ np.linalg.inv(s)
            self.mean = self.mean + gain @ (z - self.h_mat @ self.mean)
            self.cov = self.cov - gain @ s @ gain.T
            self.yaw = box.yaw
        elapsed_ms = (time.perf_counter() - t0) * 1e3
        speed = float(np.hypot(self.mean[3], self.mean[4]))
        gt = _truth_fields(truth)
        return FrameRecord(
            frame=frame_index,
            gx=float(self.mean[0]), gy=float(self.mean[1]), gz=float(self.mean[2]),
            gyaw=float(self.yaw), gv=speed, gc=0.0,
            l=float(self.mean[5]), w=float(self.mean[6]),
            time_ms=0.0 if zero_time else elapsed_ms, **gt,
        )
