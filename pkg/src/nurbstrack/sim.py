"""Synthetic LiDAR scenario generator.

The ground-truth vehicle is a convex superellipsoid (rounded cuboid): an L4
norm in the ground plane nested inside an L3 norm vertically.  The membership
function is positively homogeneous, so points on the surface satisfy f = 1
exactly and radial sampling is a single division.  Visibility uses convex
back-face culling against the sensor plus optional rear/side slab modes.
Frames are generated with a counter-based RNG keyed by (seed, frame), so any
frame can be produced independently and reproducibly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import ContractViolationError, FrameParseError
from .motion import ccv_step, wrap_angle
from .shape import MeasurementSet, yaw_matrix

PLAN_EXPONENT = 4.0
VERTICAL_EXPONENT = 3.0
VISIBILITY_MODES = ("all-sides", "rear-only", "side-only")


# --- ground-truth vehicle body ------------------------------------------------


def superellipsoid_radius(dirs: np.ndarray, dims: np.ndarray) -> np.ndarray:
    """Distance from the origin to the surface along each unit direction."""
    return 1.0 / superellipsoid_value(dirs, dims)


def superellipsoid_value(pts: np.ndarray, dims: np.ndarray) -> np.ndarray:
    """Homogeneous membership value: 1 on the surface, <1 inside."""
    half = np.asarray(dims, dtype=float) / 2.0
    p = np.atleast_2d(pts)
    plan = (np.abs(p[:, 0] / half[0]) ** PLAN_EXPONENT
            + np.abs(p[:, 1] / half[1]) ** PLAN_EXPONENT) ** (1.0 / PLAN_EXPONENT)
    val = (plan ** VERTICAL_EXPONENT
           + np.abs(p[:, 2] / half[2]) ** VERTICAL_EXPONENT) ** (1.0 / VERTICAL_EXPONENT)
    return val if pts.ndim > 1 else val[0]


def superellipsoid_normal(pts: np.ndarray, dims: np.ndarray) -> np.ndarray:
    """Outward gradient direction of the membership function (unnormalized)."""
    half = np.asarray(dims, dtype=float) / 2.0
    p = np.atleast_2d(pts)
    xs, ys, zs = p[:, 0] / half[0], p[:, 1] / half[1], p[:, 2] / half[2]
    plan4 = np.abs(xs) ** PLAN_EXPONENT + np.abs(ys) ** PLAN_EXPONENT
    plan = np.maximum(plan4, 1e-30) ** (1.0 / PLAN_EXPONENT)
    # d/dx of (plan^3 + |z|^3)^(1/3) up to the common positive prefactor
    shared = plan ** (VERTICAL_EXPONENT - PLAN_EXPONENT)
    gx = shared * np.abs(xs) ** (PLAN_EXPONENT - 1) * np.sign(xs) / half[0]
    gy = shared * np.abs(ys) ** (PLAN_EXPONENT - 1) * np.sign(ys) / half[1]
    gz = np.abs(zs) ** (VERTICAL_EXPONENT - 1) * np.sign(zs) / half[2]
    return np.stack([gx, gy, gz], axis=1)


# --- configuration -------------------------------------------------------------


@dataclass
class ScenarioConfig:
    """Simulator configuration; JSON keys match the field names exactly."""

    duration: int = 200
    dt: float = 0.1
    dims: tuple[float, float, float] = (4.5, 1.8, 1.5)
    start_center: tuple[float, float, float] = (8.0, 0.0, 0.0)
    start_yaw: float = 0.0
    segments: list = field(default_factory=lambda: [[0.0, 0.0, 200]])  # [v, c, frames]
    visibility: list = field(default_factory=lambda: [["all-sides", 200]])
    sensor_origin: tuple[float, float, float] = (0.0, 0.0, 2.0)
    sensor_orbit_radius: float = 0.0       # >0 orbits the vehicle start point
    sensor_orbit_period: float = 20.0      # seconds per lap
    n_candidates: int = 400
    n_k: int = 50
    noise_sigma: tuple[float, float, float] = (0.1, 0.1, 0.1)
    hull_fraction: float = 0.5
    outlier_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.duration < 0 or self.n_k < 0 or self.n_candidates <= 0:
            raise ContractViolationError("duration, n_k and n_candidates must be non-negative")
        if any(s < 0 for s in self.noise_sigma):
            raise ContractViolationError("noise sigma must be non-negative")
        if any(d <= 0 for d in self.dims):
            raise ContractViolationError("vehicle dimensions must be positive")
        for mode, _ in self.visibility:
            if mode not in VISIBILITY_MODES:
                raise ContractViolationError(f"unknown visibility mode {mode!r}")

    @staticmethod
    def from_json(path) -> "ScenarioConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FrameParseError(f"invalid scenario config: {exc}", line=exc.lineno)
        known = {f.name for f in fields(ScenarioConfig)}
        for key in data:
            if key not in known:
                raise FrameParseError(f"unknown scenario config key {key!r}")
        return ScenarioConfig(**data)

    def to_json(self, path) -> None:
        data = {f.name: getattr(self, f.name) for f in fields(ScenarioConfig)}
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2, default=list)
            fh.write("\n")


@dataclass(frozen=True)
class OrientedBox:
    """Ground-plane oriented box extruded over the z extent."""

    center: np.ndarray
    yaw: float
    length: float
    width: float
    height: float
    degenerate: bool = False


@dataclass
class GroundTruthFrame:
    """True pose plus the visible (noisy) point cloud for one frame."""

    index: int
    center: np.ndarray
    yaw: float
    velocity: float
    curvature: float
    cloud: np.ndarray          # noisy visible points, world frame
    cloud_true: np.ndarray     # same points before noise
    box: OrientedBox
    sensor: np.ndarray
    dims: np.ndarray           # true vehicle (length, width, height)


def _frame_rng(seed: int, frame: int, stream: int = 0) -> np.random.Generator:
    key = np.array([np.uint64(seed), np.uint64(frame * 4 + stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _expand_schedule(schedule, duration, what):
    out = []
    for entry in schedule:
        *val, n = entry
        out.extend([val] * int(n))
    if len(out) < duration:
        if not out:
            raise ContractViolationError(f"empty {what} schedule")
        out.extend([out[-1]] * (duration - len(out)))
    return out[:duration]


def generate_scenario(config: ScenarioConfig) -> list[GroundTruthFrame]:
    """Deterministic trajectory + visible noisy point clouds per frame."""
    dims = np.asarray(config.dims, dtype=float)
    sigma = np.asarray(config.noise_sigma, dtype=float)
    motion = _expand_schedule(config.segments, config.duration, "segment")
    modes = _expand_schedule(config.visibility, config.duration, "visibility")

    frames = []
    center = np.asarray(config.start_center, dtype=float)
    yaw = float(config.start_yaw)
    for k in range(config.duration):
        v, c = motion[k]
        mode = modes[k][0]
        sensor = _sensor_position(config, k)
        rng = _frame_rng(config.seed, k, stream=0)
        cloud_true = _sample_visible_surface(rng, center, yaw, dims, sensor, mode,
                                             config.n_candidates)
        noisy = cloud_true + rng.normal(size=cloud_true.shape) * sigma
        if config.outlier_fraction > 0 and cloud_true.shape[0] > 0:
            n_out = int(round(config.outlier_fraction * cloud_true.shape[0]))
            if n_out:
                idx = rng.integers(0, noisy.shape[0], size=n_out)
                noisy[idx] = center + rng.uniform(-1, 1, size=(n_out, 3)) * dims
        box = fit_bounding_box(cloud_true) if cloud_true.shape[0] >= 4 else OrientedBox(
            center.copy(), yaw, 0.0, 0.0, 0.0, degenerate=True
        )
        frames.append(GroundTruthFrame(k, center.copy(), yaw, v, c, noisy, cloud_true,
                                       box, sensor, dims.copy()))
        moved, yaw_next = ccv_step(center, yaw, v, c, config.dt)
        center, yaw = moved, float(wrap_angle(yaw_next))
    return frames


def _sensor_position(config: ScenarioConfig, frame: int) -> np.ndarray:
    base = np.asarray(config.sensor_origin, dtype=float)
    if config.sensor_orbit_radius <= 0:
        return base
    angle = 2.0 * np.pi * (frame * config.dt) / config.sensor_orbit_period
    anchor = np.asarray(config.start_center, dtype=float)
    return anchor + np.array([
        config.sensor_orbit_radius * np.cos(angle),
        config.sensor_orbit_radius * np.sin(angle),
        base[2],
    ])


def _sample_visible_surface(rng, center, yaw, dims, sensor, mode, n_candidates):
    """Surface candidates filtered by back-face culling and the slab mode."""
    dirs = rng.normal(size=(n_candidates, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = superellipsoid_radius(dirs, dims)
    local = dirs * radii[:, None]
    rot = yaw_matrix(yaw)
    world = local @ rot.T + center
    normals_local = superellipsoid_normal(local, dims)
    normals_world = normals_local @ rot.T
    to_sensor = sensor - world
    visible = np.einsum("ij,ij->i", normals_world, to_sensor) > 0.0

    if mode == "rear-only":
        visible &= local[:, 0] <= -0.3 * dims[0]
    elif mode == "side-only":
        sensor_local = rot.T @ (sensor - center)
        side = 1.0 if sensor_local[1] >= 0 else -1.0
        visible &= side * local[:, 1] >= 0.3 * dims[1]
    return world[visible]


def sample_measurements(frame: GroundTruthFrame, n_k: int, hull_fraction: float = 0.5,
                        noise_cov: np.ndarray | None = None,
                        rng: np.random.Generator | None = None,
                        seed: int = 0) -> MeasurementSet:
    """Draw n_k points: a hull share from the 2D convex hull vertices of the
    cloud, the rest uniformly over the whole cloud."""
    if noise_cov is None:
        noise_cov = 0.01 * np.eye(3)
    if n_k == 0 or frame.cloud.shape[0] == 0:
        return MeasurementSet(np.zeros((0, 3)), noise_cov)
    if rng is None:
        rng = _frame_rng(seed, frame.index, stream=1)
    cloud = frame.cloud
    n_hull = int(round(hull_fraction * n_k))
    n_rand = n_k - n_hull
    picks = []
    if n_hull > 0:
        hull_idx = _hull_vertex_indices(cloud)
        picks.append(cloud[rng.choice(hull_idx, size=n_hull, replace=True)])
    if n_rand > 0:
        replace = cloud.shape[0] < n_rand
        picks.append(cloud[rng.choice(cloud.shape[0], size=n_rand, replace=replace)])
    return MeasurementSet(np.concatenate(picks, axis=0), noise_cov)


def _hull_vertex_indices(cloud: np.ndarray) -> np.ndarray:
    try:
        hull = ConvexHull(cloud[:, :2])
        return hull.vertices
    except (QhullError, ValueError):
        return np.arange(cloud.shape[0])


# --- oriented bounding box -------------------------------------------------------


def fit_bounding_box(cloud: np.ndarray) -> OrientedBox:
    """Minimum-area oriented rectangle in x-y (rotating calipers over the 2D
    hull), extruded by the z extent.  Degenerate clouds fall back to an
    axis-aligned box flagged as degenerate."""
    cloud = np.asarray(cloud, dtype=float)
    if cloud.shape[0] < 4:
        raise ContractViolationError("bounding box needs at least 4 points")
    z_lo, z_hi = cloud[:, 2].min(), cloud[:, 2].max()
    try:
        hull = ConvexHull(cloud[:, :2])
    except (QhullError, ValueError):
        return _axis_aligned_box(cloud, z_lo, z_hi)

    pts = cloud[hull.vertices, :2]
    edges = np.roll(pts, -1, axis=0) - pts
    lengths = np.linalg.norm(edges, axis=1)
    keep = lengths > 1e-12
    if not np.any(keep):
        return _axis_aligned_box(cloud, z_lo, z_hi)
    angles = np.arctan2(edges[keep, 1], edges[keep, 0])

    best = None
    for ang in angles:
        ca, sa = np.cos(-ang), np.sin(-ang)
        xr = ca * pts[:, 0] - sa * pts[:, 1]
        yr = sa * pts[:, 0] + ca * pts[:, 1]
        ex, ey = xr.max() - xr.min(), yr.max() - yr.min()
        area = ex * ey
        if best is None or area < best[0]:
            cx = 0.5 * (xr.max() + xr.min())
            cy = 0.5 * (yr.max() + yr.min())
            best = (area, ang, ex, ey, cx, cy)

    _, ang, ex, ey, cx, cy = best
    ca, sa = np.cos(ang), np.sin(ang)
    center_xy = np.array([ca * cx - sa * cy, sa * cx + ca * cy])
    if ex >= ey:
        length, width, yaw = ex, ey, ang
    else:
        length, width, yaw = ey, ex, ang + np.pi / 2.0
    yaw = float(wrap_angle(yaw))
    center = np.array([center_xy[0], center_xy[1], 0.5 * (z_lo + z_hi)])
    return OrientedBox(center, yaw, float(length), float(width), float(z_hi - z_lo))


def _axis_aligned_box(cloud: np.ndarray, z_lo: float, z_hi: float) -> OrientedBox:
    lo = cloud[:, :2].min(axis=0)
    hi = cloud[:, :2].max(axis=0)
    ext = hi - lo
    center = np.array([0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (z_lo + z_hi)])
    if ext[0] >= ext[1]:
        length, width, yaw = ext[0], ext[1], 0.0
    else:
        length, width, yaw = ext[1], ext[0], np.pi / 2.0
    return OrientedBox(center, yaw, float(length), float(width), float(z_hi - z_lo),
                       degenerate=True)


# --- frame files -----------------------------------------------------------------


def write_cloud_csv(path, frames: list[GroundTruthFrame]) -> None:
    """Point cloud file: frame,x,y,z with one row per visible point."""
    with open(path, "w") as fh:
        fh.write("frame,x,y,z\n")
        for fr in frames:
            for p in fr.cloud:
                fh.write(f"{fr.index},{p[0]:.9g},{p[1]:.9g},{p[2]:.9g}\n")


def read_cloud_csv(path, noise_cov=None) -> dict[int, np.ndarray]:
    clouds: dict[int, list] = {}
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != ["frame", "x", "y", "z"]:
            raise FrameParseError("cloud file must have header frame,x,y,z", line=1)
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                idx = int(parts[0])
                xyz = [float(parts[1]), float(parts[2]), float(parts[3])]
            except (ValueError, IndexError) as exc:
                raise FrameParseError(f"malformed cloud row: {exc}", line=lineno) from exc
            clouds.setdefault(idx, []).append(xyz)
    return {k: np.asarray(v) for k, v in clouds.items()}


TRUTH_COLUMNS = (
    "frame", "x", "y", "z", "yaw", "v", "c",
    "boxx", "boxy", "boxz", "boxyaw", "boxl", "boxw", "boxh", "boxdegen",
    "sensx", "sensy", "sensz", "diml", "dimw", "dimh",
)


def write_truth_csv(path, frames: list[GroundTruthFrame]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(TRUTH_COLUMNS) + "\n")
        for fr in frames:
            b = fr.box
            vals = [fr.index, fr.center[0], fr.center[1], fr.center[2], fr.yaw,
                    fr.velocity, fr.curvature,
                    b.center[0], b.center[1], b.center[2], b.yaw, b.length, b.width,
                    b.height, int(b.degenerate),
                    fr.sensor[0], fr.sensor[1], fr.sensor[2],
                    fr.dims[0], fr.dims[1], fr.dims[2]]
            fh.write(",".join(f"{v:.9g}" if isinstance(v, float) else str(v)
                              for v in vals) + "\n")


def truth_frame_from_row(rec: dict, cloud: np.ndarray | None = None) -> GroundTruthFrame:
    """Rebuild a GroundTruthFrame from one truth-CSV row (cloud optional)."""
    pts = cloud if cloud is not None else np.zeros((0, 3))
    box = OrientedBox(
        np.array([rec["boxx"], rec["boxy"], rec["boxz"]]), rec["boxyaw"],
        rec["boxl"], rec["boxw"], rec["boxh"], bool(rec["boxdegen"]),
    )
    return GroundTruthFrame(
        int(rec["frame"]), np.array([rec["x"], rec["y"], rec["z"]]), rec["yaw"],
        rec["v"], rec["c"], pts, pts, box,
        np.array([rec["sensx"], rec["sensy"], rec["sensz"]]),
        np.array([rec["diml"], rec["dimw"], rec["dimh"]]),
    )


def read_truth_csv(path) -> dict[int, dict]:
    out = {}
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != list(TRUTH_COLUMNS):
            raise FrameParseError("unexpected truth file header", line=1)
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise FrameParseError(f"malformed truth row: {exc}", line=lineno) from exc
            rec = dict(zip(TRUTH_COLUMNS, vals))
            out[int(rec["frame"])] = rec
    return out
