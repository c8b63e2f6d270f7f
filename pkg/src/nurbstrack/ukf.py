"""Augmented-state unscented Kalman filter for the level-set shape model.

Prediction augments the state with additive process noise and pushes sigma
points through the process model.  The update stacks one pseudo-measurement
per point:

    g_l = alpha_l * d_max(x) - d(x, y_l - w_l)

against the constant 0, with the uniform level scaling alpha represented by
its moments (mean 1/2, variance 1/12) inside the augmented Gaussian and the
measurement noise w entering through the augmented coordinates rather than as
additive pseudo-measurement noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, solve

from .errors import ContractViolationError, NumericalFailureError
from .motion import (
    IDX_S,
    IDX_YAW,
    ProcessNoiseConfig,
    ShapeDynamicsContext,
    StateLayout,
    SCALE_FLOOR,
    WEIGHT_FLOOR,
    process_model,
    wrap_angle,
)
from .nurbs import GridBasis, eval_grid
from .shape import MeasurementSet, noise_sqrt_inverse

MAX_MEASUREMENTS_PER_UPDATE = 128
ALPHA_MEAN = 0.5
ALPHA_VAR = 1.0 / 12.0
JITTERS = (0.0, 1e-9, 1e-6)


@dataclass(frozen=True)
class UtParams:
    """Scaled unscented transform parameters."""

    alpha: float = 1.0
    beta: float = 2.0
    kappa: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ContractViolationError("spread parameter must lie in (0, 1]")

    def lam(self, dim: int) -> float:
        lam = self.alpha**2 * (dim + self.kappa) - dim
        if dim + lam <= 0:
            raise ContractViolationError("dim + lambda must be positive")
        return lam


@dataclass
class GaussianBelief:
    """Mean and covariance over the flattened target state."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ContractViolationError("covariance shape does not match the mean")

    def copy(self) -> "GaussianBelief":
        return GaussianBelief(self.mean.copy(), self.cov.copy())


def symmetrize_floor(cov: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Re-symmetrize and clip eigenvalues from below."""
    sym = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals[0] >= floor:
        return sym
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T


def cholesky_with_jitter(mat: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, retrying with diagonal jitter before failing."""
    for jitter in JITTERS:
        try:
            m = mat if jitter == 0.0 else mat + jitter * np.eye(mat.shape[0])
            return cholesky(m, lower=True)
        except np.linalg.LinAlgError:
            continue
    raise NumericalFailureError("covariance factorization failed after jitter retries")


def ut_weights(dim: int, params: UtParams) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance weights for 2*dim+1 scaled sigma points."""
    lam = params.lam(dim)
    wm = np.full(2 * dim + 1, 1.0 / (2.0 * (dim + lam)))
    wc = wm.copy()
    wm[0] = lam / (dim + lam)
    wc[0] = wm[0] + (1.0 - params.alpha**2 + params.beta)
    return wm, wc


def sigma_points(mean: np.ndarray, cov: np.ndarray, params: UtParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scaled sigma points (2L+1, L) plus mean/cov weights."""
    mean = np.asarray(mean, dtype=float)
    low = cholesky_with_jitter(np.asarray(cov, dtype=float))
    wm, wc = ut_weights(mean.size, params)
    return _points_from_sqrt(mean, low, params), wm, wc


def _points_from_sqrt(mean: np.ndarray, low: np.ndarray, params: UtParams) -> np.ndarray:
    dim = mean.size
    gamma = np.sqrt(dim + params.lam(dim))
    offsets = gamma * low.T  # row i is the i-th sigma direction
    return np.concatenate([mean[None, :], mean[None, :] + offsets, mean[None, :] - offsets])


def _wrapped_deviations(states: np.ndarray, mean: np.ndarray, angular: tuple[int, ...]) -> np.ndarray:
    dev = states - mean
    for idx in angular:
        dev[:, idx] = wrap_angle(dev[:, idx])
    return dev


def _circular_mean(states: np.ndarray, wm: np.ndarray, angular: tuple[int, ...]) -> np.ndarray:
    mean = wm @ states
    for idx in angular:
        mean[idx] = np.arctan2(wm @ np.sin(states[:, idx]), wm @ np.cos(states[:, idx]))
    return mean


def unscented_predict(belief: GaussianBelief, f, noise_var: np.ndarray,
                      params: UtParams, angular: tuple[int, ...] = ()) -> GaussianBelief:
    """Generic UT prediction with additive-noise augmentation.

    f(states, noises) maps batches (S, n) x (S, nq) -> (S, n); noise_var is
    the diagonal of the process noise covariance.
    """
    n = belief.mean.size
    noise_var = np.asarray(noise_var, dtype=float)
    nq = noise_var.size
    low_state = cholesky_with_jitter(belief.cov)
    low = np.zeros((n + nq, n + nq))
    low[:n, :n] = low_state
    low[n:, n:] = np.diag(np.sqrt(noise_var))
    mean_aug = np.concatenate([belief.mean, np.zeros(nq)])
    pts = _points_from_sqrt(mean_aug, low, params)
    wm, wc = ut_weights(n + nq, params)
    prop = f(pts[:, :n], pts[:, n:])
    mean = _circular_mean(prop, wm, angular)
    dev = _wrapped_deviations(prop, mean, angular)
    cov = (dev * wc[:, None]).T @ dev
    return GaussianBelief(mean, symmetrize_floor(cov))


def _finish_update(belief: GaussianBelief, state_dev: np.ndarray, g_matrix: np.ndarray,
                   wm: np.ndarray, wc: np.ndarray, z: np.ndarray, floor: float,
                   angular: tuple[int, ...], layout: StateLayout | None) -> GaussianBelief:
    """Shared UT measurement-update tail: moments, gain, posterior clamps."""
    g_mean = wm @ g_matrix
    g_dev = g_matrix - g_mean
    s_mat = (g_dev * wc[:, None]).T @ g_dev + floor * np.eye(g_matrix.shape[1])
    c_xg = (state_dev * wc[:, None]).T @ g_dev
    gain = None
    for jitter in JITTERS:
        try:
            gain = solve(s_mat + jitter * np.eye(s_mat.shape[0]), c_xg.T,
                         assume_a="pos").T
            break
        except np.linalg.LinAlgError:
            continue
    if gain is None:
        raise NumericalFailureError("innovation covariance is singular")
    mean = belief.mean + gain @ (z - g_mean)
    cov = symmetrize_floor(belief.cov - gain @ s_mat @ gain.T)
    for idx in angular:
        mean[idx] = wrap_angle(mean[idx])
    if layout is not None:
        mean[IDX_S] = np.maximum(mean[IDX_S], SCALE_FLOOR)
        if layout.method == "m1":
            mean[layout.idx_weights] = np.maximum(mean[layout.idx_weights], WEIGHT_FLOOR)
    return GaussianBelief(mean, cov)


def unscented_update(belief: GaussianBelief, g, noise_blocks, z: np.ndarray,
                     params: UtParams, floor: float = 0.0,
                     angular: tuple[int, ...] = ()) -> GaussianBelief:
    """Generic UT update against measurement z.

    g(states, noises) maps (S, n) x (S, m) -> (S, p).  noise_blocks is a list
    of (mean_vector, covariance_block) pairs appended to the state.
    """
    n = belief.mean.size
    means = [np.asarray(m, dtype=float) for m, _ in noise_blocks]
    covs = [np.asarray(c, dtype=float) for _, c in noise_blocks]
    m_total = sum(m.size for m in means)
    dim = n + m_total
    low = np.zeros((dim, dim))
    low[:n, :n] = cholesky_with_jitter(belief.cov)
    off = n
    for c in covs:
        k = c.shape[0]
        low[off:off + k, off:off + k] = cholesky_with_jitter(c)
        off += k
    mean_aug = np.concatenate([belief.mean] + means)
    pts = _points_from_sqrt(mean_aug, low, params)
    wm, wc = ut_weights(dim, params)
    g_matrix = np.asarray(g(pts[:, :n], pts[:, n:]), dtype=float)
    state_dev = _wrapped_deviations(pts[:, :n], belief.mean, angular)
    return _finish_update(belief, state_dev, g_matrix, wm, wc,
                          np.asarray(z, dtype=float), floor, angular, None)


# ---------------------------------------------------------------------------
# Level-set shape filter
# ---------------------------------------------------------------------------


@dataclass
class ShapeMeasurementModel:
    """Prototype surface plus cached grid basis for the pseudo-measurement.

    level_mean/level_var are the moments of the uniform level scaling: the
    defaults model sources uniformly deep inside the body (U(0,1)); surface
    sensors are better served by a thin boundary band, e.g. U(0, b) with
    level_mean = b/2 and level_var = b^2/12 for a small b.
    """

    layout: StateLayout
    net: np.ndarray
    grid_basis: GridBasis
    pseudo_noise_floor: float = 1e-6
    level_mean: float = ALPHA_MEAN
    level_var: float = ALPHA_VAR
    _base_unscaled: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.net = np.asarray(self.net, dtype=float)
        if self.layout.method == "m2":
            ones = np.ones((self.layout.surface.num_cols, self.layout.surface.num_rows))
            self._base_unscaled = eval_grid(self.grid_basis, self.net, ones, np.ones(3))

    def surface_points(self, states: np.ndarray) -> np.ndarray:
        """Grid surface points (..., G, 3) for a batch of state vectors."""
        states = np.asarray(states, dtype=float)
        scaling = states[..., IDX_S]
        if self._base_unscaled is not None:
            pts = scaling[..., None, None, :] * self._base_unscaled
        else:
            weights = self.layout.full_weights(states)
            pts = eval_grid(self.grid_basis, self.net, weights, scaling)
        return pts.reshape(states.shape[:-1] + (-1, 3))


def predict(belief: GaussianBelief, config: ProcessNoiseConfig,
            ctx: ShapeDynamicsContext, params: UtParams = UtParams()) -> GaussianBelief:
    """UT prediction through the CCV + shape process model."""
    layout = ctx.layout
    if belief.mean.size != layout.dim:
        raise ContractViolationError("belief dimension does not match the layout")

    def f(states, noises):
        return process_model(states, noises, config, ctx)

    return unscented_predict(belief, f, config.noise_variances(layout), params,
                             angular=(IDX_YAW,))


def update(belief: GaussianBelief, measurements: MeasurementSet,
           model: ShapeMeasurementModel, params: UtParams = UtParams()) -> GaussianBelief:
    """Stacked level-set pseudo-measurement update.

    A frame with no measurements is a no-op.  The augmented belief appends the
    3n_k measurement-noise coordinates and the n_k level scalings; each sigma
    point evaluates the stacked g once, with one surface-grid build per sigma
    point reused across all its measurements.
    """
    n_k = len(measurements)
    if n_k == 0:
        return belief.copy()
    if n_k > MAX_MEASUREMENTS_PER_UPDATE:
        raise ContractViolationError(
            f"update supports at most {MAX_MEASUREMENTS_PER_UPDATE} measurements, got {n_k}"
        )
    layout = model.layout
    n = belief.mean.size
    if n != layout.dim:
        raise ContractViolationError("belief dimension does not match the layout")

    dim = n + 4 * n_k
    gamma = np.sqrt(dim + params.lam(dim))
    wm, wc = ut_weights(dim, params)
    low_state = cholesky_with_jitter(belief.cov)

    # noise square roots
    cov_stack = measurements.cov_stack()
    if measurements.homogeneous:
        low_r = cholesky_with_jitter(measurements.noise_cov)
        lows_r = np.broadcast_to(low_r, (n_k, 3, 3))
        sqrt_inv = np.broadcast_to(noise_sqrt_inverse(measurements.noise_cov), (n_k, 3, 3))
    else:
        lows_r = np.stack([cholesky_with_jitter(cov_stack[l]) for l in range(n_k)])
        sqrt_inv = np.stack([noise_sqrt_inverse(cov_stack[l]) for l in range(n_k)])
    sqrt_inv_mean = noise_sqrt_inverse(measurements.mean_cov())

    # state sigma points: base + 2n perturbations
    offsets = gamma * low_state.T
    states = np.concatenate(
        [belief.mean[None, :], belief.mean[None, :] + offsets, belief.mean[None, :] - offsets]
    )
    d_rows, dmax_rows = _signed_distance_rows(states, measurements.points, model,
                                              sqrt_inv, sqrt_inv_mean)

    a_mean = model.level_mean
    g_matrix = np.empty((2 * dim + 1, n_k))
    full_rows = a_mean * dmax_rows[:, None] - d_rows
    base_row = full_rows[0]
    g_matrix[:] = base_row
    g_matrix[1:n + 1] = full_rows[1:n + 1]
    g_matrix[dim + 1:dim + n + 1] = full_rows[n + 1:]

    # measurement-noise perturbations touch a single measurement each
    w_cols = gamma * np.transpose(lows_r, (0, 2, 1))      # (n_k, comp, 3)
    meas_idx = np.repeat(np.arange(n_k), 3)
    pts_plus = measurements.points[meas_idx] - w_cols.reshape(-1, 3)
    pts_minus = measurements.points[meas_idx] + w_cols.reshape(-1, 3)
    base_state = states[0]
    d_plus = _signed_distance_single(base_state, pts_plus, model, sqrt_inv[meas_idx],
                                     dmax_rows[0])
    d_minus = _signed_distance_single(base_state, pts_minus, model, sqrt_inv[meas_idx],
                                      dmax_rows[0])
    rows_w_plus = np.arange(n + 1, n + 1 + 3 * n_k)
    g_matrix[rows_w_plus, meas_idx] = a_mean * dmax_rows[0] - d_plus
    g_matrix[rows_w_plus + dim, meas_idx] = a_mean * dmax_rows[0] - d_minus

    # level-scaling perturbations only shift the alpha * d_max term
    alpha_offset = gamma * np.sqrt(model.level_var)
    rows_a = np.arange(n + 1 + 3 * n_k, n + 1 + 4 * n_k)
    l_idx = np.arange(n_k)
    g_matrix[rows_a, l_idx] = (a_mean + alpha_offset) * dmax_rows[0] - d_rows[0]
    g_matrix[rows_a + dim, l_idx] = (a_mean - alpha_offset) * dmax_rows[0] - d_rows[0]

    # state deviations: zero for noise-perturbing rows
    state_dev = np.zeros((2 * dim + 1, n))
    dev_full = _wrapped_deviations(states, belief.mean, (IDX_YAW,))
    state_dev[1:n + 1] = dev_full[1:n + 1]
    state_dev[dim + 1:dim + n + 1] = dev_full[n + 1:]

    return _finish_update(belief, state_dev, g_matrix, wm, wc, np.zeros(n_k),
                          model.pseudo_noise_floor, (IDX_YAW,), layout)


def _signed_distance_rows(states: np.ndarray, points: np.ndarray,
                          model: ShapeMeasurementModel, sqrt_inv: np.ndarray,
                          sqrt_inv_mean: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Signed distances d (B, n_k) and d_max (B,) for a batch of states."""
    pts = model.surface_points(states)                     # (B, G, 3)
    norms = np.linalg.norm(pts, axis=2)
    safe = np.where(norms > 0, norms, 1.0)
    dirs = pts / safe[:, :, None]
    dmax = np.linalg.norm(np.einsum("ij,bgj->bgi", sqrt_inv_mean, pts), axis=2).max(axis=1)

    yaw = states[:, IDX_YAW]
    cos, sin = np.cos(yaw), np.sin(yaw)
    delta = points[None, :, :] - states[:, None, 0:3]      # (B, n_k, 3)
    zx = cos[:, None] * delta[:, :, 0] + sin[:, None] * delta[:, :, 1]
    zy = -sin[:, None] * delta[:, :, 0] + cos[:, None] * delta[:, :, 1]
    z = np.stack([zx, zy, delta[:, :, 2]], axis=2)

    znorm = np.linalg.norm(z, axis=2)
    zdir = z / np.where(znorm > 0, znorm, 1.0)[:, :, None]
    cos_angle = np.einsum("bmc,bgc->bmg", zdir, dirs)
    idx = np.argmax(cos_angle, axis=2)                     # (B, n_k)
    nodes = np.take_along_axis(pts, idx[:, :, None], axis=1)
    node_norms = np.take_along_axis(norms, idx, axis=1)
    diff = z - nodes
    md = np.linalg.norm(np.einsum("mij,bmj->bmi", sqrt_inv, diff), axis=2)
    inside = znorm <= node_norms
    d = np.where(inside, md, -md)
    # points exactly at the center take the deepest-interior value
    at_origin = znorm <= 1e-12
    if np.any(at_origin):
        d = np.where(at_origin, dmax[:, None], d)
    return d, dmax


def _signed_distance_single(state: np.ndarray, world_points: np.ndarray,
                            model: ShapeMeasurementModel, sqrt_inv: np.ndarray,
                            dmax: float) -> np.ndarray:
    """Signed distances of world points against one state's surface grid."""
    pts = model.surface_points(state[None, :])[0]
    norms = np.linalg.norm(pts, axis=1)
    dirs = pts / np.where(norms > 0, norms, 1.0)[:, None]
    yaw = state[IDX_YAW]
    cos, sin = np.cos(yaw), np.sin(yaw)
    delta = world_points - state[0:3]
    z = np.stack(
        [cos * delta[:, 0] + sin * delta[:, 1],
         -sin * delta[:, 0] + cos * delta[:, 1],
         delta[:, 2]], axis=1,
    )
    znorm = np.linalg.norm(z, axis=1)
    zdir = z / np.where(znorm > 0, znorm, 1.0)[:, None]
    idx = np.argmax(zdir @ dirs.T, axis=1)
    nodes = pts[idx]
    diff = z - nodes
    md = np.linalg.norm(np.einsum("mij,mj->mi", sqrt_inv, diff), axis=1)
    d = np.where(znorm <= norms[idx], md, -md)
    return np.where(znorm <= 1e-12, dmax, d)
