"""Process models for the augmented target state.

State vector layout (flattened):

    [m_x, m_y, m_z, yaw, v, c, s_x, s_y, s_z, (w_0 ... w_{nw-1})]

The trailing weight block exists only for the weights-and-scaling method; the
scaling-only method stops after s_z.  Kinematics follow the closed-form
constant-curvature-and-velocity arc with a straight-line limit for small
curvature.  Weight dynamics add a Gaussian-curvature-proportional increment,
normalized by the largest curvature over the control-point parameter nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractViolationError
from .nurbs import GridBasis, SurfaceLayout, eval_grid_curvature, greville_abscissae

CURVATURE_EPS = 1e-6     # below this |c| the arc degenerates to a straight line
SCALE_FLOOR = 1e-3
WEIGHT_FLOOR = 1e-2

IDX_M = slice(0, 3)
IDX_YAW = 3
IDX_V = 4
IDX_C = 5
IDX_S = slice(6, 9)
KINEMATIC_DIM = 9


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w) if np.ndim(a) else float(np.pi if w == -np.pi else w)


@dataclass(frozen=True)
class StateLayout:
    """Index bookkeeping for one tracking method's state vector."""

    method: str                       # "m1" estimates weights, "m2" only scaling
    surface: SurfaceLayout

    def __post_init__(self):
        if self.method not in ("m1", "m2"):
            raise ContractViolationError(f"unknown method {self.method!r}")

    @property
    def num_weights(self) -> int:
        return self.surface.num_weight_params if self.method == "m1" else 0

    @property
    def dim(self) -> int:
        return KINEMATIC_DIM + self.num_weights

    @property
    def idx_weights(self) -> slice:
        return slice(KINEMATIC_DIM, self.dim)

    def full_weights(self, x: np.ndarray) -> np.ndarray:
        """Weight grid (..., nu+1, nv+1) for state vectors (..., dim)."""
        x = np.asarray(x, dtype=float)
        if self.method == "m2":
            shape = x.shape[:-1] + (self.surface.num_cols, self.surface.num_rows)
            return np.ones(shape)
        lay = self.surface
        distinct = x[..., self.idx_weights].reshape(
            x.shape[:-1] + (lay.num_distinct_cols, lay.num_rows)
        )
        return lay.expand_columns(distinct)


@dataclass(frozen=True)
class TargetState:
    """Structured view of one state vector."""

    center: np.ndarray
    yaw: float
    velocity: float
    curvature: float
    scaling: np.ndarray
    weights: np.ndarray | None = None

    @staticmethod
    def from_vector(x: np.ndarray, layout: StateLayout) -> "TargetState":
        x = np.asarray(x, dtype=float)
        w = x[layout.idx_weights].copy() if layout.method == "m1" else None
        return TargetState(x[IDX_M].copy(), float(x[IDX_YAW]), float(x[IDX_V]),
                           float(x[IDX_C]), x[IDX_S].copy(), w)

    def to_vector(self, layout: StateLayout) -> np.ndarray:
        x = np.zeros(layout.dim)
        x[IDX_M] = self.center
        x[IDX_YAW] = self.yaw
        x[IDX_V] = self.velocity
        x[IDX_C] = self.curvature
        x[IDX_S] = self.scaling
        if layout.method == "m1":
            if self.weights is None:
                raise ContractViolationError("weights required for the m1 layout")
            x[layout.idx_weights] = self.weights
        return x


@dataclass(frozen=True)
class ProcessNoiseConfig:
    """Per-coordinate process variances plus unknown-input variances."""

    dt: float = 0.1
    q_pos: float = 1e-4              # m^2 per axis
    q_yaw: float = 1e-4              # rad^2
    q_v: float = 0.0                 # (m/s)^2 on top of the input noise
    q_c: float = 0.0
    q_scale: float = 1e-7
    q_weight: float = 0.1
    c_vdot: float = 1e-4             # (m/s^2)^2
    c_cdot: float = 1e-4             # (1/(m s))^2
    nu: float = 0.001                # curvature-regularization damping

    def __post_init__(self):
        if self.dt <= 0:
            raise ContractViolationError("dt must be positive")
        for name in ("q_pos", "q_yaw", "q_v", "q_c", "q_scale", "q_weight", "c_vdot", "c_cdot"):
            if getattr(self, name) < 0:
                raise ContractViolationError(f"{name} must be non-negative")

    def noise_variances(self, layout: StateLayout) -> np.ndarray:
        """Diagonal of the additive process noise in state order.

        Unknown inputs (acceleration, curvature rate) enter as velocity and
        curvature increments with variance C * dt^2.
        """
        dt2 = self.dt * self.dt
        diag = np.concatenate([
            np.full(3, self.q_pos),
            [self.q_yaw, self.q_v + self.c_vdot * dt2, self.q_c + self.c_cdot * dt2],
            np.full(3, self.q_scale),
            np.full(layout.num_weights, self.q_weight),
        ])
        return diag


def ccv_step(m: np.ndarray, yaw, v, c, dt: float):
    """Closed-form constant-curvature-and-velocity arc, vectorized.

    m is (..., 3); yaw, v, c broadcast against it.  Height is preserved.
    """
    yaw = np.asarray(yaw, dtype=float)
    v = np.asarray(v, dtype=float)
    c = np.asarray(c, dtype=float)
    dpsi = v * c * dt
    new_yaw = yaw + dpsi
    curved = np.abs(c) > CURVATURE_EPS
    c_safe = np.where(curved, c, 1.0)
    # straight-line limit keeps the O(c) term so the flow property (n steps of
    # dt == one step of n*dt) holds to 1e-9 across the branch threshold
    half_arc = 0.5 * v * dt * dpsi
    dx = np.where(
        curved,
        (np.sin(new_yaw) - np.sin(yaw)) / c_safe,
        v * dt * np.cos(yaw) - half_arc * np.sin(yaw),
    )
    dy = np.where(
        curved,
        (np.cos(yaw) - np.cos(new_yaw)) / c_safe,
        v * dt * np.sin(yaw) + half_arc * np.cos(yaw),
    )
    out = np.array(m, dtype=float, copy=True)
    out[..., 0] += dx
    out[..., 1] += dy
    return out, new_yaw


def ccv_predict(x: np.ndarray, dt: float) -> np.ndarray:
    """Deterministic kinematic prediction of a state vector (or batch)."""
    if dt <= 0:
        raise ContractViolationError("dt must be positive")
    x = np.array(x, dtype=float, copy=True)
    m, yaw = ccv_step(x[..., IDX_M], x[..., IDX_YAW], x[..., IDX_V], x[..., IDX_C], dt)
    x[..., IDX_M] = m
    x[..., IDX_YAW] = yaw
    return x


@dataclass
class ShapeDynamicsContext:
    """Prototype net plus cached Greville-node basis for weight regularization."""

    layout: StateLayout
    net: np.ndarray
    basis: GridBasis = field(init=False)
    weight_node_index: np.ndarray = field(init=False)

    def __post_init__(self):
        lay = self.layout.surface
        gu = greville_abscissae(lay.knots_u())
        gv = greville_abscissae(lay.knots_v())
        self.basis = GridBasis.build(lay, gu, gv, derivs=True)
        # distinct weight (i, j) reads curvature at Greville node (i, j)
        cols = np.arange(lay.num_distinct_cols)
        rows = np.arange(lay.num_rows)
        self.weight_node_index = (cols[:, None], rows[None, :])


def weight_increments(x: np.ndarray, ctx: ShapeDynamicsContext, nu: float) -> np.ndarray:
    """Curvature-regularization increment for every distinct weight.

    Each weight moves by nu times the Gaussian curvature at its control
    point's Greville parameter node, normalized by the largest curvature over
    those nodes.  Negative and degenerate curvatures contribute nothing, so
    increments stay within [0, nu].
    """
    layout = ctx.layout
    if layout.method != "m1" or nu == 0.0:
        return np.zeros(np.shape(x)[:-1] + (layout.num_weights,))
    x = np.asarray(x, dtype=float)
    weights = layout.full_weights(x)
    scaling = x[..., IDX_S]
    k = eval_grid_curvature(ctx.basis, ctx.net, weights, scaling)
    k = np.maximum(k, 0.0)
    k = k[..., ctx.weight_node_index[0], ctx.weight_node_index[1]]
    kmax = k.max(axis=(-2, -1), keepdims=True)
    safe = np.where(kmax > 0.0, kmax, 1.0)
    inc = nu * k / safe
    return inc.reshape(np.shape(x)[:-1] + (layout.num_weights,))


def weight_predict(x: np.ndarray, ctx: ShapeDynamicsContext, nu: float) -> np.ndarray:
    """Deterministic weight-dynamics step: w + nu * normalized curvature."""
    if ctx.layout.method != "m1":
        raise ContractViolationError("weight dynamics only apply to the m1 layout")
    x = np.asarray(x, dtype=float)
    return x[..., ctx.layout.idx_weights] + weight_increments(x, ctx, nu)


def process_model(x: np.ndarray, noise: np.ndarray, config: ProcessNoiseConfig,
                  ctx: ShapeDynamicsContext) -> np.ndarray:
    """One process step: kinematics, weight dynamics, additive noise, clamps.

    noise carries one draw per state coordinate (the augmented process-noise
    layout equals the state layout; input noise is folded into the velocity
    and curvature entries).
    """
    x = np.asarray(x, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if noise.shape != x.shape:
        raise ContractViolationError("noise draw dimension must match the state layout")
    layout = ctx.layout
    if x.shape[-1] != layout.dim:
        raise ContractViolationError("state dimension does not match the layout")
    out = ccv_predict(x, config.dt)
    if layout.method == "m1":
        out[..., layout.idx_weights] += weight_increments(x, ctx, config.nu)
    out = out + noise
    out[..., IDX_YAW] = wrap_angle(out[..., IDX_YAW])
    out[..., IDX_S] = np.maximum(out[..., IDX_S], SCALE_FLOOR)
    if layout.method == "m1":
        out[..., layout.idx_weights] = np.maximum(out[..., layout.idx_weights], WEIGHT_FLOOR)
    return out
