import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nurbstrack.errors import ContractViolationError
from nurbstrack.motion import (
    IDX_C,
    IDX_M,
    IDX_S,
    IDX_V,
    IDX_YAW,
    ProcessNoiseConfig,
    ShapeDynamicsContext,
    StateLayout,
    TargetState,
    ccv_predict,
    process_model,
    weight_increments,
    weight_predict,
    wrap_angle,
)
from nurbstrack.nurbs import SurfaceLayout


def rk4_arc_oracle(x0, y0, yaw0, v, c, dt, substeps=1000):
    """Fine-step RK4 integration of xdot = v cos(yaw), ydot = v sin(yaw), yawdot = v*c."""
    h = dt / substeps
    state = np.array([x0, y0, yaw0], dtype=float)

    def deriv(s):
        return np.array([v * np.cos(s[2]), v * np.sin(s[2]), v * c])

    for _ in range(substeps):
        k1 = deriv(state)
        k2 = deriv(state + 0.5 * h * k1)
        k3 = deriv(state + 0.5 * h * k2)
        k4 = deriv(state + h * k3)
        state = state + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return state


def m2_layout():
    return StateLayout("m2", SurfaceLayout(5, 4, 2, 2, closed_u=True))


def m1_layout():
    return StateLayout("m1", SurfaceLayout(7, 4, 3, 3, closed_u=True))


def base_state(layout, **kw):
    x = np.zeros(layout.dim)
    x[IDX_S] = 1.0
    if layout.method == "m1":
        x[layout.idx_weights] = 1.0
    for key, val in kw.items():
        idx = {"m": IDX_M, "yaw": IDX_YAW, "v": IDX_V, "c": IDX_C}[key]
        x[idx] = val
    return x


def ring_context(layout, bulge=0.0):
    """Closed prototype net around the origin for weight-dynamics tests."""
    lay = layout.surface
    thetas = 2 * np.pi * (np.arange(lay.num_distinct_cols) + 0.5) / lay.num_distinct_cols
    zs = np.linspace(-0.7, 0.7, lay.num_rows)
    net = np.zeros((lay.num_cols, lay.num_rows, 3))
    for i, th in enumerate(thetas):
        for j, z in enumerate(zs):
            r = 1.0 + bulge * np.exp(-((i - 2) ** 2 + (j - 2) ** 2))
            net[i, j] = (r * np.cos(th), r * np.sin(th), z)
    net[-1] = net[0]
    return ShapeDynamicsContext(layout, net)


def planar_context(layout):
    """Flat sheet: zero Gaussian curvature everywhere."""
    lay = layout.surface
    net = np.zeros((lay.num_cols, lay.num_rows, 3))
    net[:, :, 0] = np.linspace(0, 1, lay.num_cols)[:, None]
    net[:, :, 1] = np.linspace(0, 1, lay.num_rows)[None, :]
    if lay.closed_u:
        net[-1] = net[0]
    return ShapeDynamicsContext(layout, net)


# --- ccv_predict -----------------------------------------------------------------

def test_ccv_zero_velocity_fixed_point():
    x = base_state(m2_layout(), yaw=0.8, c=0.3)
    np.testing.assert_array_equal(ccv_predict(x, 0.1), x)


def test_ccv_straight_line_limit():
    x = base_state(m2_layout(), v=10.0)
    out = ccv_predict(x, 0.1)
    assert out[0] == pytest.approx(1.0)
    assert out[IDX_YAW] == 0.0
    assert out[1] == 0.0


def test_ccv_matches_rk4_oracle():
    x = base_state(m2_layout(), v=5.0, c=0.1)
    out = ccv_predict(x, 0.1)
    want = rk4_arc_oracle(0.0, 0.0, 0.0, 5.0, 0.1, 0.1)
    np.testing.assert_allclose(out[[0, 1]], want[:2], atol=1e-6)
    np.testing.assert_allclose(out[IDX_YAW], want[2], atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(-10, 10), st.floats(-0.3, 0.3), st.floats(-3, 3),
    st.integers(1, 8),
)
def test_ccv_flow_property(v, c, yaw, n):
    # iterating n steps of dt equals one step of n*dt
    dt = 0.05
    x = base_state(m2_layout(), v=v, c=c, yaw=yaw)
    stepped = x
    for _ in range(n):
        stepped = ccv_predict(stepped, dt)
    once = ccv_predict(x, n * dt)
    np.testing.assert_allclose(stepped, once, atol=1e-9)


def test_ccv_batch_matches_single():
    rng = np.random.default_rng(0)
    xs = np.stack([base_state(m2_layout(), v=rng.uniform(-5, 5), c=rng.uniform(-0.2, 0.2),
                              yaw=rng.uniform(-3, 3)) for _ in range(16)])
    batch = ccv_predict(xs, 0.1)
    for k in range(16):
        np.testing.assert_allclose(batch[k], ccv_predict(xs[k], 0.1), atol=1e-14)


def test_ccv_rejects_bad_dt():
    with pytest.raises(ContractViolationError):
        ccv_predict(base_state(m2_layout()), 0.0)


# --- weight dynamics ----------------------------------------------------------------

def test_weight_predict_planar_unchanged():
    layout = m1_layout()
    ctx = planar_context(layout)
    x = base_state(layout)
    np.testing.assert_array_equal(weight_predict(x, ctx, 0.001), x[layout.idx_weights])


def test_weight_predict_zero_damping_unchanged():
    layout = m1_layout()
    ctx = ring_context(layout, bulge=0.4)
    x = base_state(layout)
    np.testing.assert_array_equal(weight_predict(x, ctx, 0.0), x[layout.idx_weights])


def test_weight_increment_at_strict_argmax_is_nu():
    layout = m1_layout()
    ctx = ring_context(layout, bulge=0.8)
    x = base_state(layout)
    nu = 0.02
    inc = weight_increments(x, ctx, nu)
    assert inc.max() == pytest.approx(nu, rel=1e-12)
    assert np.all(inc >= 0.0)
    assert np.all(inc <= nu + 1e-15)


def test_weight_incredes_bounded_for_random_states():
    layout = m1_layout()
    ctx = ring_context(layout, bulge=0.5)
    rng = np.random.default_rng(5)
    nu = 0.01
    for _ in range(20):
        x = base_state(layout)
        x[layout.idx_weights] = rng.uniform(0.3, 3.0, layout.num_weights)
        x[IDX_S] = rng.uniform(0.5, 2.0, 3)
        inc = weight_increments(x, ctx, nu)
        assert np.all(inc >= 0.0) and np.all(inc <= nu + 1e-15)


# --- process_model -----------------------------------------------------------------

def test_process_model_identity_with_zero_noise():
    layout = m1_layout()
    ctx = planar_context(layout)
    cfg = ProcessNoiseConfig(dt=0.1, nu=0.0)
    x = base_state(layout, yaw=0.5)
    out = process_model(x, np.zeros_like(x), cfg, ctx)
    np.testing.assert_allclose(out, x, atol=1e-15)


def test_process_model_m2_shape_random_walk_only():
    layout = m2_layout()
    ctx = ring_context(layout)
    cfg = ProcessNoiseConfig(dt=0.1)
    x = base_state(layout, v=3.0)
    out = process_model(x, np.zeros_like(x), cfg, ctx)
    assert out[0] != x[0]
    np.testing.assert_array_equal(out[IDX_S], x[IDX_S])
    np.testing.assert_array_equal(out[IDX_C], x[IDX_C])


def test_process_model_monte_carlo_mean():
    layout = m2_layout()
    ctx = ring_context(layout)
    cfg = ProcessNoiseConfig(dt=0.1, q_pos=0.01, q_yaw=1e-4, c_vdot=0.04, c_cdot=1e-4,
                             q_scale=1e-6)
    x = base_state(layout, v=4.0, c=0.05, yaw=0.3)
    rng = np.random.default_rng(7)
    n = 100_000
    sig = np.sqrt(cfg.noise_variances(layout))
    draws = rng.normal(size=(n, layout.dim)) * sig
    outs = process_model(np.broadcast_to(x, (n, layout.dim)).copy(), draws, cfg, ctx)
    det = process_model(x, np.zeros_like(x), cfg, ctx)
    se = sig / np.sqrt(n)
    for i in range(layout.dim):
        if sig[i] == 0:
            assert outs[:, i].mean() == pytest.approx(det[i], abs=1e-12)
        else:
            assert abs(outs[:, i].mean() - det[i]) < 3.5 * se[i]


def test_process_model_clamps_scale_floor():
    layout = m2_layout()
    ctx = ring_context(layout)
    cfg = ProcessNoiseConfig(dt=0.1)
    x = base_state(layout)
    noise = np.zeros_like(x)
    noise[IDX_S] = -5.0
    out = process_model(x, noise, cfg, ctx)
    assert np.all(out[IDX_S] == 1e-3)


def test_process_model_dimension_mismatch():
    layout = m2_layout()
    ctx = ring_context(layout)
    with pytest.raises(ContractViolationError):
        process_model(base_state(layout), np.zeros(3), ProcessNoiseConfig(), ctx)


# --- misc ---------------------------------------------------------------------------

def test_wrap_angle_range():
    assert wrap_angle(np.pi) == np.pi
    assert wrap_angle(-np.pi) == np.pi
    assert wrap_angle(3 * np.pi) == pytest.approx(np.pi)
    vals = wrap_angle(np.linspace(-10, 10, 101))
    assert np.all(vals > -np.pi) and np.all(vals <= np.pi)


def test_state_round_trip():
    layout = m1_layout()
    rng = np.random.default_rng(11)
    x = rng.uniform(0.1, 2.0, layout.dim)
    ts = TargetState.from_vector(x, layout)
    np.testing.assert_array_equal(ts.to_vector(layout), x)
    m2 = m2_layout()
    x2 = rng.uniform(0.1, 2.0, m2.dim)
    ts2 = TargetState.from_vector(x2, m2)
    assert ts2.weights is None
    np.testing.assert_array_equal(ts2.to_vector(m2), x2)


def test_noise_variances_layout():
    layout = m1_layout()
    cfg = ProcessNoiseConfig(dt=0.1, q_weight=0.25, c_vdot=0.2)
    diag = cfg.noise_variances(layout)
    assert diag.size == layout.dim
    assert diag[IDX_V] == pytest.approx(0.2 * 0.01)
    assert np.all(diag[layout.idx_weights] == 0.25)
