import math

import numpy as np
import pytest

from geoscatter.errors import NoOracle, OutsideCollar
from geoscatter.flow import (
    ContactEvent,
    FlowConfig,
    Trapped,
    closed_form_geodesic,
    derivative_threshold,
    flow_for,
    flow_many,
    flow_step,
    hamiltonian,
    integrate_batch,
    integrate_to_boundary,
    poincare_distance,
)
from geoscatter.models import (
    PhaseState,
    annulus_scene,
    build_model,
    bump_scene,
    disk_scene,
    hyperbolic_ball_scene,
    torus_scene,
)


@pytest.fixture(scope="module")
def disk():
    return build_model(disk_scene())


@pytest.fixture(scope="module")
def hyp():
    return build_model(hyperbolic_ball_scene(0.5))


def test_hamiltonian_examples(disk, hyp):
    assert hamiltonian(disk, [0, 0], [1, 0]) == 0.5
    assert hamiltonian(disk, [0, 0], [0, 0]) == 0.0
    assert hamiltonian(hyp, [0, 0], [2, 0]) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(OutsideCollar):
        hamiltonian(disk, [3.0, 0.0], [1, 0], check_collar=True)


def test_flow_step_straight_line(disk):
    st = flow_step(disk, PhaseState.from_vector(disk, [0, 0], [1, 0]), 0.3)
    assert np.allclose(st.x, [0.3, 0.0], atol=1e-15)
    assert np.allclose(st.p, [1.0, 0.0], atol=1e-15)


def test_flow_step_keeps_energy(hyp):
    st = PhaseState.from_vector(hyp, [0.1, 0.2], [1.0, -0.4])
    nxt = flow_step(hyp, st, 0.01)
    assert abs(hamiltonian(hyp, nxt.x, nxt.p) - hamiltonian(hyp, st.x, st.p)) < 1e-12


def test_radial_hyperbolic_geodesic(hyp):
    st, drift = flow_for(hyp, PhaseState.from_vector(hyp, [0, 0], [1, 0]), 1.0, dt=1e-3)
    assert np.allclose(st.x, [math.tanh(0.5), 0.0], atol=1e-10)
    assert drift <= 1e-9


def test_disk_exit_from_center(disk):
    _, term = integrate_to_boundary(disk, PhaseState.from_vector(disk, [0, 0], [1, 0]), FlowConfig())
    assert isinstance(term, ContactEvent)
    assert np.allclose(term.x, [1, 0], atol=1e-8)
    assert np.allclose(term.u, [1, 0], atol=1e-8)
    assert term.t == pytest.approx(1.0, abs=1e-8)


def test_rational_torus_line_is_trapped():
    m = build_model(torus_scene([((0.5, 0.5), 0.2)]))
    cfg = FlowConfig(max_length=20.0)
    _, term = integrate_to_boundary(m, PhaseState.from_vector(m, [0.1, 0.1], [1, 0]), cfg)
    assert isinstance(term, Trapped)
    assert term.length == pytest.approx(20.0, abs=cfg.step_dt)


def test_inner_tangency_is_order_two_and_stays_inside():
    # the line stays in the annulus: z'' < 0, side Minus, stratum d2+
    m = build_model(annulus_scene())
    res = integrate_batch(m, np.array([[-1.5, -1.0]]), np.array([[1.0, 0.0]]), FlowConfig())[0]
    graze = [c for c in res.contacts if c.order == 2]
    assert len(graze) == 1
    assert graze[0].side == -1 and graze[0].side_name == "Minus"
    assert graze[0].component == 1
    assert np.allclose(graze[0].x, [0, -1], atol=1e-5)
    assert res.terminal.order == 1


def test_closed_form_examples(hyp):
    torus = build_model(torus_scene([((0.5, 0.5), 0.2)]))
    assert np.allclose(closed_form_geodesic(torus, [0.9, 0.9], [1, 0], 0.3), [0.2, 0.9])
    assert np.allclose(closed_form_geodesic(hyp, [0, 0], [0, 0.5], 2.0), [0, math.tanh(1.0)])
    assert np.array_equal(closed_form_geodesic(torus, [0.3, 0.4], [1, 0], 0.0), [0.3, 0.4])
    with pytest.raises(NoOracle):
        closed_form_geodesic(build_model(bump_scene(disk_scene(), (0, 0), 0.1, 0.5)), [0, 0], [1, 0], 1.0)


def test_oracle_agreement_after_length_ten(hyp):
    rng = np.random.default_rng(0)
    X = rng.uniform(-0.3, 0.3, (16, 2))
    V = rng.normal(size=(16, 2))
    phi, _ = hyp.factor(X)
    U = V / np.sqrt(phi[:, None] * np.sum(V * V, axis=1, keepdims=True))
    Xf, _, drift = flow_many(hyp, X, U * phi[:, None], 10.0, 1e-3)
    exact = closed_form_geodesic(hyp, X, U, np.full(16, 10.0))
    # compare in the hyperbolic distance, which is what arc length measures
    assert np.max(poincare_distance(Xf, exact)) <= 1e-7
    assert drift <= 1e-9

    torus = build_model(torus_scene([((0.5, 0.5), 0.2)]))
    Xf, _, _ = flow_many(torus, X + 0.5, V / np.linalg.norm(V, axis=1, keepdims=True), 10.0)
    exact = closed_form_geodesic(torus, X + 0.5, V / np.linalg.norm(V, axis=1, keepdims=True), np.full(16, 10.0))
    d = Xf - exact
    assert np.max(np.abs(d - np.round(d))) <= 1e-7


def test_reversibility_and_arc_length(hyp):
    st = PhaseState.from_vector(hyp, [0.05, -0.1], [0.3, 1.0])
    fwd, _ = flow_for(hyp, st, 3.0, 1e-3)
    back, _ = flow_for(hyp, PhaseState(fwd.x, -fwd.p), 3.0, 1e-3)
    assert np.linalg.norm(back.x - st.x) + np.linalg.norm(back.p + st.p) <= 1e-7
    # unit speed: hyperbolic distance travelled along a geodesic equals the parameter
    assert abs(float(poincare_distance(st.x, fwd.x)) - 3.0) <= 1e-9


def test_recorded_length_is_elapsed_parameter(hyp):
    res = integrate_batch(hyp, np.array([[0.0, 0.0]]), np.array([[2.0, 0.0]]), FlowConfig(), record=True)[0]
    assert res.length == pytest.approx(2 * math.atanh(0.5), abs=1e-9)
    ts = [c[0] for c in res.checkpoints]
    assert all(b > a for a, b in zip(ts, ts[1:]))


def test_event_ordering_on_grazing_trajectories():
    m = build_model(annulus_scene())
    ys = np.linspace(-1.2, -0.8, 21)
    X = np.stack([np.full_like(ys, -1.7), ys], axis=1)
    P = np.tile([1.0, 0.0], (len(ys), 1))
    cfg = FlowConfig()
    for r in integrate_batch(m, X, P, cfg):
        ts = [c.t for c in r.contacts]
        assert all(b - a >= math.sqrt(cfg.boundary_tol) for a, b in zip(ts, ts[1:]))


def test_bump_energy_with_fine_step():
    m = build_model(bump_scene(disk_scene(), (0.2, 0.1), 0.2, 0.5))
    rng = np.random.default_rng(5)
    X = rng.uniform(-0.5, 0.5, (32, 2))
    V = rng.normal(size=(32, 2))
    phi, _ = m.factor(X)
    P = V / np.linalg.norm(V, axis=1, keepdims=True) * np.sqrt(phi)[:, None]
    res = integrate_batch(m, X, P, FlowConfig(step_dt=1e-3))
    assert max(r.max_drift for r in res) <= 1e-9


def test_derivative_threshold_scaling(disk):
    assert derivative_threshold(disk, 1) == pytest.approx(1e-5)
    assert derivative_threshold(disk, 3) == pytest.approx(1e-5 * 2.0 ** -2)


def test_flow_config_defaults(disk):
    cfg = FlowConfig()
    assert cfg.l_max(disk) == pytest.approx(100.0)
    assert cfg.depth(disk) == 3
    assert FlowConfig(max_length=7.0).l_max(disk) == 7.0
