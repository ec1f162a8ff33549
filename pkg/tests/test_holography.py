import json
import math

import numpy as np
import pytest

from geoscatter.errors import BallTooSmall, EndpointMismatch, IncompatibleGrid, PhiNotInward, SegmentNotInTable
from geoscatter.flow import FlowConfig, integrate_batch
from geoscatter.holography import (
    _lookup,
    balanced_check,
    build_trajectory_complex,
    conjugacy_check,
    cut_and_scatter_check,
    lyapunov_bigball,
    parse_phi,
    theta_reparametrization,
)
from geoscatter.models import (
    SceneSpec,
    build_model,
    bump_scene,
    disk_scene,
    hyperbolic_ball_scene,
    probe_points,
    torus_scene,
)
from geoscatter.scattering import scatter_grid, scatter_states, state_from_chart


@pytest.fixture(scope="module")
def disk():
    return build_model(disk_scene())


@pytest.fixture(scope="module")
def hyp():
    return build_model(hyperbolic_ball_scene(0.5))


# -- trajectory complex -------------------------------------------------------


def test_disk_complex_is_a_cylinder(disk):
    table = scatter_grid(disk, 64, 32, FlowConfig())
    cx = build_trajectory_complex(table)
    assert cx.n_components == 1
    assert len(cx.nodes) == 2048  # node count equals non-trapped record count
    assert cx.chi == 0  # V - E + F of the open cylinder of oriented chords
    assert cx.chi_graph == -cx.n_faces
    assert cx.omega_census == {(1, 1): 2048}
    assert all(i < j for i, j in cx.edges)


def test_two_disjoint_domains_give_two_components():
    spec = SceneSpec("FlatDomain", 2, {"components": [
        {"type": "circle", "center": [0.0, 0.0], "radius": 1.0, "role": "outer"},
        {"type": "circle", "center": [5.0, 0.0], "radius": 1.0, "role": "outer"}]})
    table = scatter_grid(build_model(spec), 16, 8, FlowConfig())
    assert build_trajectory_complex(table).n_components == 2


def test_single_record_complex(disk):
    rec = scatter_states(disk, [state_from_chart(disk, 0, 0.0, math.pi / 2)], FlowConfig())
    cx = build_trajectory_complex(rec, {"n_pos": 1, "n_dir": 1})
    assert (len(cx.nodes), len(cx.edges), cx.chi) == (1, 0, 1)


def test_incompatible_grids(disk):
    table = scatter_grid(disk, 4, 3, FlowConfig())
    with pytest.raises(IncompatibleGrid):
        build_trajectory_complex(table.records, {"n_pos": 5, "n_dir": 3})
    with pytest.raises(IncompatibleGrid):
        build_trajectory_complex(table.records, {})
    with pytest.raises(IncompatibleGrid):
        build_trajectory_complex(table.records, {"n_pos": 4, "n_dir": 3, "dim": 3})


# -- big-ball Lyapunov function ---------------------------------------------


def test_bigball_examples(disk, hyp):
    F = lyapunov_bigball(disk, radius=2.0)
    assert F([1, 0], [-1, 0])[0] == pytest.approx(1.0)
    assert F([-1, 0], [-1, 0])[0] == pytest.approx(3.0)
    G = lyapunov_bigball(hyp)
    a = G([0.5, 0], [-1, 0])[0]
    b = G([-0.5, 0], [-1, 0])[0]
    assert b - a == pytest.approx(4 * math.atanh(0.5), abs=1e-12)
    with pytest.raises(BallTooSmall):
        lyapunov_bigball(disk, radius=0.5)
    with pytest.raises(BallTooSmall):
        lyapunov_bigball(hyp, radius=1.2)


def test_balance_detects_scaled_function(disk):
    table = scatter_grid(disk, 16, 8, FlowConfig())
    F = lyapunov_bigball(disk)
    assert balanced_check(disk, F, table) <= 1e-6
    res = balanced_check(disk, lambda X, U: 2 * F(X, U), table)
    assert res == pytest.approx(table.summary["length_max"], rel=1e-9)


@pytest.mark.parametrize("name", ["disk", "hyp"])
def test_lyapunov_strictly_increasing(name, disk, hyp):
    model = {"disk": disk, "hyp": hyp}[name]
    F = lyapunov_bigball(model)
    rng = np.random.default_rng(1)
    X = probe_points(model, seed=1)
    X = X[model.boundary_z(X) < -1e-3][:40]
    V = rng.normal(size=X.shape)
    phi, _ = model.factor(X)
    P = V / np.linalg.norm(V, axis=1, keepdims=True) * np.sqrt(phi)[:, None]
    for r in integrate_batch(model, X, P, FlowConfig(), record=True):
        if len(r.checkpoints) < 2:
            continue
        xs = np.array([c[1] for c in r.checkpoints])
        ps = np.array([c[2] for c in r.checkpoints])
        vals = F(xs, ps)
        assert np.min(np.diff(vals)) > 0


# -- Theta -------------------------------------------------------------------


def test_theta_identity():
    t = np.linspace(0, 2, 51)
    th = theta_reparametrization(t, np.ones_like(t), np.ones_like(t))
    y = np.linspace(0, 2, 17)
    assert np.allclose(th(y), y, atol=1e-12)
    assert np.allclose(th.derivative(y), 1.0)


def test_theta_cosine_bump_weight():
    T = 3.0
    t = np.linspace(0, T, 601)
    w = 1 + 0.5 * np.cos(2 * np.pi * t / T)  # zero-mean bump: integral of w is T
    th = theta_reparametrization(t, np.ones_like(t), w)
    assert abs(float(th(0.0))) <= 1e-12 and abs(float(th(T)) - T) <= 1e-10
    # K(Theta) = y with K(s) = s + (T / 4 pi) sin(2 pi s / T)
    y = np.linspace(0.1, 2.9, 15)
    s = th(y)
    assert np.allclose(s + T / (4 * np.pi) * np.sin(2 * np.pi * s / T), y, atol=1e-8)
    assert np.allclose(th.derivative(y), 1 / (1 + 0.5 * np.cos(2 * np.pi * s / T)), atol=1e-8)


def test_theta_endpoint_mismatch():
    t = np.linspace(0, 1, 11)
    with pytest.raises(EndpointMismatch):
        theta_reparametrization(t, np.ones_like(t), 1.1 * np.ones_like(t))
    with pytest.raises(ValueError):
        theta_reparametrization(t, np.ones_like(t), -np.ones_like(t))


# -- conjugacy ---------------------------------------------------------------


def test_parse_phi(tmp_path):
    assert parse_phi("identity")(0, 0.3, 1.0) == (0, 0.3, 1.0)
    c, s, th = parse_phi(f"rotate:{math.pi}")(0, 0.75, 1.0)
    assert (c, th) == (0, 1.0) and s == pytest.approx(0.25)
    f = tmp_path / "phi.json"
    f.write_text(json.dumps({"kind": "rotate", "angle": math.pi / 2}))
    assert parse_phi(str(f))(0, 0.0, 0.5)[1] == pytest.approx(0.25)
    f.write_text(json.dumps({"kind": "shear"}))
    with pytest.raises(ValueError):
        parse_phi(str(f))


def test_identity_conjugacy(disk):
    rep = conjugacy_check(disk, disk, parse_phi("identity"), FlowConfig(), with_lens=True, n_pos=8, n_dir=4)
    assert rep.verdict == "Conjugate"
    assert rep.max_exit_mismatch == 0.0 and rep.max_lens_mismatch == 0.0
    assert rep.property_a_screen and rep.to_dict()["max_contact_order"] == 1


def test_rotation_of_off_center_disk(disk):
    a = build_model(disk_scene(1.0, (0.3, -0.2)))
    ang = 1.1
    b = build_model(disk_scene(1.0, (0.3 * math.cos(ang) + 0.2 * math.sin(ang),
                                     0.3 * math.sin(ang) - 0.2 * math.cos(ang))))
    rep = conjugacy_check(a, b, parse_phi(f"rotate:{ang!r}"), FlowConfig(), with_lens=True, n_pos=8, n_dir=4)
    assert rep.conjugate and rep.max_exit_mismatch <= 1e-6


def test_bump_breaks_scattering_without_lens(disk):
    other = build_model(bump_scene(disk_scene(), (0.2, 0.1), 0.1, 0.5))
    rep = conjugacy_check(disk, other, parse_phi("identity"), FlowConfig(), n_pos=8, n_dir=4)
    assert rep.verdict == "NotConjugate" and rep.offenders


def test_phi_not_inward(disk):
    with pytest.raises(PhiNotInward):
        conjugacy_check(disk, disk, lambda c, s, th: (c, s, -th), FlowConfig(), n_pos=4, n_dir=3)


# -- cut & scatter -----------------------------------------------------------


@pytest.fixture(scope="module")
def torus():
    return build_model(torus_scene([((0.5, 0.5), 0.3)]))


def test_cut_and_scatter_small(torus):
    cfg = FlowConfig(max_length=4.0)
    table = scatter_grid(torus, 32, 16, cfg)
    rep = cut_and_scatter_check(torus, table, cfg, n_geo=30, length=3.0, seed=1)
    assert rep.residual <= 1e-5
    assert rep.n_table_segments == 30 and rep.n_fresh_segments > 0


def test_cut_and_scatter_degenerate_length(torus):
    table = scatter_grid(torus, 4, 3, FlowConfig(max_length=4.0))
    assert cut_and_scatter_check(torus, table, FlowConfig(), length=0.0).residual == 0.0


def test_cut_and_scatter_rejects_foreign_grid(torus):
    cfg = FlowConfig(max_length=4.0)
    table = scatter_grid(torus, 8, 4, cfg)
    index = {}
    for r in table.records:
        index.setdefault((r.entry.component, int(round(r.entry.s * 8)) % 8), []).append(r)
    off_grid = state_from_chart(torus, 0, 0.01, 1.0)
    with pytest.raises(SegmentNotInTable):
        _lookup(index, torus, off_grid, 1 / 8, math.pi / 5)
    with pytest.raises(ValueError):
        cut_and_scatter_check(build_model(disk_scene()), table, cfg)


def test_torus_translation_conjugacy():
    a = build_model(torus_scene([((0.5, 0.5), 0.25)]))
    b = build_model(torus_scene([((0.2, 0.7), 0.25)]))
    rep = conjugacy_check(a, b, parse_phi("identity"), FlowConfig(max_length=10.0), with_lens=True, n_pos=8, n_dir=4)
    assert rep.conjugate


def test_uncut_geodesics_are_checked_against_the_line():
    small = build_model(torus_scene([((0.5, 0.5), 0.05)]))
    cfg = FlowConfig(max_length=4.0)
    table = scatter_grid(small, 32, 16, cfg)
    rep = cut_and_scatter_check(small, table, cfg, n_geo=40, length=1.5, seed=2)
    assert rep.n_geodesics == 40 and rep.n_uncut > 0
    assert rep.residual <= 1e-5
