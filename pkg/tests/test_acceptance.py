"""Acceptance criteria 1-12, each at its stated tolerance.

Every test reports one PASS/FAIL line (see conftest.pytest_terminal_summary).
"""

import math
import time

import numpy as np
import pytest
from scipy.optimize import brentq, minimize_scalar

from geoscatter.cli import run
from geoscatter.flow import FlowConfig, closed_form_geodesic, derivative_threshold, flow_many, integrate_batch
from geoscatter.holography import (
    balanced_check,
    conjugacy_check,
    cut_and_scatter_check,
    lyapunov_bigball,
    parse_phi,
    theta_reparametrization,
)
from geoscatter.models import (
    annulus_scene,
    build_model,
    bump_scene,
    disk_scene,
    hyperbolic_ball_scene,
    peanut_scene,
    probe_points,
    rotated_scene,
    torus_scene,
)
from geoscatter.scattering import sample_inward_grid, scatter_grid, scatter_states, state_from_chart
from geoscatter.strata import contact_order, flat_tau_jets, multiplicity_audit, strata_scan
from geoscatter.swiss_cheese import (
    circular_arc_sagitta,
    ellipsoid_bound,
    place_blocking_disks,
    random_arcs,
    theta_star_search,
    verify_ellipsoid_bound,
)

# ---------------------------------------------------------------------------
# 1. flat disk chord oracle


def test_c01_flat_disk_chord_oracle(acceptance):
    model = build_model(disk_scene())
    t0 = time.perf_counter()
    table = scatter_grid(model, 64, 32, FlowConfig())
    elapsed = time.perf_counter() - t0
    err = 0.0
    for r in table.records:
        x, u = r.entry.position, r.entry.direction
        L = -2.0 * float(x @ u)
        err = max(err, abs(r.length - L), np.linalg.norm(r.exit.position - (x + L * u)),
                  np.linalg.norm(r.exit.direction - u))
    ok = len(table.records) == 2048 and err <= 1e-6 and elapsed <= 10.0
    acceptance(1, ok, f"max chord error {err:.2e} (<= 1e-6), runtime {elapsed:.2f}s (<= 10s)")
    assert ok


# ---------------------------------------------------------------------------
# 2. hyperbolic oracle


def _hyperbolic_exit(model, x, u, radius):
    """Closed-form chord: first t > 0 where the exact geodesic leaves the ball."""
    def g(t):
        return float(np.linalg.norm(closed_form_geodesic(model, x, u, t))) - radius

    tmin = minimize_scalar(g, bounds=(0.0, 3.0), method="bounded", options={"xatol": 1e-12}).x
    L = brentq(g, tmin, 3.0, xtol=1e-14)
    h = 1e-6
    v = closed_form_geodesic(model, x, u, L + h) - closed_form_geodesic(model, x, u, L - h)
    return L, closed_form_geodesic(model, x, u, L), v / np.linalg.norm(v)


def test_c02_hyperbolic_oracle(acceptance):
    model = build_model(hyperbolic_ball_scene(0.5))
    cfg = FlowConfig()
    diam = scatter_states(model, [state_from_chart(model, 0, 0.0, math.pi / 2)], cfg)[0]
    diam_err = abs(diam.length - 4.0 * math.atanh(0.5))

    rng = np.random.default_rng(2024)
    states = [state_from_chart(model, 0, float(s), float(th))
              for s, th in zip(rng.uniform(0, 1, 1000), rng.uniform(0.05, math.pi - 0.05, 1000))]
    recs = scatter_states(model, states, cfg)
    err = 0.0
    for r in recs:
        L, xe, ue = _hyperbolic_exit(model, r.entry.position, r.entry.direction, 0.5)
        de = r.exit.direction / np.linalg.norm(r.exit.direction)
        err = max(err, abs(r.length - L), np.linalg.norm(r.exit.position - xe), np.linalg.norm(de - ue))
    ok = diam_err <= 1e-6 and err <= 1e-6 and len(recs) == 1000
    acceptance(2, ok, f"diameter error {diam_err:.2e}, 1000 random chords max error {err:.2e} (<= 1e-6)")
    assert ok


# ---------------------------------------------------------------------------
# 3. energy and reversibility over the catalog


def _catalog():
    disk = disk_scene()
    return {
        "disk": disk,
        "annulus": annulus_scene(),
        "peanut": peanut_scene(),
        "hyperbolic": hyperbolic_ball_scene(0.5),
        "torus": torus_scene([((0.5, 0.5), 0.2)]),
        "bump": bump_scene(disk, (0.2, 0.1), 0.2, 0.5),
        "hyperbolic_bump": bump_scene(hyperbolic_ball_scene(0.5), (0.1, 0.0), 0.3, 0.3),
        "ball3": disk_scene(dim=3),
        "hyperbolic3": hyperbolic_ball_scene(0.5, dim=3),
    }


def test_c03_energy_and_reversibility(acceptance):
    dt = 1e-3
    rng = np.random.default_rng(3)
    worst_drift, worst_return, longest = 0.0, 0.0, 0.0
    lines = []
    for name, spec in _catalog().items():
        model = build_model(spec)
        X = probe_points(model, seed=3)
        X = X[model.boundary_z(X) < -1e-3]
        X = X[rng.choice(len(X), min(20, len(X)), replace=False)]
        U = rng.normal(size=X.shape)
        if model.torus:  # add a trapped line that avoids the disk: runs to the full length 100
            X = np.vstack([X, [0.0, 0.1]])
            U = np.vstack([U, [1.0, 1e-3]])
        phi, _ = model.factor(X)
        U /= np.sqrt(phi[:, None] * np.sum(U * U, axis=1, keepdims=True))
        P = U * phi[:, None]
        res = integrate_batch(model, X, P, FlowConfig(step_dt=dt, max_length=100.0), events=False)
        L = np.array([min(r.length - dt, 100.0) for r in res])
        Xf, Pf, d1 = flow_many(model, X, P, L, dt)
        Xb, Pb, d2 = flow_many(model, Xf, Pf, -L, dt)
        dx = Xb - X
        if model.torus:
            dx -= np.floor(dx + 0.5)
        ret = float(np.max(np.linalg.norm(dx, axis=1) + np.linalg.norm(Pb - P, axis=1)))
        drift = max(max(r.max_drift for r in res), d1, d2)
        worst_drift, worst_return = max(worst_drift, drift), max(worst_return, ret)
        longest = max(longest, float(L.max()))
        lines.append(f"{name}: drift {drift:.1e} return {ret:.1e}")
    ok = worst_drift <= 1e-9 and worst_return <= 1e-7
    acceptance(3, ok, f"max |H-1/2| {worst_drift:.2e} (<= 1e-9), return error {worst_return:.2e} (<= 1e-7), "
                      f"step 1e-3, longest {longest:.1f}")
    assert ok, lines


# ---------------------------------------------------------------------------
# 4. trapping witnesses and blocking disks


def test_c04_trapping_witnesses(acceptance, tmp_path):
    scene = tmp_path / "torus.json"
    scene.write_text(torus_scene([((0.5, 0.5), 0.2)]).to_json())
    code = run(["traptest", "--scene", str(scene), "--interior-pos", "16", "--out", str(tmp_path / "t.json")])

    placement = place_blocking_disks(0.25, seed=0)
    model = build_model(placement.to_scene())
    table = scatter_grid(model, 128, 64, FlowConfig(max_length=100.0))
    trapped = table.summary["trapped"]
    n_expected = 128 * 64 * len(placement.centers)
    ok = code == 2 and trapped == 0 and len(table.records) == n_expected
    acceptance(4, ok, f"axis-avoidable disk traptest exit {code} (TrappedWitnesses); "
                      f"certified {len(placement.centers)} disks r=0.25: {trapped} trapped of {n_expected}")
    assert ok


# ---------------------------------------------------------------------------
# 5. stratification


def test_c05_stratification(acceptance):
    annulus = build_model(annulus_scene())
    n_dir = 64
    rep = strata_scan(annulus, 64, n_dir)
    step = 2 * math.pi / n_dir
    loc_err = max(min(abs(math.remainder(p["theta"] - a, 2 * math.pi)) for a in (0.0, math.pi))
                  for p in rep.d2_points)
    signs = {(p["component"], p["sign"]) for p in rep.d2_points}
    located = loc_err <= step and len(rep.d2_points) == 2 * 2 * 64
    signs_ok = signs == {(0, -1), (1, +1)}

    peanut = build_model(peanut_scene())
    prep = strata_scan(peanut, 128, 64)
    even = len(prep.d3_points) % 2 == 0 and len(prep.d3_points) > 0
    max_order = max(p["order"] for r in (rep, prep) for p in r.d2_points + r.d3_points)

    audits = []
    for m in (annulus, peanut):
        audits += multiplicity_audit(scatter_grid(m, 64, 32, FlowConfig()), 2)
    ok = located and signs_ok and even and max_order <= 3 and not audits and not rep.violations \
        and not prep.violations
    acceptance(5, ok, f"annulus d2 angle error {loc_err:.1e} (step {step:.3f}), signs {sorted(signs)}; "
                      f"peanut d3 count {len(prep.d3_points)}; max order {max_order} (<= 3); "
                      f"audit violations {len(audits)}")
    assert ok


# ---------------------------------------------------------------------------
# 6. tau-jet consistency


def _first_nonzero(model, taus):
    for j in range(1, len(taus)):
        if abs(taus[j]) * math.factorial(j) > derivative_threshold(model, j):
            return j
    return 0


def test_c06_tau_jet_consistency(acceptance):
    rng = np.random.default_rng(6)
    hom_err, mismatches, n = 0.0, 0, 0
    cases = [(build_model(disk_scene()), 0), (build_model(annulus_scene()), 0),
             (build_model(annulus_scene()), 1), (build_model(peanut_scene()), 0)]
    peanut = cases[-1][0]
    extra = [(p["component"], p["s"], p["theta"]) for p in strata_scan(peanut, 128, 64).d3_points]
    per_case = 250
    for ci, (model, comp) in enumerate(cases):
        params = [(comp, float(s), float(th)) for s, th in
                  zip(rng.uniform(0, 1, per_case), rng.choice([0.0, math.pi], per_case))]
        if ci == len(cases) - 1:
            params = params[:per_case - len(extra)] + extra
        for c, s, th in params:
            b = state_from_chart(model, c, s, th)
            lam = float(rng.uniform(0.2, 5.0))
            t1 = flat_tau_jets(model, b.position, b.direction, component=c).taus
            t2 = flat_tau_jets(model, b.position, lam * b.direction, component=c).taus
            scale = lam ** np.arange(len(t1))
            hom_err = max(hom_err, float(np.max(np.abs(t2 - scale * t1))))
            t1 = t1.copy()
            t1[1] = 0.0  # exact tangency
            if _first_nonzero(model, t1) != contact_order(model, b.position, b.direction, component=c).order:
                mismatches += 1
            n += 1
    ok = hom_err <= 1e-9 and mismatches == 0 and n == 1000
    acceptance(6, ok, f"homogeneity error {hom_err:.1e} (<= 1e-9); order mismatches {mismatches} of {n} "
                      f"tangent states ({len(extra)} at d3 points)")
    assert ok


# ---------------------------------------------------------------------------
# 7. balance


def test_c07_balance(acceptance):
    res = {}
    for name, spec in (("flat", disk_scene()), ("hyperbolic", hyperbolic_ball_scene(0.5))):
        model = build_model(spec)
        table = scatter_grid(model, 32, 16, FlowConfig())
        res[name] = balanced_check(model, lyapunov_bigball(model), table)
    ok = max(res.values()) <= 1e-6
    acceptance(7, ok, f"residual flat {res['flat']:.1e}, hyperbolic {res['hyperbolic']:.1e} (<= 1e-6)")
    assert ok


# ---------------------------------------------------------------------------
# 8. Theta reparametrization


def _weight_profile(rng):
    T = float(rng.uniform(0.5, 5.0))
    t = np.linspace(0.0, T, 401)
    k1, k2 = rng.integers(1, 5, 2)
    speed = 1.0 + 0.4 * rng.uniform(-1, 1) * np.sin(2 * np.pi * k1 * t / T + rng.uniform(0, 6))
    alpha = 1.0 + 0.4 * rng.uniform(-1, 1) * np.cos(2 * np.pi * k2 * t / T + rng.uniform(0, 6))
    return t, speed, alpha


def test_c08_theta_reparametrization(acceptance):
    from scipy.interpolate import CubicSpline

    rng = np.random.default_rng(8)
    end_err, der_err = 0.0, 0.0
    for _ in range(100):
        t, speed, alpha = _weight_profile(rng)
        # match total weights so the endpoint condition holds up to spline round-off
        alpha = alpha * CubicSpline(t, speed).integrate(0, t[-1]) / CubicSpline(t, alpha).integrate(0, t[-1])
        th = theta_reparametrization(t, speed, alpha)
        T = t[-1]
        end_err = max(end_err, abs(float(th(0.0))), abs(float(th(T)) - T))
        y = np.linspace(0.05 * T, 0.95 * T, 37)
        h = 1e-5 * T
        fd = (th(y + h) - th(y - h)) / (2 * h)
        der_err = max(der_err, float(np.max(np.abs(fd - th.speed(y) / th.alpha(th(y))))))
    ok = end_err <= 1e-8 and der_err <= 1e-4
    acceptance(8, ok, f"endpoint error {end_err:.1e} (<= 1e-8), derivative error {der_err:.1e} (<= 1e-4), "
                      f"100 profiles")
    assert ok


# ---------------------------------------------------------------------------
# 9. rigidity harness


def test_c09_rigidity_harness(acceptance):
    cfg = FlowConfig()
    disk = build_model(disk_scene())
    ident = conjugacy_check(disk, disk, parse_phi("identity"), cfg, with_lens=True)
    base = bump_scene(disk_scene(), (0.3, 0.1), 0.2, 0.5)
    rot = conjugacy_check(build_model(base), build_model(rotated_scene(base, 0.7)), parse_phi("rotate:0.7"),
                          cfg, with_lens=True)
    lens = []
    for amp in (0.05, 0.1, 0.2):
        other = build_model(bump_scene(disk_scene(), (0.2, 0.1), amp, 0.5))
        rep = conjugacy_check(disk, other, parse_phi("identity"), cfg, with_lens=True)
        lens.append((rep.verdict, rep.max_lens_mismatch))
    conj_ok = all(r.verdict == "Conjugate" and max(r.max_exit_mismatch, r.max_lens_mismatch) <= 1e-6
                  for r in (ident, rot))
    bump_ok = lens[1][0] == "NotConjugate" and lens[1][1] > 1e-3
    mono = lens[0][1] < lens[1][1] < lens[2][1]
    ok = conj_ok and bump_ok and mono
    acceptance(9, ok, f"identity {ident.max_lens_mismatch:.1e}, rotation {rot.max_lens_mismatch:.1e}; "
                      f"bump lens mismatch " + ", ".join(f"{m:.4f}" for _, m in lens) + " (monotone)")
    assert ok


# ---------------------------------------------------------------------------
# 10. ellipsoid bound


def test_c10_ellipsoid_bound(acceptance):
    violation = verify_ellipsoid_bound(random_arcs(100_000, eps_max=0.05, seed=10))
    ratios = {eps: circular_arc_sagitta(1.0, eps) / ellipsoid_bound(1.0, eps)
              for eps in (0.001, 0.005, 0.01, 0.02, 0.05)}
    within = all(abs(r - 1.0) <= 0.01 for r in ratios.values())
    ok = violation == 0.0 and within
    acceptance(10, ok, f"violations {violation:.1e} over 1e5 arcs; circular-arc distance / delta "
                       + ", ".join(f"{r:.4f}" for r in ratios.values())
                       + " (needs within 1%; circular arcs reach ~sqrt(3)/2 of delta, see ledger)")
    assert ok


# ---------------------------------------------------------------------------
# 11. theta-star search


def test_c11_theta_star(acceptance):
    grid = [round(0.05 * k, 10) for k in range(1, 21)]
    full = theta_star_search(720, [1.0])
    coarse = theta_star_search(720, grid)
    fine = theta_star_search(1440, grid)
    tiny = theta_star_search(720, [0.01, 1.0])
    stable = abs(coarse.theta_hat - fine.theta_hat) <= 0.05 + 1e-12
    ok = full.theta_hat == 1.0 and stable and 0.01 in tiny.witnesses
    acceptance(11, ok, f"theta=1 covers; theta_hat {coarse.theta_hat} (720 lines) vs {fine.theta_hat} "
                       f"(1440 lines); witness at 0.01 {tiny.witnesses.get(0.01)}")
    assert ok


# ---------------------------------------------------------------------------
# 12. cut & scatter


def test_c12_cut_and_scatter(acceptance):
    model = build_model(torus_scene([((0.5, 0.5), 0.3)]))
    cfg = FlowConfig(max_length=11.0)
    table = scatter_grid(model, 256, 128, cfg)
    rep = cut_and_scatter_check(model, table, cfg, n_geo=200, length=10.0, seed=0)
    ok = rep.residual <= 1e-5 and rep.n_geodesics == 200
    acceptance(12, ok, f"residual {rep.residual:.1e} (<= 1e-5) over {rep.n_geodesics} geodesics "
                       f"({rep.n_uncut} without a cut), {rep.n_segments} segments "
                       f"({rep.n_table_segments} from table)")
    assert ok
