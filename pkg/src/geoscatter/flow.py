"""Geodesic flow: batched RK4 integration with energy renormalization and
boundary event location (transversal exits and grazing contacts).

Momenta are covectors and the Hamiltonian is ``H = 1/2 g^{ab}(x) p_a p_b``,
so trajectories on ``H = 1/2`` are unit-speed geodesics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CollarTooNarrow, EventRefinementFailed, NoOracle, OutsideCollar
from .models import MetricModel, PhaseState

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class FlowConfig:
    step_dt: float = 1e-2
    energy_tol: float = 1e-9
    boundary_tol: float = 1e-12
    max_length: float | None = None
    grazing_probe_depth: int | None = None
    # parabolic-vertex screen: local maxima of z further below 0 are not refined
    grazing_screen: float = 1e-4

    def __post_init__(self):
        if not self.step_dt > 0:
            raise ValueError("step_dt must be positive")
        if not self.boundary_tol >= 1e-12:
            raise ValueError("boundary_tol must be >= 1e-12")

    def l_max(self, model: MetricModel) -> float:
        lmax = 50.0 * model.length_scale if self.max_length is None else float(self.max_length)
        if not lmax > model.length_scale:
            raise ValueError("max_length must exceed the domain diameter")
        return lmax

    def depth(self, model: MetricModel) -> int:
        return self.grazing_probe_depth or 2 * model.dim - 1


@dataclass
class ContactEvent:
    t: float
    x: np.ndarray
    u: np.ndarray
    order: int
    side: int  # +1 (Plus) or -1 (Minus); 0 when the jet is degenerate
    component: int
    ambiguous: bool = False
    p: np.ndarray | None = None

    @property
    def transversal(self) -> bool:
        return self.order == 1

    @property
    def side_name(self) -> str:
        return {1: "Plus", -1: "Minus"}.get(self.side, "Degenerate")


@dataclass
class Trapped:
    last_state: PhaseState
    length: float


@dataclass
class TraceResult:
    contacts: list = field(default_factory=list)
    terminal: ContactEvent | Trapped | None = None
    length: float = 0.0
    max_drift: float = 0.0
    checkpoints: list | None = None
    error: str | None = None

    @property
    def trapped(self) -> bool:
        return isinstance(self.terminal, Trapped)


# ---------------------------------------------------------------------------
# Hamiltonian and vector field


def hamiltonian(model: MetricModel, x, p, *, check_collar: bool = False):
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if check_collar and not np.all(model.in_collar(x)):
        raise OutsideCollar("point lies outside the collar of M")
    phi, _ = model.factor(x)
    return 0.5 * np.sum(p * p, axis=-1) / phi


def geodesic_rhs(model: MetricModel, X, P):
    """(dx/dt, dp/dt) for the conformal metric phi * I."""
    phi, dphi = model.factor(X)
    pp = np.sum(P * P, axis=-1)
    dX = P / phi[..., None]
    dP = (0.5 * pp / phi ** 2)[..., None] * dphi
    return dX, dP


def geodesic_rhs_tensor(model: MetricModel, X, P):
    """Same field from the general tensor formulas; used to cross-check the fast path."""
    ginv = model.inverse_metric_at(X)
    dg = model.metric_derivatives_at(X)
    V = np.einsum("...ab,...b->...a", ginv, P)
    dP = 0.5 * np.einsum("...abc,...b,...c->...a", dg, V, V)
    return V, dP


def _rk4(model: MetricModel, X, P, h):
    h = np.asarray(h, dtype=float)
    hh = h[..., None] if h.ndim else h
    k1x, k1p = geodesic_rhs(model, X, P)
    k2x, k2p = geodesic_rhs(model, X + 0.5 * hh * k1x, P + 0.5 * hh * k1p)
    k3x, k3p = geodesic_rhs(model, X + 0.5 * hh * k2x, P + 0.5 * hh * k2p)
    k4x, k4p = geodesic_rhs(model, X + hh * k3x, P + hh * k3p)
    Xn = X + hh / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
    Pn = P + hh / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
    H = hamiltonian(model, Xn, Pn)
    drift = H - 0.5
    Pn = Pn * np.sqrt(0.5 / H)[..., None]
    return model.wrap(Xn), Pn, drift


def _advance(model, X, P, h, substeps=1):
    for _ in range(substeps):
        X, P, _ = _rk4(model, X, P, np.asarray(h) / substeps)
    return X, P


def flow_step(model: MetricModel, state: PhaseState, dt: float) -> PhaseState:
    """One renormalized RK4 step of length dt."""
    x, p, drift = _rk4(model, state.x[None], state.p[None], dt)
    return PhaseState(x[0], p[0], float(hamiltonian(model, x[0], p[0])))


def flow_for(model: MetricModel, state: PhaseState, t: float, dt: float = 1e-2):
    """Integrate for total parameter t (may be negative) ignoring the boundary.

    Returns the final state and the largest pre-rescale energy error seen.
    """
    X, P, worst = flow_many(model, state.x[None], state.p[None], t, dt)
    return PhaseState(X[0], P[0], float(hamiltonian(model, X[0], P[0]))), worst


def flow_many(model: MetricModel, X, P, t, dt: float = 1e-2):
    """Batched flow_for: every row integrated for its own parameter t[i] in equal steps <= dt."""
    X = np.atleast_2d(np.asarray(X, dtype=float)).copy()
    P = np.atleast_2d(np.asarray(P, dtype=float)).copy()
    t = np.broadcast_to(np.asarray(t, dtype=float), (len(X),))
    n = max(1, int(math.ceil(float(np.max(np.abs(t))) / dt)))
    h = t / n
    worst = 0.0
    for _ in range(n):
        X, P, drift = _rk4(model, X, P, h)
        worst = max(worst, float(np.abs(drift).max()))
    return X, P, worst


# ---------------------------------------------------------------------------
# batched event refinement


def _zc(model, X, comps):
    """z of a chosen component for each row (comps=None: combined z)."""
    if comps is None:
        return model.boundary_z(X)
    Z = model.component_values(X)
    return np.take_along_axis(Z, comps[:, None], axis=1)[:, 0]


def _bisect(model, Xs, Ps, lo, hi, tol, iters=200):
    """Bracketed root of tau -> z(step(state, tau)) with z(lo) < 0 < z(hi).

    Illinois regula falsi with a bisection fallback; stops once |z| <= tol/10
    or the bracket collapses to machine precision.
    """
    lo = lo.copy()
    hi = hi.copy()

    def f(tau):
        return model.boundary_z(_rk4(model, Xs, Ps, tau)[0])

    flo, fhi = f(lo), f(hi)
    side = np.zeros(len(lo), dtype=int)
    done = np.zeros(len(lo), dtype=bool)
    for it in range(iters):
        with np.errstate(divide="ignore", invalid="ignore"):
            sec = hi - fhi * (hi - lo) / (fhi - flo)
        mid = 0.5 * (lo + hi)
        ok_sec = np.isfinite(sec) & (sec > lo) & (sec < hi) & (it % 8 != 7)
        tau = np.where(ok_sec, sec, mid)
        ft = f(tau)
        pos = ft > 0
        # Illinois: halve the stale endpoint value when the same side repeats
        flo = np.where(pos & (side == -1), 0.5 * flo, flo)
        fhi = np.where(~pos & (side == 1), 0.5 * fhi, fhi)
        hi = np.where(pos, tau, hi)
        fhi = np.where(pos, ft, fhi)
        lo = np.where(pos, lo, tau)
        flo = np.where(pos, flo, ft)
        side = np.where(pos, -1, 1)
        done |= (np.abs(ft) <= 0.1 * tol) | ((hi - lo) <= 4e-16 * np.maximum(hi, 1e-300))
        if np.all(done):
            break
    xl, pl, _ = _rk4(model, Xs, Ps, lo)
    xh, ph, _ = _rk4(model, Xs, Ps, hi)
    fl, fh = model.boundary_z(xl), model.boundary_z(xh)
    use_hi = np.abs(fh) <= np.abs(fl)
    tau = np.where(use_hi, hi, lo)
    x = np.where(use_hi[:, None], xh, xl)
    p = np.where(use_hi[:, None], ph, pl)
    f_ = np.where(use_hi, fh, fl)
    return tau, x, p, np.abs(f_) <= tol


def _golden_max(model, Xs, Ps, lo, hi, iters=80):
    """Maximize tau -> z(state advanced by tau) on [lo, hi] (two RK4 half steps)."""
    def f(tau):
        x, _ = _advance(model, Xs, Ps, tau, substeps=2)
        return model.boundary_z(x)

    a, b = lo.copy(), hi.copy()
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        left = fc > fd
        a = np.where(left, a, c)
        b = np.where(left, d, b)
        new = np.where(left, b - GOLDEN * (b - a), a + GOLDEN * (b - a))
        fn = f(new)
        c_new = np.where(left, new, d)
        d_new = np.where(left, c, new)
        fc_new = np.where(left, fn, fd)
        fd_new = np.where(left, fc, fn)
        c, d, fc, fd = c_new, d_new, fc_new, fd_new
        if np.all(b - a <= 1e-13):
            break
    tau = 0.5 * (a + b)
    # one parabolic step: golden section alone stalls at sqrt(eps) in tau
    delta = 1e-3 * (hi - lo)
    fm, f0, fp = f(tau - delta), f(tau), f(tau + delta)
    curv = fp - 2 * f0 + fm
    with np.errstate(divide="ignore", invalid="ignore"):
        shift = np.where(curv < 0, -0.5 * delta * (fp - fm) / curv, 0.0)
    tau = tau + np.clip(shift, -delta, delta)
    x, p = _advance(model, Xs, Ps, tau, substeps=2)
    return tau, x, p, model.boundary_z(x)


def _first_root_fine(model, Xs, Ps, hi, tol, levels=4, pieces=64):
    """Root bracket for trajectories that start on the boundary (z(0) ~ 0)."""
    lo = np.zeros_like(hi)
    for _ in range(levels):
        taus = lo[:, None] + (hi - lo)[:, None] * np.linspace(0, 1, pieces + 1)[None, 1:]
        m = len(Xs)
        xs, _, _ = _rk4(model, np.repeat(Xs, pieces, 0), np.repeat(Ps, pieces, 0), taus.reshape(-1))
        fz = model.boundary_z(xs).reshape(m, pieces)
        neg = fz < -tol
        pos = fz > 0
        new_lo = lo.copy()
        new_hi = hi.copy()
        done = np.ones(m, dtype=bool)
        for i in range(m):
            k_neg = np.flatnonzero(neg[i])
            if k_neg.size == 0:
                new_hi[i] = taus[i, 0]
                done[i] = False
                continue
            k0 = k_neg[0]
            k_pos = np.flatnonzero(pos[i, k0:])
            new_lo[i] = taus[i, k0]
            new_hi[i] = taus[i, k0 + k_pos[0]] if k_pos.size else hi[i]
        lo, hi = new_lo, new_hi
        if np.all(done):
            return lo, hi, np.ones(m, dtype=bool)
    return lo, hi, np.zeros(len(Xs), dtype=bool)


# ---------------------------------------------------------------------------
# contact order probing


_STENCILS = {
    1: {1: 0.5, -1: -0.5},
    2: {1: 1.0, 0: -2.0, -1: 1.0},
    3: {2: 0.5, 1: -1.0, -1: 1.0, -2: -0.5},
    4: {2: 1.0, 1: -4.0, 0: 6.0, -1: -4.0, -2: 1.0},
    5: {3: 0.5, 2: -2.0, 1: 2.5, -1: -2.5, -2: 2.0, -3: -0.5},
}


def derivative_threshold(model: MetricModel, j: int) -> float:
    return 1e-5 * model.diameter ** (1 - j)


def jet_derivatives(model: MetricModel, X, P, comps, kmax: int, tol: float = 1e-12,
                    check_collar: bool = True):
    """d^j/dt^j z_comp(gamma(t)) at t = 0 for j = 1..kmax along the geodesics (X, P).

    Central differences on the integrated curve, Richardson-extrapolated
    over step h and h/2, with h = tol**(1/(j+2)).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    comps = np.atleast_1d(np.asarray(comps, dtype=int))
    out = np.zeros((len(X), kmax))
    margin = model.ambient_extension_margin
    for j in range(1, kmax + 1):
        h = min(tol ** (1.0 / (j + 2)), 0.2 * margin)
        reach = (j + 1) // 2
        half = h / 2.0
        nhalf = 2 * reach
        # geodesic samples at multiples of h/2 on both sides
        samples = {0: X}
        for sgn in (1, -1):
            x, p = X, P
            for m in range(1, nhalf + 1):
                x, p = _advance(model, x, p, sgn * half, substeps=2)
                samples[sgn * m] = x
        if check_collar:
            far = np.concatenate([samples[nhalf], samples[-nhalf]])
            if not np.all(model.in_collar(far)):
                raise CollarTooNarrow("derivative stencil leaves the collar")
        f = {m: _zc(model, samples[m], comps) for m in samples}

        def central(step_half_units, hstep):
            acc = 0.0
            for k, w in _STENCILS[j].items():
                acc = acc + w * f[k * step_half_units]
            return acc / hstep ** j

        coarse = central(2, h)
        fine = central(1, half)
        out[:, j - 1] = (4.0 * fine - coarse) / 3.0
    return out


def classify_jets(model: MetricModel, D):
    """First order with a derivative above threshold and its sign (0, 0 if none)."""
    D = np.atleast_2d(D)
    order = np.zeros(len(D), dtype=int)
    side = np.zeros(len(D), dtype=int)
    for j in range(D.shape[1], 0, -1):
        big = np.abs(D[:, j - 1]) > derivative_threshold(model, j)
        order = np.where(big, j, order)
        side = np.where(big, np.sign(D[:, j - 1]).astype(int), side)
    return order, side


def contact_orders(model: MetricModel, X, P, comps, kmax: int, tol: float = 1e-12,
                   check_collar: bool = True):
    D = jet_derivatives(model, X, P, comps, kmax, tol, check_collar)
    return classify_jets(model, D)


# ---------------------------------------------------------------------------
# integration with boundary events


def integrate_batch(model: MetricModel, X0, P0, cfg: FlowConfig, *, record: bool = False,
                    t0=None, events: bool = True) -> list[TraceResult]:
    """Integrate many trajectories until they leave M or exceed the trap cutoff.

    With events=False exits are only detected (terminal stays None, length is
    the checkpoint time after the crossing step) and grazing is not probed;
    enough to tell trapped from escaping trajectories.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    P0 = np.atleast_2d(np.asarray(P0, dtype=float))
    n = len(X0)
    dt = cfg.step_dt
    tol = cfg.boundary_tol
    lmax = cfg.l_max(model)
    results = [TraceResult(checkpoints=[] if record else None) for _ in range(n)]
    if n == 0:
        return results

    X = model.wrap(X0.copy())
    P = P0 * np.sqrt(0.5 / hamiltonian(model, X0, P0))[:, None]
    t = np.zeros(n) if t0 is None else np.asarray(t0, dtype=float).copy()
    zb = model.boundary_z(X)
    Xa = np.full_like(X, np.nan)
    Pa = np.full_like(P, np.nan)
    za = np.full(n, np.nan)
    last_contact = np.full(n, -np.inf)
    on_bdry = zb >= -10 * tol
    drift_max = np.zeros(n)
    outside = zb > 10 * tol
    for i in np.flatnonzero(outside):
        results[i].error = "StartOutside"
    active = np.flatnonzero(~outside)
    pending = []  # (traj, t, x, p, ambiguous, terminal)

    if record:
        for i in range(n):
            results[i].checkpoints.append((float(t[i]), X[i].copy(), P[i].copy()))

    while active.size:
        xb, pb = X[active], P[active]
        xc, pc, drift = _rk4(model, xb, pb, dt)
        drift_max[active] = np.maximum(drift_max[active], np.abs(drift))
        zc = model.boundary_z(xc)
        bad = ~np.isfinite(zc)
        for k in np.flatnonzero(bad):
            results[active[k]].error = "StepLeftCollar"
        finished = bad.copy()

        # exits inside the current step
        cross = (zc > 0) & ~bad
        if not events:
            for k in np.flatnonzero(cross):
                results[active[k]].length = float(t[active[k]] + dt)
            finished |= cross
        elif np.any(cross):
            idx = np.flatnonzero(cross)
            hi = np.full(idx.size, dt)
            lo = np.zeros(idx.size)
            sb = on_bdry[active[idx]] | (zb[active[idx]] >= -tol)
            if np.any(sb):
                k = np.flatnonzero(sb)
                lo_k, hi_k, ok = _first_root_fine(model, xb[idx[k]], pb[idx[k]], hi[k], tol)
                lo[k], hi[k] = lo_k, hi_k
            tau, xr, pr, ok = _bisect(model, xb[idx], pb[idx], lo, hi, tol)
            for m, k in enumerate(idx):
                traj = active[k]
                if not ok[m]:
                    results[traj].error = "EventRefinementFailed"
                else:
                    pending.append((traj, float(t[traj] + tau[m]), xr[m], pr[m], False, True))
                finished[k] = True

        # grazing candidates: interior local max of z at the previous checkpoint
        za_act, zb_act = za[active], zb[active]
        cand = (events & ~finished & np.isfinite(za_act) & (zb_act >= za_act) & (zb_act >= zc))
        if np.any(cand):
            # parabolic vertex through the three samples
            a_, b_, c_ = za_act, zb_act, zc
            curv = a_ - 2 * b_ + c_
            with np.errstate(divide="ignore", invalid="ignore"):
                vertex = np.where(curv < 0, b_ - (c_ - a_) ** 2 / (8 * curv), b_)
            cand &= vertex >= -cfg.grazing_screen
        if np.any(cand):
            idx = np.flatnonzero(cand)
            tr = active[idx]
            tau, xm, pm, zmax = _golden_max(model, Xa[tr], Pa[tr], np.zeros(idx.size),
                                            np.full(idx.size, 2 * dt))
            for m, k in enumerate(idx):
                traj = tr[m]
                tm = float(t[traj] - dt + tau[m])
                if zmax[m] > tol:
                    # the curve left M between the last two checkpoints
                    ok = _exit_before(model, Xa[traj], Pa[traj], tau[m], tol)
                    if ok is None:
                        results[traj].error = "EventRefinementFailed"
                    else:
                        tr_tau, xr, pr = ok
                        pending.append((traj, float(t[traj] - dt + tr_tau), xr, pr,
                                        zmax[m] <= 10 * tol, True))
                    finished[k] = True
                elif zmax[m] >= -10 * tol and tm - last_contact[traj] >= math.sqrt(tol):
                    pending.append((traj, tm, xm[m], pm[m], zmax[m] < -tol, False))
                    last_contact[traj] = tm

        # advance the survivors
        keep = ~finished
        act_keep = active[keep]
        Xa[act_keep], Pa[act_keep], za[act_keep] = xb[keep], pb[keep], zb[active[keep]]
        X[act_keep], P[act_keep], zb[act_keep] = xc[keep], pc[keep], zc[keep]
        t[act_keep] += dt
        on_bdry[act_keep] = False
        if record:
            for traj, x_, p_ in zip(act_keep, xc[keep], pc[keep]):
                results[traj].checkpoints.append((float(t[traj]), x_.copy(), p_.copy()))
        over = t[act_keep] > lmax
        for traj in act_keep[over]:
            results[traj].terminal = Trapped(PhaseState(X[traj].copy(), P[traj].copy(),
                                                        float(hamiltonian(model, X[traj], P[traj]))),
                                             float(t[traj]))
            results[traj].length = float(t[traj])
        active = act_keep[~over]

    for r, d in zip(results, drift_max):
        r.max_drift = float(d)
    _finish_events(model, cfg, results, pending)
    return results


def _exit_before(model, xa, pa, tau_max, tol):
    """First root of z on [0, tau_max] from checkpoint a (z(a) < 0 < z(tau_max))."""
    xa, pa = xa[None], pa[None]
    lo, hi, ok = _first_root_fine(model, xa, pa, np.array([tau_max]), tol)
    tau, xr, pr, good = _bisect(model, xa, pa, lo, hi, tol)
    if not good[0]:
        return None
    return float(tau[0]), xr[0], pr[0]


def _finish_events(model, cfg, results, pending):
    if not pending:
        return
    kmax = cfg.depth(model)
    Xe = np.array([e[2] for e in pending])
    Pe = np.array([e[3] for e in pending])
    comps = model.active_component(Xe)
    try:
        order, side = contact_orders(model, Xe, Pe, comps, kmax, cfg.boundary_tol)
    except CollarTooNarrow:
        order, side = contact_orders(model, Xe, Pe, comps, kmax, cfg.boundary_tol, check_collar=False)
    phi, _ = model.factor(Xe)
    for m, (traj, te, x, p, amb, terminal) in enumerate(pending):
        ev = ContactEvent(te, x.copy(), p / phi[m], int(order[m]), int(side[m]), int(comps[m]),
                          bool(amb), p.copy())
        res = results[traj]
        res.contacts.append(ev)
        if terminal:
            res.terminal = ev
            res.length = te
    for res in results:
        res.contacts.sort(key=lambda e: e.t)


def integrate_to_boundary(model: MetricModel, start: PhaseState, cfg: FlowConfig):
    """Checkpoints and terminal event (ContactEvent or Trapped) of one trajectory."""
    res = integrate_batch(model, start.x[None], start.p[None], cfg, record=True)[0]
    if res.error == "EventRefinementFailed":
        raise EventRefinementFailed("boundary event could not be polished; reduce step_dt")
    states = [PhaseState(x, p, float(hamiltonian(model, x, p))) for _, x, p in res.checkpoints]
    return states, res.terminal


def write_trace(fh, model: MetricModel, checkpoints, dt: float):
    """JSONL dump: one state per line with t, x, u, H."""
    import json

    for k, st in enumerate(checkpoints):
        phi, _ = model.factor(st.x)
        fh.write(json.dumps({"t": k * dt, "x": st.x.tolist(), "u": (st.p / phi).tolist(),
                             "H": float(hamiltonian(model, st.x, st.p))}) + "\n")


# ---------------------------------------------------------------------------
# closed-form oracles


def mobius_add(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ab = np.sum(a * b, axis=-1)[..., None]
    a2 = np.sum(a * a, axis=-1)[..., None]
    b2 = np.sum(b * b, axis=-1)[..., None]
    return ((1 + 2 * ab + b2) * a + (1 - a2) * b) / (1 + 2 * ab + a2 * b2)


def poincare_distance(a, b):
    """Hyperbolic distance in the Poincare ball."""
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    m = mobius_add(-a, b)
    return 2.0 * np.arctanh(np.minimum(np.linalg.norm(m, axis=-1), 1 - 1e-16))


def closed_form_geodesic(model: MetricModel, x, u, t):
    """Exact geodesic point at arc length t from (x, u), for unperturbed models."""
    if model.oracle is None:
        raise NoOracle("no closed form for perturbed metrics")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    t = np.asarray(t, dtype=float)
    if model.oracle == "flat":
        return model.wrap(x + t[..., None] * u if t.ndim else x + t * u)
    e = u / np.linalg.norm(u, axis=-1, keepdims=True)
    tt = t[..., None] if t.ndim else t
    return mobius_add(x, np.tanh(tt / 2.0) * e)
