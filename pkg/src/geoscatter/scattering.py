"""Scattering map and lens data over sampled inward boundary states."""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NotInward
from .flow import (
    ContactEvent,
    FlowConfig,
    Trapped,
    contact_orders,
    integrate_batch,
)
from .models import MetricModel, PhaseState, boundary_chart, normalize_direction

TANGENT_TOL = 1e-10
CSV_HEADER = ["component", "s", "theta", "exit_component", "exit_s", "exit_theta",
              "length", "status", "omega", "n_contacts"]


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("GEOSCATTER_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# boundary states


def boundary_frame(model: MetricModel, x, component: int):
    """g-orthonormal frame (tangents..., inward normal) at a boundary point."""
    x = np.asarray(x, dtype=float)
    grad = model.components[component].grad(x)
    nE = -grad / np.linalg.norm(grad)
    if model.dim == 2:
        tE = np.array([nE[1], -nE[0]])
        tangents = [tE]
    else:
        helper = np.array([1.0, 0.0, 0.0]) if abs(nE[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        t1 = np.cross(nE, helper)
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(nE, t1)
        tangents = [t1, t2]
    phi, _ = model.factor(x)
    scale = 1.0 / math.sqrt(float(phi))
    return [t * scale for t in tangents], nE * scale


def normal_component(model: MetricModel, x, u, component: int) -> float:
    """dz(u) / |dz|_g ; negative means u points into M."""
    grad = model.components[component].grad(np.asarray(x, dtype=float))
    phi, _ = model.factor(np.asarray(x, dtype=float))
    return float(grad @ u) / math.sqrt(float(grad @ grad) / float(phi))


def chart_angle(model: MetricModel, x, u, component: int):
    """Angle of u in the (tangent, inward normal) frame: (0, pi) inward, (-pi, 0) outward.

    In 3D returns (elevation, azimuth) with elevation > 0 inward.
    """
    tangents, n = boundary_frame(model, x, component)
    phi, _ = model.factor(np.asarray(x, dtype=float))
    phi = float(phi)
    a = phi * float(u @ n)
    if model.dim == 2:
        b = phi * float(u @ tangents[0])
        return math.atan2(a, b)
    b1 = phi * float(u @ tangents[0])
    b2 = phi * float(u @ tangents[1])
    return math.asin(max(-1.0, min(1.0, a))), math.atan2(b2, b1)


@dataclass
class BoundaryState:
    component: int
    s: object  # float in 2D, (s1, s2) in 3D
    direction: np.ndarray
    normal_component: float
    position: np.ndarray
    theta: object = None

    @property
    def inward(self) -> bool:
        return self.normal_component < -TANGENT_TOL

    @property
    def tangent(self) -> bool:
        return abs(self.normal_component) <= TANGENT_TOL


def state_from_vector(model: MetricModel, x, u, component: int, s=None) -> BoundaryState:
    x = np.asarray(x, dtype=float)
    u = normalize_direction(model, x, u)
    if s is None:
        s = model.components[component].chart_param(x)
    return BoundaryState(component, s, u, normal_component(model, x, u, component), x,
                         chart_angle(model, x, u, component))


def state_from_chart(model: MetricModel, component: int, s, theta) -> BoundaryState:
    """Boundary state at chart point s with frame angle theta (2D) or (elevation, azimuth)."""
    x, _ = boundary_chart(model, s, component)
    tangents, n = boundary_frame(model, x, component)
    if model.dim == 2:
        u = math.cos(theta) * tangents[0] + math.sin(theta) * n
    else:
        el, az = theta
        u = math.cos(el) * (math.cos(az) * tangents[0] + math.sin(az) * tangents[1]) + math.sin(el) * n
    return BoundaryState(component, s, u, normal_component(model, x, u, component), x, theta)


def _fibonacci_hemisphere(k: int):
    golden = math.pi * (3.0 - math.sqrt(5.0))
    out = []
    for i in range(k):
        sin_el = (i + 0.5) / k
        out.append((math.asin(sin_el), (golden * i) % (2 * math.pi)))
    return out


def _fibonacci_sphere_params(k: int):
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    return [(((i * golden) % 1.0), (i + 0.5) / k) for i in range(k)]


def grid_thetas(n_dir: int):
    return [(k + 1) * math.pi / (n_dir + 1) for k in range(n_dir)]


def grid_positions(n_pos: int, dim: int = 2):
    if dim == 2:
        return [k / n_pos for k in range(n_pos)]
    return _fibonacci_sphere_params(n_pos)


def sample_inward_grid(model: MetricModel, n_pos: int, n_dir: int) -> list[BoundaryState]:
    """N_pos boundary points per component times N_dir inward directions."""
    if n_pos < 4 or n_dir < 3:
        raise ValueError("grid needs N_pos >= 4 and N_dir >= 3")
    states = []
    dirs = grid_thetas(n_dir) if model.dim == 2 else _fibonacci_hemisphere(n_dir)
    for comp in range(len(model.components)):
        for s in grid_positions(n_pos, model.dim):
            for th in dirs:
                states.append(state_from_chart(model, comp, s, th))
    return states


def tau_involution(model: MetricModel, b: BoundaryState) -> BoundaryState:
    """Reflect the normal component of b's direction across the tangent space."""
    tangents, n_in = boundary_frame(model, b.position, b.component)
    phi, _ = model.factor(b.position)
    a = float(phi) * float(b.direction @ n_in)
    u = b.direction - 2.0 * a * n_in
    theta = b.theta
    if theta is not None:
        theta = -theta if model.dim == 2 else (-theta[0], theta[1])
    return BoundaryState(b.component, b.s, u, -b.normal_component, b.position, theta)


def reversed_state(model: MetricModel, b: BoundaryState) -> BoundaryState:
    return state_from_vector(model, b.position, -b.direction, b.component, b.s)


# ---------------------------------------------------------------------------
# records


@dataclass
class ScatterRecord:
    entry: BoundaryState
    status: str  # Scattered | Trapped | TangentSingleton | Error
    exit: BoundaryState | None = None
    length: float = 0.0
    contacts: list = field(default_factory=list)
    last_state: PhaseState | None = None
    error: str | None = None
    max_drift: float = 0.0

    @property
    def omega(self) -> tuple:
        return tuple(int(c.order) for c in self.contacts)


def _entry_contacts(model, states, cfg):
    X = np.array([b.position for b in states])
    U = np.array([b.direction for b in states])
    phi, _ = model.factor(X)
    P = U * phi[:, None]
    comps = np.array([b.component for b in states])
    order, side = contact_orders(model, X, P, comps, cfg.depth(model), cfg.boundary_tol,
                                 check_collar=False)
    return [ContactEvent(0.0, X[i], U[i], int(order[i]), int(side[i]), int(comps[i]), False, P[i])
            for i in range(len(states))]


def _exit_state(model, ev: ContactEvent) -> BoundaryState:
    return state_from_vector(model, ev.x, ev.u, ev.component)


def _scatter_chunk(model, states, cfg) -> list[ScatterRecord]:
    if not states:
        return []
    records: list[ScatterRecord | None] = [None] * len(states)
    entries = _entry_contacts(model, states, cfg)
    go = []
    for i, (b, ev) in enumerate(zip(states, entries)):
        if b.normal_component > TANGENT_TOL:
            records[i] = ScatterRecord(b, "Error", error="NotInward")
        elif b.tangent and ev.order % 2 == 0 and ev.side > 0:
            # the geodesic leaves M on both sides: a singleton trajectory
            records[i] = ScatterRecord(b, "TangentSingleton", b, 0.0, [ev])
        elif b.tangent and ev.order % 2 == 1 and ev.side > 0:
            records[i] = ScatterRecord(b, "Error", error="NotInward")
        else:
            go.append(i)
    if go:
        X = np.array([states[i].position for i in go])
        U = np.array([states[i].direction for i in go])
        phi, _ = model.factor(X)
        traces = integrate_batch(model, X, U * phi[:, None], cfg)
        for i, tr in zip(go, traces):
            b = states[i]
            contacts = [entries[i]] + tr.contacts
            if tr.error:
                records[i] = ScatterRecord(b, "Error", error=tr.error, contacts=contacts,
                                           max_drift=tr.max_drift)
            elif isinstance(tr.terminal, Trapped):
                records[i] = ScatterRecord(b, "Trapped", None, tr.length, contacts,
                                           last_state=tr.terminal.last_state, max_drift=tr.max_drift)
            else:
                records[i] = ScatterRecord(b, "Scattered", _exit_state(model, tr.terminal),
                                           tr.length, contacts, max_drift=tr.max_drift)
    return records


def scatter_states(model: MetricModel, states: list[BoundaryState], cfg: FlowConfig,
                   chunk: int = 8192) -> list[ScatterRecord]:
    """Scatter many boundary states; output order follows input order."""
    chunks = [states[i:i + chunk] for i in range(0, len(states), chunk)]
    workers = min(worker_count(), len(chunks)) if chunks else 1
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda c: _scatter_chunk(model, c, cfg), chunks))
    else:
        parts = [_scatter_chunk(model, c, cfg) for c in chunks]
    return [r for part in parts for r in part]


def scatter_one(model: MetricModel, w: BoundaryState, cfg: FlowConfig) -> ScatterRecord:
    rec = _scatter_chunk(model, [w], cfg)[0]
    if rec.error == "NotInward":
        raise NotInward("boundary state points out of M")
    if rec.error == "EventRefinementFailed":
        from .errors import EventRefinementFailed
        raise EventRefinementFailed("exit event could not be polished")
    return rec


# ---------------------------------------------------------------------------
# tables


@dataclass
class ScatterTable:
    scene_digest: str
    grid: dict
    records: list
    l_max: float = 0.0

    @property
    def summary(self) -> dict:
        lengths = [r.length for r in self.records if r.status == "Scattered"]
        return {
            "records": len(self.records),
            "trapped": sum(r.status == "Trapped" for r in self.records),
            "tangent_singletons": sum(r.status == "TangentSingleton" for r in self.records),
            "errors": sum(r.status == "Error" for r in self.records),
            "max_omega_sum": max((sum(r.omega) for r in self.records), default=0),
            "length_min": min(lengths, default=0.0),
            "length_max": max(lengths, default=0.0),
            "l_max": self.l_max,
        }

    def rows(self):
        for r in self.records:
            ex = r.exit
            yield [
                r.entry.component, _fmt_s(r.entry.s), _fmt_theta(r.entry.theta),
                "" if ex is None else ex.component,
                "" if ex is None else _fmt_s(ex.s),
                "" if ex is None else _fmt_theta(ex.theta),
                _fmt(r.length), r.status if r.error is None else f"Error:{r.error}",
                "-".join(str(o) for o in r.omega), len(r.contacts),
            ]

    def to_csv(self, fh, manifest: dict | None = None):
        if manifest:
            for k in sorted(manifest):
                fh.write(f"# {k}: {manifest[k]}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in self.rows():
            w.writerow(row)

    def csv_text(self, manifest: dict | None = None) -> str:
        buf = io.StringIO()
        self.to_csv(buf, manifest)
        return buf.getvalue()


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_s(s) -> str:
    if isinstance(s, tuple):
        return ":".join(_fmt(v) for v in s)
    return _fmt(s)


def _fmt_theta(th) -> str:
    if th is None:
        return ""
    return _fmt_s(tuple(th)) if isinstance(th, tuple) else _fmt(th)


def _parse_s(text: str):
    if ":" in text:
        return tuple(float(v) for v in text.split(":"))
    return float(text)


@dataclass
class TableRow:
    """Lightweight record parsed back from a CSV table."""

    component: int
    s: object
    theta: object
    exit_component: int | None
    exit_s: object
    exit_theta: object
    length: float
    status: str
    omega: tuple
    n_contacts: int


def read_table_csv(fh) -> tuple[dict, list[TableRow]]:
    meta = {}
    lines = []
    for line in fh:
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition(":")
            meta[key.strip()] = val.strip()
        else:
            lines.append(line)
    reader = csv.DictReader(lines)
    if reader.fieldnames != CSV_HEADER:
        raise ValueError(f"unexpected table header {reader.fieldnames}")
    rows = []
    for r in reader:
        has_exit = r["exit_component"] != ""
        rows.append(TableRow(
            int(r["component"]), _parse_s(r["s"]), _parse_s(r["theta"]) if r["theta"] else None,
            int(r["exit_component"]) if has_exit else None,
            _parse_s(r["exit_s"]) if has_exit else None,
            _parse_s(r["exit_theta"]) if has_exit else None,
            float(r["length"]), r["status"],
            tuple(int(v) for v in r["omega"].split("-")) if r["omega"] else (),
            int(r["n_contacts"])))
    return meta, rows


def scattering_map(model: MetricModel, grid: list[BoundaryState], cfg: FlowConfig,
                   grid_meta: dict | None = None) -> ScatterTable:
    records = scatter_states(model, grid, cfg)
    return ScatterTable(model.spec.digest(), dict(grid_meta or {}), records, cfg.l_max(model))


def scatter_grid(model: MetricModel, n_pos: int, n_dir: int, cfg: FlowConfig) -> ScatterTable:
    grid = sample_inward_grid(model, n_pos, n_dir)
    meta = {"n_pos": n_pos, "n_dir": n_dir, "n_components": len(model.components), "dim": model.dim}
    return scattering_map(model, grid, cfg, meta)


# ---------------------------------------------------------------------------
# trapping


@dataclass
class TrapVerdict:
    gradient_type_evidence: bool
    witnesses: list
    l_max: float
    n_starts: int

    @property
    def label(self) -> str:
        return "GradientTypeEvidence" if self.gradient_type_evidence else "TrappedWitnesses"


def _sphere_directions(k: int, dim: int):
    if dim == 2:
        ang = 2 * math.pi * np.arange(k) / k
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    # antipodally closed set: half Fibonacci points and their negatives
    half = []
    golden = math.pi * (3.0 - math.sqrt(5.0))
    m = k // 2
    for i in range(m):
        zc = (i + 0.5) / m
        r = math.sqrt(1 - zc * zc)
        half.append([r * math.cos(golden * i), r * math.sin(golden * i), zc])
    half = np.array(half)
    return np.concatenate([half, -half])


def interior_phase_grid(model: MetricModel, n_pos: int | None = None, n_dir: int = 64):
    """Positions strictly inside M times a direction set closed under u -> -u."""
    from .models import probe_points

    n_pos = n_pos or (32 if model.dim == 2 else 12)
    X = probe_points(model, n_per_axis=n_pos)
    X = X[model.boundary_z(X) < -1e-6]
    D = _sphere_directions(n_dir, model.dim)
    Xs = np.repeat(X, len(D), axis=0)
    Us = np.tile(D, (len(X), 1))
    return Xs, Us


def trap_test(model: MetricModel, grid: list[BoundaryState], cfg: FlowConfig,
              n_pos: int | None = None, n_dir: int = 64) -> TrapVerdict:
    """Search for trajectories longer than the cutoff from the boundary and interior grids.

    Backward trajectories of interior starts are covered because the direction
    set is closed under reversal; backward trajectories from inward boundary
    states leave M at once.
    """
    witnesses = []
    for rec in scatter_states(model, grid, cfg):
        if rec.status == "Trapped":
            witnesses.append(("boundary", rec.entry.position.copy(), rec.entry.direction.copy()))
    Xs, Us = interior_phase_grid(model, n_pos, n_dir)
    phi, _ = model.factor(Xs)
    chunk = 16384
    for i in range(0, len(Xs), chunk):
        traces = integrate_batch(model, Xs[i:i + chunk], Us[i:i + chunk] * phi[i:i + chunk, None], cfg,
                                 events=False)
        for k, tr in enumerate(traces):
            if tr.trapped:
                witnesses.append(("interior", Xs[i + k].copy(), Us[i + k].copy()))
    return TrapVerdict(not witnesses, witnesses, cfg.l_max(model), len(grid) + len(Xs))


# ---------------------------------------------------------------------------
# time reversal


def _chart_distance(model, a, b):
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if model.torus:
        d = d - np.floor(d + 0.5)
    return float(np.linalg.norm(d))


def time_reversal_check(model: MetricModel, table: ScatterTable, cfg: FlowConfig) -> float:
    """Max position+direction mismatch after re-scattering reversed exits."""
    recs = [r for r in table.records if r.status == "Scattered" and r.length > 0]
    if not recs:
        return 0.0
    back = scatter_states(model, [reversed_state(model, r.exit) for r in recs], cfg)
    worst = 0.0
    for r, b in zip(recs, back):
        if b.status != "Scattered":
            return math.inf
        dpos = _chart_distance(model, b.exit.position, r.entry.position)
        ddir = float(np.linalg.norm(b.exit.direction + r.entry.direction))
        worst = max(worst, dpos + ddir, abs(b.length - r.length))
    return worst
