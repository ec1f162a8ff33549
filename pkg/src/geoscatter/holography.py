"""Trajectory-space quotient, Lyapunov functions and rigidity harnesses."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import (
    BallTooSmall,
    EndpointMismatch,
    IncompatibleGrid,
    PhiNotInward,
    SegmentNotInTable,
)
from .flow import FlowConfig, flow_many
from .models import MetricModel
from .scattering import (
    BoundaryState,
    ScatterTable,
    TableRow,
    sample_inward_grid,
    scatter_states,
    state_from_chart,
    state_from_vector,
)

# ---------------------------------------------------------------------------
# trajectory complex


def _row_view(rec):
    """(status, entry component, exit component, exit s, exit theta, omega) of a record."""
    if isinstance(rec, TableRow):
        status = rec.status
        return status, rec.component, rec.exit_component, rec.exit_s, rec.exit_theta, rec.omega
    ex = rec.exit
    status = rec.status if rec.error is None else f"Error:{rec.error}"
    return (status, rec.entry.component, None if ex is None else ex.component,
            None if ex is None else ex.s, None if ex is None else ex.theta, rec.omega)


@dataclass
class TrajectoryComplex:
    nodes: list  # record indices
    labels: list  # omega per node
    edges: list  # (i, j) node pairs, i < j
    n_faces: int
    n_components: int
    omega_census: dict
    isolated_fraction: float

    @property
    def chi(self) -> int:
        """V - E + F over the grid cells whose four sides are all edges."""
        return len(self.nodes) - len(self.edges) + self.n_faces

    @property
    def chi_graph(self) -> int:
        return len(self.nodes) - len(self.edges)

    def to_dict(self) -> dict:
        return {
            "n_nodes": len(self.nodes),
            "n_edges": len(self.edges),
            "n_faces": self.n_faces,
            "n_components": self.n_components,
            "chi": self.chi,
            "chi_graph": self.chi_graph,
            "isolated_fraction": self.isolated_fraction,
            "omega_census": {"-".join(map(str, k)) or "()": v for k, v in sorted(self.omega_census.items())},
        }


def _circ(d):
    return abs(d - round(d))


def build_trajectory_complex(table, grid: dict | None = None) -> TrajectoryComplex:
    """Neighbor graph on non-trapped records of a product-grid planar table.

    Two records are adjacent when their entries are neighbors in the grid and
    their exits lie on the same component within 3 grid steps in (s, theta).
    """
    records = getattr(table, "records", table)
    grid = dict(grid if grid is not None else getattr(table, "grid", {}))
    try:
        n_pos, n_dir = int(grid["n_pos"]), int(grid["n_dir"])
        n_comp = int(grid.get("n_components", 1))
    except (KeyError, TypeError, ValueError) as exc:
        raise IncompatibleGrid("grid description needs n_pos and n_dir") from exc
    if int(grid.get("dim", 2)) != 2:
        raise IncompatibleGrid("trajectory complex is built for planar tables")
    if len(records) != n_comp * n_pos * n_dir:
        raise IncompatibleGrid(f"{len(records)} records do not fill a {n_comp}x{n_pos}x{n_dir} grid")
    views = [_row_view(r) for r in records]
    if any(v[0].startswith("Error") for v in views):
        raise IncompatibleGrid("table contains error rows")

    ds, dth = 1.0 / n_pos, math.pi / (n_dir + 1)
    node_of = {}
    nodes, labels = [], []
    for idx, v in enumerate(views):
        if v[0] in ("Scattered", "TangentSingleton"):
            node_of[idx] = len(nodes)
            nodes.append(idx)
            labels.append(tuple(v[5]))

    def index(c, i, k):
        return (c * n_pos + i % n_pos) * n_dir + k

    def close(a, b):
        va, vb = views[a], views[b]
        if va[2] != vb[2]:
            return False
        return (_circ(float(va[3]) - float(vb[3])) <= 3 * ds + 1e-12
                and abs(float(va[4]) - float(vb[4])) <= 3 * dth + 1e-12)

    edge_set = set()
    for c in range(n_comp):
        for i in range(n_pos):
            for k in range(n_dir):
                a = index(c, i, k)
                if a not in node_of:
                    continue
                for b in (index(c, i + 1, k), index(c, i, k + 1) if k + 1 < n_dir else None):
                    if b is None or b == a or b not in node_of:
                        continue
                    if close(a, b):
                        edge_set.add((min(node_of[a], node_of[b]), max(node_of[a], node_of[b])))
    faces = 0
    for c in range(n_comp):
        for i in range(n_pos if n_pos > 2 else n_pos - 1):
            for k in range(n_dir - 1):
                corners = [index(c, i, k), index(c, i + 1, k), index(c, i + 1, k + 1), index(c, i, k + 1)]
                if not all(q in node_of for q in corners):
                    continue
                sides = zip(corners, corners[1:] + corners[:1])
                if all((min(node_of[p], node_of[q]), max(node_of[p], node_of[q])) in edge_set
                       for p, q in sides):
                    faces += 1
    edges = sorted(edge_set)
    n = len(nodes)
    if n:
        rows = [e[0] for e in edges] + [e[1] for e in edges]
        cols = [e[1] for e in edges] + [e[0] for e in edges]
        adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        ncomp, _ = connected_components(adj, directed=False)
        deg = np.bincount(np.array(rows, dtype=int), minlength=n) if rows else np.zeros(n)
        isolated = float(np.mean(deg == 0))
    else:
        ncomp, isolated = 0, 0.0
    census: dict = {}
    for lab in labels:
        census[lab] = census.get(lab, 0) + 1
    return TrajectoryComplex(nodes, labels, edges, faces, int(ncomp), census, isolated)


# ---------------------------------------------------------------------------
# big-ball Lyapunov function


@dataclass
class LyapunovSamples:
    """F(w): length of the ambient geodesic through w from where it enters a big ball."""

    kind: str  # "flat" | "hyperbolic"
    center: np.ndarray
    radius: float  # Euclidean radius of the ball in the chart
    model: MetricModel = field(repr=False)

    def __call__(self, X, U):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float))
        E = U / np.linalg.norm(U, axis=1, keepdims=True)
        if self.kind == "flat":
            d = X - self.center
            dv = -np.sum(d * E, axis=1)  # d . (-e)
            disc = dv * dv - np.sum(d * d, axis=1) + self.radius ** 2
            return -dv + np.sqrt(disc)
        # hyperbolic law of cosines in the triangle (centre, x, entry point a)
        rho = 2.0 * math.atanh(self.radius)
        d0 = 2.0 * np.arctanh(np.linalg.norm(X, axis=1))
        r = np.linalg.norm(X, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos_g = np.where(r > 0, np.sum(E * X, axis=1) / np.where(r > 0, r, 1.0), 0.0)
        A, B, C = np.cosh(d0), np.sinh(d0) * cos_g, math.cosh(rho)
        y = (C + np.sqrt(C * C - (A * A - B * B))) / (A - B)
        return np.log(y)

    def of_state(self, b: BoundaryState) -> float:
        return float(self(b.position, b.direction)[0])


def lyapunov_bigball(model: MetricModel, center=None, radius: float | None = None) -> LyapunovSamples:
    """Big-ball Lyapunov function for an unperturbed flat or hyperbolic domain.

    Hyperbolic balls are centred at the origin of the Poincare ball.
    """
    if model.oracle is None or model.torus:
        raise ValueError("big-ball construction needs an unperturbed flat or hyperbolic domain")
    P = model._chart_samples(256)
    if center is None:
        center = np.zeros(model.dim) if model.hyperbolic else 0.5 * (P.min(axis=0) + P.max(axis=0))
    center = np.asarray(center, dtype=float)
    reach = float(np.max(np.linalg.norm(P - center, axis=1)))
    if radius is None:
        radius = 2.0 * reach if model.flat else 0.5 * (reach + 1.0)
    if model.hyperbolic:
        if np.any(center != 0):
            raise ValueError("hyperbolic big ball must be centred at the origin")
        if not radius < 1.0:
            raise BallTooSmall("hyperbolic ball must lie inside the Poincare ball")
    if not reach < radius:
        raise BallTooSmall(f"ball of radius {radius} does not contain M (reach {reach:.6g})")
    return LyapunovSamples(model.oracle, center, float(radius), model)


def balanced_check(model: MetricModel, F, table: ScatterTable) -> float:
    """max |F(exit) - F(entry) - length| over scattered records."""
    recs = [r for r in table.records if r.status == "Scattered"]
    if not recs:
        return 0.0
    Xe = np.array([r.entry.position for r in recs])
    Ue = np.array([r.entry.direction for r in recs])
    Xx = np.array([r.exit.position for r in recs])
    Ux = np.array([r.exit.direction for r in recs])
    L = np.array([r.length for r in recs])
    return float(np.max(np.abs(F(Xx, Ux) - F(Xe, Ue) - L)))


# ---------------------------------------------------------------------------
# Theta = K^{-1} o L


class Reparametrization:
    """Theta(y) = K^{-1}(L(y)) with L(y) = int_0^y |v|, K(y) = int_0^y alpha."""

    def __init__(self, t, speed, alpha, scale: float):
        self.t = np.asarray(t, dtype=float)
        self.T = float(self.t[-1])
        self._speed = CubicSpline(self.t, speed)
        self._alpha = CubicSpline(self.t, np.asarray(alpha, dtype=float) * scale)
        self._L = self._speed.antiderivative()
        self._K = self._alpha.antiderivative()
        grid = np.linspace(0.0, self.T, 8 * len(self.t) + 1)
        self._Kgrid = self._K(grid)
        self._grid = grid
        self.scale = scale

    def alpha(self, y):
        return self._alpha(y)

    def speed(self, y):
        return self._speed(y)

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        target = self._L(y)
        th = np.interp(target, self._Kgrid, self._grid)
        for _ in range(8):
            th = th - (self._K(th) - target) / self._alpha(th)
            th = np.clip(th, 0.0, self.T)
        return th

    def derivative(self, y):
        """|v(y)| / alpha(Theta(y)), the slope implied by K(Theta(y)) = L(y)."""
        return self._speed(y) / self._alpha(self(y))


def theta_reparametrization(t, speed, alpha, rtol: float = 1e-6) -> Reparametrization:
    """Build Theta from samples of |v| and of a positive 1-form along a trajectory.

    The endpoint integrals must agree to ``rtol``; the residual is removed by
    rescaling alpha so that K(T) = L(T) exactly.
    """
    t = np.asarray(t, dtype=float)
    speed = np.asarray(speed, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise ValueError("alpha must be positive along the trajectory")
    if t[0] != 0.0 or np.any(np.diff(t) <= 0):
        raise ValueError("checkpoint times must start at 0 and increase")
    LT = float(CubicSpline(t, speed).integrate(0.0, t[-1]))
    KT = float(CubicSpline(t, alpha).integrate(0.0, t[-1]))
    if abs(KT - LT) > rtol * abs(LT):
        raise EndpointMismatch(f"K(T) = {KT:.12g} differs from L(T) = {LT:.12g}")
    return Reparametrization(t, speed, alpha, LT / KT)


# ---------------------------------------------------------------------------
# conjugacy


def parse_phi(text: str):
    """Boundary chart map from 'identity', 'rotate:RHO' or a JSON file {"kind": ...}."""
    if text == "identity":
        return lambda c, s, th: (c, s, th)
    if text.startswith("rotate:"):
        rho = float(text.split(":", 1)[1])
        return lambda c, s, th: (c, (s + rho / (2 * math.pi)) % 1.0, th)
    with open(text) as fh:
        spec = json.load(fh)
    kind = spec.get("kind")
    if kind == "identity":
        return parse_phi("identity")
    if kind == "rotate":
        return parse_phi(f"rotate:{float(spec['angle'])!r}")
    raise ValueError(f"unknown boundary map kind {kind!r}")


@dataclass
class ConjugacyReport:
    max_exit_mismatch: float
    max_lens_mismatch: float
    offenders: list
    tolerance: float
    with_lens: bool
    n_records: int
    max_contact_order: int = 1

    @property
    def property_a_screen(self) -> bool:
        """Smoothness screen for the conjugating map: no contact of order above 2 in either table."""
        return self.max_contact_order <= 2

    @property
    def conjugate(self) -> bool:
        ok = self.max_exit_mismatch <= self.tolerance
        if self.with_lens:
            ok = ok and self.max_lens_mismatch <= self.tolerance
        return ok

    @property
    def verdict(self) -> str:
        return "Conjugate" if self.conjugate else "NotConjugate"

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "max_exit_mismatch": self.max_exit_mismatch,
                "max_lens_mismatch": self.max_lens_mismatch, "tolerance": self.tolerance,
                "with_lens": self.with_lens, "n_records": self.n_records,
                "max_contact_order": self.max_contact_order, "property_a_screen": self.property_a_screen,
                "offenders": self.offenders}


def _chart_gap(a, b):
    """Distance of two (component, s, theta) triples in the boundary chart."""
    if a[0] != b[0]:
        return math.inf
    ds = _circ(a[1] - b[1])
    dth = abs(math.remainder(a[2] - b[2], 2 * math.pi))
    return math.hypot(ds, dth)


def conjugacy_check(model1: MetricModel, model2: MetricModel, phi, cfg: FlowConfig,
                    with_lens: bool = False, n_pos: int = 32, n_dir: int = 16,
                    tolerance: float = 1e-5) -> ConjugacyReport:
    """Compare C_2 o phi with phi o C_1 (and lengths) on a sampled inward grid of model1."""
    if model1.dim != 2 or model2.dim != 2:
        raise ValueError("conjugacy harness is planar")
    grid1 = sample_inward_grid(model1, n_pos, n_dir)
    grid2 = []
    for b in grid1:
        c, s, th = phi(b.component, b.s, b.theta)
        w = state_from_chart(model2, c, s, th)
        if not w.inward:
            raise PhiNotInward(f"image of ({b.component}, {b.s}, {b.theta}) is not inward")
        grid2.append(w)
    rec1 = scatter_states(model1, grid1, cfg)
    rec2 = scatter_states(model2, grid2, cfg)
    worst_exit = worst_lens = 0.0
    offenders = []
    for i, (r1, r2) in enumerate(zip(rec1, rec2)):
        if r1.status != r2.status:
            gap, lens = math.inf, math.inf
        elif r1.status != "Scattered":
            gap, lens = 0.0, 0.0
        else:
            img = phi(r1.exit.component, r1.exit.s, r1.exit.theta)
            gap = _chart_gap(img, (r2.exit.component, r2.exit.s, r2.exit.theta))
            lens = abs(r2.length - r1.length)
        worst_exit = max(worst_exit, gap)
        worst_lens = max(worst_lens, lens)
        if gap > tolerance or (with_lens and lens > tolerance):
            offenders.append({"index": i, "s": r1.entry.s, "theta": r1.entry.theta,
                              "exit_mismatch": gap, "lens_mismatch": lens})
    offenders.sort(key=lambda o: -max(o["exit_mismatch"], o["lens_mismatch"]))
    order = max((max(r.omega) for r in rec1 + rec2 if r.omega), default=1)
    return ConjugacyReport(worst_exit, worst_lens, offenders[:20], tolerance, with_lens, len(grid1), int(order))


# ---------------------------------------------------------------------------
# cut & scatter


def _disk_hits(model, x0, e, length):
    """Sorted (t_in, t_out) of the line x0 + t e, 0 <= t <= length, with all disk lifts."""
    hits = []
    K = int(math.ceil(length)) + 2
    ks = np.arange(-K, K + 1)
    lat = np.stack(np.meshgrid(ks, ks, indexing="ij"), axis=-1).reshape(-1, 2).astype(float)
    for comp in model.components:
        C = comp.center + lat
        d = x0 - C
        b = d @ e
        disc = b * b - (np.sum(d * d, axis=1) - comp.radius ** 2)
        ok = disc > 0
        sq = np.sqrt(disc[ok])
        for t_in, t_out in zip(-b[ok] - sq, -b[ok] + sq):
            if t_out > 1e-9 and t_in < length:
                hits.append((float(t_in), float(t_out)))
    hits.sort()
    return hits


@dataclass
class CutScatterReport:
    max_exit_residual: float
    max_length_residual: float
    n_geodesics: int
    n_segments: int
    n_table_segments: int
    n_fresh_segments: int
    n_uncut: int

    @property
    def residual(self) -> float:
        return max(self.max_exit_residual, self.max_length_residual)

    def to_dict(self) -> dict:
        return dict(self.__dict__, residual=self.residual)


def _lookup(table_index, model, b, ds, dth):
    key = (b.component, int(round(b.s / ds)) % round(1 / ds))
    for rec in table_index.get(key, []):
        if abs(math.remainder(rec.entry.theta - b.theta, 2 * math.pi)) <= 1e-9 * max(1.0, dth) and \
                _circ(rec.entry.s - b.s) <= 1e-9:
            return rec
    raise SegmentNotInTable(f"entry ({b.component}, {b.s}, {b.theta}) is not a grid state")


def cut_and_scatter_check(model: MetricModel, table: ScatterTable, cfg: FlowConfig, n_geo: int = 200,
                          length: float = 10.0, seed: int = 0) -> CutScatterReport:
    """Decompose flat-torus geodesics into disk chords and M-segments and compare with straight lines.

    Each geodesic starts at a table entry state, so its first M-segment is the
    table's record; later entries are off-grid and are scattered afresh.
    Residuals: integrated exit point vs the closed-form line/disk-lift hit,
    and cumulative segment length vs the closed-form hit parameter.  A final
    segment that meets no disk before ``length`` (including geodesics with no
    cut at all) is flowed to ``length`` and compared with the line there.
    """
    if not (model.torus and model.flat):
        raise ValueError("cut & scatter harness needs a flat torus minus disks")
    if length <= 0:
        return CutScatterReport(0.0, 0.0, 0, 0, 0, 0, 0)
    rng = np.random.default_rng(seed)
    pool = [r for r in table.records if r.status in ("Scattered", "Trapped")]
    picks = rng.choice(len(pool), size=min(n_geo, len(pool)), replace=False)
    starts = [pool[i] for i in sorted(picks)]
    n_pos = int(table.grid.get("n_pos", 1))
    n_dir = int(table.grid.get("n_dir", 1))
    ds, dth = 1.0 / n_pos, math.pi / (n_dir + 1)
    index: dict = {}
    for r in table.records:
        index.setdefault((r.entry.component, int(round(r.entry.s / ds)) % n_pos), []).append(r)

    # per geodesic: line data, hits, progress
    geos = []
    for r in starts:
        x0 = r.entry.position.copy()
        e = r.entry.direction / np.linalg.norm(r.entry.direction)
        hits = [h for h in _disk_hits(model, x0, e, length) if h[0] > 1e-9]
        geos.append({"x0": x0, "e": e, "hits": hits, "t": 0.0, "k": 0, "state": r.entry,
                     "first": True, "alive": True, "tail": False})

    worst_exit = worst_len = 0.0
    n_seg = n_tab = n_fresh = 0
    while True:
        live = [g for g in geos if g["alive"]]
        if not live:
            break
        recs = []
        fresh = [g for g in live if not g["first"]]
        fresh_recs = iter(scatter_states(model, [g["state"] for g in fresh], cfg)) if fresh else iter(())
        for g in live:
            if g["first"]:
                recs.append(_lookup(index, model, g["state"], ds, dth))
                n_tab += 1
            else:
                recs.append(next(fresh_recs))
                n_fresh += 1
        for g, rec in zip(live, recs):
            g["first"] = False
            k = g["k"]
            if k >= len(g["hits"]):
                # no further disk on the truncated line: the rest lies in M
                if rec.status == "Trapped" or g["t"] + rec.length > length:
                    g["alive"] = False
                    g["tail"] = True
                    continue
                # the integrated segment exits where the line meets no disk
                worst_exit = math.inf
                g["alive"] = False
                continue
            if rec.status != "Scattered":
                if k < len(g["hits"]):
                    worst_exit = math.inf
                g["alive"] = False
                continue
            t_in, t_out = g["hits"][k]
            n_seg += 1
            exact = model.wrap(g["x0"] + t_in * g["e"])
            gap = rec.exit.position - exact
            gap -= np.floor(gap + 0.5)
            worst_exit = max(worst_exit, float(np.linalg.norm(gap)))
            t_hit = g["t"] + rec.length
            worst_len = max(worst_len, abs(t_hit - t_in))
            # chord through the disk
            comp = model.components[rec.exit.component]
            u = rec.exit.direction / np.linalg.norm(rec.exit.direction)
            d = rec.exit.position - comp.center
            d -= np.floor(d + 0.5)
            chord = -2.0 * float(d @ u)
            t_next = t_hit + chord
            worst_len = max(worst_len, abs(t_next - t_out))
            g["t"] = t_next
            g["k"] = k + 1
            if t_next >= length:
                g["alive"] = False
                continue
            x_next = model.wrap(rec.exit.position + chord * u)
            g["state"] = state_from_vector(model, x_next, u, rec.exit.component)
    tails = [g for g in geos if g["tail"]]
    if tails:
        X = np.array([g["state"].position for g in tails])
        U = np.array([g["state"].direction for g in tails])
        phi, _ = model.factor(X)
        X, _, _ = flow_many(model, X, U * phi[:, None], np.array([length - g["t"] for g in tails]), cfg.step_dt)
        for g, x in zip(tails, X):
            gap = x - model.wrap(g["x0"] + length * g["e"])
            gap -= np.floor(gap + 0.5)
            worst_exit = max(worst_exit, float(np.linalg.norm(gap)))
        n_seg += len(tails)
    uncut = sum(1 for g in geos if not g["hits"])
    return CutScatterReport(worst_exit, worst_len, len(geos), n_seg, n_tab, n_fresh, uncut)
