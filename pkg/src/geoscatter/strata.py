"""Tangency strata of the boundary of SM by contact order."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .flow import classify_jets, derivative_threshold, jet_derivatives
from .models import MetricModel, boundary_chart
from .scattering import BoundaryState, TANGENT_TOL, boundary_frame

PLUS, MINUS = 1, -1


@dataclass(frozen=True)
class Contact:
    order: int
    side: int  # sign of the first nonvanishing derivative of z along the geodesic
    degenerate: bool = False

    @property
    def side_name(self) -> str:
        return {1: "Plus", -1: "Minus"}.get(self.side, "Zero")


@dataclass(frozen=True)
class Stratum:
    j: int
    sign: int  # +1: the flow points into M near the state (d_j^+), -1: d_j^-

    @property
    def label(self) -> str:
        return f"d{self.j}{'+' if self.sign > 0 else '-'}"


@dataclass
class JetVector:
    taus: np.ndarray
    x: np.ndarray
    w: np.ndarray
    numeric: bool = False


def _kmax(model, k_max):
    return k_max or 2 * model.dim - 1


def _active(model, x, component):
    if component is not None:
        return int(component)
    return int(model.active_component(np.asarray(x, dtype=float)))


def contact_order(model: MetricModel, x, u, k_max: int | None = None, tol: float = 1e-12,
                  component: int | None = None) -> Contact:
    """Order and side of the first nonvanishing derivative of z along the geodesic (x, u).

    Raises CollarTooNarrow if the difference stencil leaves the collar.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    k = _kmax(model, k_max)
    comp = _active(model, x, component)
    phi, _ = model.factor(x)
    D = jet_derivatives(model, x[None], (u * phi)[None], np.array([comp]), k, tol)
    order, side = classify_jets(model, D)
    if order[0] == 0:
        return Contact(k, 0, True)
    return Contact(int(order[0]), int(side[0]))


def flat_tau_jets(model: MetricModel, x, w, k: int | None = None,
                  component: int | None = None) -> JetVector:
    """Taylor coefficients (tau_0, ..., tau_k) of t -> z(x + t w) on a flat model."""
    if not model.flat:
        raise ValueError("flat_tau_jets needs a flat model (geodesics are straight lines)")
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    k = _kmax(model, k)
    comp = model.components[_active(model, x, component)]
    taus = np.array([float(comp.value(x))] + [float(comp.taylor(x, w, j)) for j in range(1, k + 1)])
    return JetVector(taus, x, w)


def _derivs(model, X, U, comps, kmax, tol=1e-12):
    """d^j/dt^j z(gamma(t)) at t=0, j = 1..kmax: exact for flat models."""
    X = np.atleast_2d(X)
    U = np.atleast_2d(U)
    if model.flat:
        out = np.zeros((len(X), kmax))
        for i, comp in enumerate(model.components):
            sel = comps == i
            if not np.any(sel):
                continue
            for j in range(1, kmax + 1):
                out[sel, j - 1] = math.factorial(j) * comp.taylor(X[sel], U[sel], j)
        return out
    phi, _ = model.factor(X)
    return jet_derivatives(model, X, U * phi[:, None], comps, kmax, tol, check_collar=False)


def _tau_vector(model, x, u, comp, k):
    """(tau_0, ..., tau_k) at a single state; numeric jets off the flat case."""
    D = _derivs(model, x[None], u[None], np.array([comp]), k)[0]
    taus = [float(model.components[comp].value(x))]
    taus += [D[j - 1] / math.factorial(j) for j in range(1, k + 1)]
    return np.array(taus)


def classify_boundary_state(model: MetricModel, b: BoundaryState, k_max: int | None = None) -> Stratum:
    """Stratum (j, sign) of a boundary state; j = 1 exactly when it is not tangent."""
    if not b.tangent:
        return Stratum(1, PLUS if b.normal_component < 0 else MINUS)
    k = _kmax(model, k_max)
    D = _derivs(model, b.position[None], b.direction[None], np.array([b.component]), k)
    D[:, 0] = 0.0
    order, side = classify_jets(model, D)
    if order[0] == 0:
        from .errors import GeoScatterError

        raise GeoScatterError(f"Degenerate contact beyond order {k}")
    return Stratum(int(order[0]), -int(side[0]))


# ---------------------------------------------------------------------------
# scanning


@dataclass
class StrataReport:
    n_samples: int
    counts: dict
    fractions: dict
    d2_points: list
    d3_points: list
    min_singular: dict
    violations: list = field(default_factory=list)
    n_pos: int = 0
    n_dir: int = 0
    d2_branches: int = 0

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_pos": self.n_pos,
            "n_dir": self.n_dir,
            "counts": self.counts,
            "fractions": self.fractions,
            "d2_branches": self.d2_branches,
            "d2_points": self.d2_points,
            "d3_points": self.d3_points,
            "min_singular": {str(k): v for k, v in self.min_singular.items()},
            "violations": self.violations,
            "generic": not self.violations,
        }

    def count(self, j: int, sign: int | None = None) -> int:
        if sign is None:
            return sum(v for k, v in self.counts.items() if k.startswith(f"d{j}"))
        return self.counts.get(Stratum(j, sign).label, 0)


def _frame_direction(model, x, comp, theta):
    tangents, n = boundary_frame(model, x, comp)
    return math.cos(theta) * tangents[0] + math.sin(theta) * n


def _normal_comp(model, x, comp, theta):
    tangents, n = boundary_frame(model, x, comp)
    grad = model.components[comp].grad(x)
    u = math.cos(theta) * tangents[0] + math.sin(theta) * n
    return float(grad @ u) / float(np.linalg.norm(grad))


def _tangent_roots(model, x, comp, thetas):
    """Direction angles where the normal component vanishes (2D)."""
    vals = [_normal_comp(model, x, comp, t) for t in thetas]
    roots = []
    m = len(thetas)
    for i in range(m):
        a, b = thetas[i], thetas[(i + 1) % m] + (2 * math.pi if i == m - 1 else 0.0)
        fa, fb = vals[i], vals[(i + 1) % m]
        if abs(fa) <= TANGENT_TOL:
            roots.append(a % (2 * math.pi))
        elif fa * fb < 0 and abs(fb) > TANGENT_TOL:
            r = brentq(lambda t: _normal_comp(model, x, comp, t), a, b, xtol=1e-15)
            roots.append(r % (2 * math.pi))
    return roots


def _jacobian_min_sv(model, x, comp, psi, j, h=None):
    """Smallest singular value of d(tau_0..tau_{j-1}) w.r.t. (x, direction angle)."""
    h = h or (1e-5 if model.flat else 1e-3)

    def F(v):
        xx = v[:model.dim]
        ang = v[model.dim]
        d = np.array([math.cos(ang), math.sin(ang)])
        phi, _ = model.factor(xx)
        d = d / math.sqrt(float(phi))
        return _tau_vector(model, xx, d, comp, max(j - 1, 1))[:j]

    v0 = np.concatenate([x, [psi]])
    cols = []
    for i in range(len(v0)):
        e = np.zeros_like(v0)
        e[i] = h
        cols.append((F(v0 + e) - F(v0 - e)) / (2 * h))
    J = np.array(cols).T
    return float(np.linalg.svd(J, compute_uv=False).min())


def _scan_3d(model, n_pos, n_dir, kmax):
    from .scattering import _fibonacci_sphere_params, chart_angle

    counts: dict = {}
    d2 = []
    total = 0
    for comp in range(len(model.components)):
        for s in _fibonacci_sphere_params(n_pos):
            x, _ = boundary_chart(model, s, comp)
            tangents, n = boundary_frame(model, x, comp)
            az = [2 * math.pi * k / n_dir for k in range(n_dir)]
            U = np.array([math.cos(a) * tangents[0] + math.sin(a) * tangents[1] for a in az])
            D = _derivs(model, np.repeat(x[None], len(U), 0), U, np.full(len(U), comp), kmax)
            D[:, 0] = 0.0
            order, side = classify_jets(model, D)
            for a, o, sd in zip(az, order, side):
                lab = Stratum(int(o), -int(sd)).label if o else "degenerate"
                counts[lab] = counts.get(lab, 0) + 1
                d2.append({"component": comp, "s": list(s), "azimuth": a, "order": int(o), "sign": -int(sd)})
            total += len(U)
            # transversal samples on the sphere of directions
            for el in np.linspace(-math.pi / 2, math.pi / 2, n_dir + 2)[1:-1]:
                if abs(el) < 1e-12:
                    continue
                lab = Stratum(1, PLUS if el > 0 else MINUS).label
                counts[lab] = counts.get(lab, 0) + n_dir
                total += n_dir
    return total, counts, d2


def strata_scan(model: MetricModel, n_pos: int, n_dir: int, k_max: int | None = None) -> StrataReport:
    """Bin a dense boundary grid by stratum and locate the d2 / d3 loci.

    Directions cover the full circle (no inset), so tangent directions are
    sampled and additionally refined as roots of the normal component.
    """
    kmax = _kmax(model, k_max)
    if model.dim == 3:
        total, counts, d2 = _scan_3d(model, n_pos, n_dir, kmax)
        fr = {k: v / total for k, v in counts.items()}
        viol = [p for p in d2 if p["order"] == 0 or p["order"] > 2 * model.dim - 1]
        d3 = [p for p in d2 if p["order"] >= 3]
        return StrataReport(total, counts, fr, d2, d3, {}, viol, n_pos, n_dir)

    thetas = [2 * math.pi * k / n_dir for k in range(n_dir)]
    counts: dict = {}
    total = 0
    d2_points = []
    branches: dict = {}
    for comp in range(len(model.components)):
        for si in range(n_pos):
            s = si / n_pos
            x, _ = boundary_chart(model, s, comp)
            # grid samples
            nc = np.array([_normal_comp(model, x, comp, t) for t in thetas])
            tang = np.abs(nc) <= TANGENT_TOL
            for v in nc[~tang]:
                lab = Stratum(1, PLUS if v < 0 else MINUS).label
                counts[lab] = counts.get(lab, 0) + 1
            total += len(thetas)
            # refined tangent directions (also covers exactly sampled ones)
            roots = _tangent_roots(model, x, comp, thetas)
            if roots:
                U = np.array([_frame_direction(model, x, comp, r) for r in roots])
                D = _derivs(model, np.repeat(x[None], len(U), 0), U, np.full(len(U), comp), kmax)
                D[:, 0] = 0.0
                order, side = classify_jets(model, D)
                for b_idx, (r, o, sd, dd) in enumerate(zip(roots, order, side, D)):
                    pt = {"component": comp, "s": s, "theta": r, "order": int(o), "sign": -int(sd),
                          "d2": float(dd[1]), "x": x.tolist()}
                    d2_points.append(pt)
                    branches.setdefault((comp, round(math.cos(r))), []).append(pt)
                tang_labels = [Stratum(int(o), -int(sd)).label if o else "degenerate"
                               for o, sd in zip(order, side)]
                # grid samples that are exactly tangent take the label of the refined root
                for t in np.asarray(thetas)[tang]:
                    k = int(np.argmin([abs(math.remainder(t - r, 2 * math.pi)) for r in roots]))
                    counts[tang_labels[k]] = counts.get(tang_labels[k], 0) + 1

    # d3: sign changes of the second derivative along each tangent branch
    d3_points = []
    for (comp, _), pts in branches.items():
        pts = sorted(pts, key=lambda p: p["s"])
        for a, b in zip(pts, pts[1:] + pts[:1]):
            if a["d2"] * b["d2"] < 0 or (a["d2"] == 0.0):
                d3_points.append(_refine_d3(model, comp, a, b, kmax))
    d3_points = [p for p in d3_points if p is not None]

    min_sv: dict = {}
    violations = []
    for pts, j in ((d2_points[:: max(1, len(d2_points) // 64)], 2), (d3_points, 3)):
        for p in pts:
            psi = _euclid_angle(model, p)
            sv = _jacobian_min_sv(model, np.asarray(p["x"]), p["component"], psi, j)
            min_sv[j] = min(min_sv.get(j, math.inf), sv)
            if sv < 1e-6 * model.diameter ** (1 - j):
                violations.append({"kind": "wedge", "j": j, "s": p["s"], "sv": sv})
    for p in d2_points + d3_points:
        if p["order"] == 0 or p["order"] > 2 * model.dim - 1:
            violations.append({"kind": "order", "s": p["s"], "order": p["order"]})

    fr = {k: v / total for k, v in counts.items()}
    rep = StrataReport(total, counts, fr, d2_points, d3_points, min_sv, violations, n_pos, n_dir,
                       len(branches))
    return rep


def _euclid_angle(model, p):
    u = _frame_direction(model, np.asarray(p["x"]), p["component"], p["theta"])
    return math.atan2(u[1], u[0])


def _tangent_d2(model, comp, s, ref_theta, kmax):
    x, _ = boundary_chart(model, s, comp)
    thetas = [ref_theta - 0.5, ref_theta + 0.5]
    r = brentq(lambda t: _normal_comp(model, x, comp, t), *thetas, xtol=1e-15)
    u = _frame_direction(model, x, comp, r)
    D = _derivs(model, x[None], u[None], np.array([comp]), kmax)[0]
    return D, x, r


def _refine_d3(model, comp, a, b, kmax):
    """Root of s -> d2 along a tangent branch between samples a and b."""
    sa, sb = a["s"], b["s"]
    if sb <= sa:
        sb += 1.0
    ref = a["theta"]

    def g(s):
        return _tangent_d2(model, comp, s % 1.0, ref, kmax)[0][1]

    try:
        s = brentq(g, sa, sb, xtol=1e-14) if a["d2"] != 0.0 else sa
    except ValueError:
        return None
    D, x, r = _tangent_d2(model, comp, s % 1.0, ref, kmax)
    D = D.copy()
    D[0] = 0.0
    D[1] = 0.0
    order, side = classify_jets(model, D[None])
    return {"component": comp, "s": s % 1.0, "theta": r, "order": int(order[0]) or 3,
            "sign": -int(side[0]), "d2": 0.0, "x": x.tolist()}


# ---------------------------------------------------------------------------
# multiplicity bounds


def multiplicity_audit(records, n: int) -> list:
    """Records whose combinatorial type breaks the bounds for dimension n.

    Checks max(omega) <= 2n-1, sum(omega) <= 4n-2 and sum(omega_i - 1) <= 2n-2.
    Accepts a ScatterTable, records with an ``omega`` attribute, or plain tuples.
    """
    recs = getattr(records, "records", records)
    out = []
    for i, r in enumerate(recs):
        omega = tuple(getattr(r, "omega", r))
        reasons = []
        if omega and max(omega) > 2 * n - 1:
            reasons.append(f"order {max(omega)} > {2 * n - 1}")
        if sum(omega) > 4 * n - 2:
            reasons.append(f"m = {sum(omega)} > {4 * n - 2}")
        if sum(o - 1 for o in omega) > 2 * n - 2:
            reasons.append(f"m' = {sum(o - 1 for o in omega)} > {2 * n - 2}")
        if reasons:
            out.append({"index": i, "omega": list(omega), "reasons": reasons})
    return out
