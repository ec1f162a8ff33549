"""Ellipsoid bound, simplex star covering and line-blocking disks on the torus."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.optimize import brentq, minimize
from shapely.geometry import Polygon
from shapely.ops import unary_union

from .errors import NegativeInput, NoCoveringTheta, NotFound
from .models import SceneSpec, torus_scene

# ---------------------------------------------------------------------------
# ellipsoid bound


def ellipsoid_bound(ell: float, eps: float) -> float:
    """Half minor axis of {c : |a-c| + |c-b| <= (1+eps)|a-b|} with |a-b| = ell."""
    if ell < 0 or eps < 0:
        raise NegativeInput("ell and eps must be non-negative")
    return ell * math.sqrt(eps / 2.0) * math.sqrt(1.0 + eps / 2.0)


def _segment_distance(P, a, b):
    """Distance of points P[..., 2] to the segments [a, b] (broadcast)."""
    ab = b - a
    t = np.sum((P - a) * ab, axis=-1) / np.sum(ab * ab, axis=-1)
    t = np.clip(t, 0.0, 1.0)
    return np.linalg.norm(P - (a + t[..., None] * ab), axis=-1)


def polyline_length(P):
    return np.sum(np.linalg.norm(np.diff(P, axis=-2), axis=-1), axis=-1)


def circular_arc(ell: float, eps: float, n_points: int = 257, shrink: float = 1e-9):
    """Circular arc over the chord [(0,0), (ell,0)] of length (1+eps)*ell*(1-shrink)."""
    target = (1.0 + eps) * (1.0 - shrink)
    if target <= 1.0:
        x = np.linspace(0.0, ell, n_points)
        return np.stack([x, np.zeros_like(x)], axis=1)
    # arc length / chord = alpha / sin(alpha) for half-angle alpha
    alpha = brentq(lambda a: a / math.sin(a) - target, 1e-12, math.pi - 1e-12, xtol=1e-15)
    R = ell / (2.0 * math.sin(alpha))
    ang = np.linspace(-alpha, alpha, n_points)
    cy = -R * math.cos(alpha)
    return np.stack([ell / 2 + R * np.sin(ang), cy + R * np.cos(ang)], axis=1)


def circular_arc_sagitta(ell: float, eps: float, shrink: float = 1e-9) -> float:
    target = (1.0 + eps) * (1.0 - shrink)
    if target <= 1.0:
        return 0.0
    alpha = brentq(lambda a: a / math.sin(a) - target, 1e-12, math.pi - 1e-12, xtol=1e-15)
    return ell * (1.0 - math.cos(alpha)) / (2.0 * math.sin(alpha))


@dataclass
class ArcSamples:
    points: np.ndarray  # (N, P, 2)
    ell: np.ndarray
    eps: np.ndarray
    rejected: int = 0


def random_arcs(n: int, eps_max: float = 0.05, n_points: int = 33, seed: int = 0) -> ArcSamples:
    """Perturbed circular arcs with endpoints at distance ell and length < (1+eps)*ell.

    Candidates whose polyline length reaches (1+eps)*ell are rejected and redrawn.
    """
    rng = np.random.default_rng(seed)
    out_pts, out_ell, out_eps = [], [], []
    rejected = 0
    need = n
    s = np.linspace(0.0, 1.0, n_points)
    while need > 0:
        m = max(need, 64)
        ell = rng.uniform(0.2, 2.0, m)
        eps = rng.uniform(1e-4, eps_max, m)
        # bulge from a circular-ish profile plus a random wiggle, rotated and translated
        frac = rng.uniform(0.0, 1.0, m)
        h = ell * np.sqrt(3.0 * eps / 8.0) * frac
        k = rng.integers(2, 6, m)
        wig = rng.uniform(-0.3, 0.3, m)[:, None] * h[:, None] * np.sin(k[:, None] * np.pi * s[None, :])
        y = 4.0 * h[:, None] * s * (1 - s) + wig
        P = np.stack([ell[:, None] * s[None, :], y], axis=-1)
        ok = polyline_length(P) < (1.0 + eps) * ell
        rejected += int(np.sum(~ok))
        phi = rng.uniform(0, 2 * np.pi, m)[:, None, None]
        rot = np.concatenate([np.cos(phi), -np.sin(phi), np.sin(phi), np.cos(phi)], axis=-1).reshape(m, 2, 2)
        P = np.einsum("nij,npj->npi", rot, P) + rng.uniform(-1, 1, (m, 1, 2))
        take = np.flatnonzero(ok)[:need]
        out_pts.append(P[take])
        out_ell.append(ell[take])
        out_eps.append(eps[take])
        need -= len(take)
    return ArcSamples(np.concatenate(out_pts), np.concatenate(out_ell), np.concatenate(out_eps), rejected)


def verify_ellipsoid_bound(samples: ArcSamples) -> float:
    """max(distance to chord - ellipsoid_bound, 0) over every sampled arc point."""
    P = samples.points
    a, b = P[:, :1, :], P[:, -1:, :]
    L = polyline_length(P)
    if np.any(L >= (1.0 + samples.eps) * samples.ell * (1 + 1e-12)):
        raise ValueError("an arc violates the length precondition")
    dist = _segment_distance(P, a, b).max(axis=1)
    delta = samples.ell * np.sqrt(samples.eps / 2.0) * np.sqrt(1.0 + samples.eps / 2.0)
    return float(max(0.0, np.max(dist - delta)))


# ---------------------------------------------------------------------------
# simplex stars

_SIMPLEX = np.array([[0.0, 0.0], [math.sqrt(2.0), 0.0], [math.sqrt(2.0) / 2, math.sqrt(1.5)]])


@dataclass
class SimplexStars:
    """Stars of the vertices of the first barycentric subdivision inside the second one.

    The simplex is the standard 2-simplex drawn isometrically in the plane
    (equilateral, side sqrt(2)).
    """

    simplex: np.ndarray = field(default_factory=lambda: _SIMPLEX.copy())

    def __post_init__(self):
        A, B, C = self.simplex
        mids = {frozenset((0, 1)): (A + B) / 2, frozenset((1, 2)): (B + C) / 2, frozenset((0, 2)): (A + C) / 2}
        bary = (A + B + C) / 3
        corners = [A, B, C]
        # first subdivision: 6 triangles (corner, edge midpoint, barycentre)
        tris = []
        for i in range(3):
            for j in range(3):
                if i != j:
                    tris.append((corners[i], mids[frozenset((i, j))], bary))
        self.vertices = corners + list(mids.values()) + [bary]
        # star of a in beta^2: union over incident triangles T of quad (a, mid(a,x), bary(T), mid(a,y))
        self.quads = []  # (vertex index, 4x2 array)
        for vi, a in enumerate(self.vertices):
            for T in tris:
                idx = [k for k in range(3) if np.allclose(T[k], a)]
                if not idx:
                    continue
                k = idx[0]
                x, y = T[(k + 1) % 3], T[(k + 2) % 3]
                bt = (T[0] + T[1] + T[2]) / 3
                self.quads.append((vi, np.array([a, (a + x) / 2, bt, (a + y) / 2])))
        self.vertices = np.array(self.vertices)

    def star_polygons(self, theta: float):
        """St(a, theta) for each vertex a as shapely polygons."""
        out = []
        for vi, a in enumerate(self.vertices):
            quads = [Polygon(a + theta * (Q - a)) for v, Q in self.quads if v == vi]
            out.append(unary_union(quads))
        return out

    def star_union(self, theta: float):
        return unary_union(self.star_polygons(theta))

    def polyhedron(self, theta: float):
        """P(theta): the simplex minus the interior of St(theta)."""
        return Polygon(self.simplex).difference(self.star_union(theta))

    def line_thresholds(self, psi, c):
        """Smallest theta at which each line n(psi).x = c meets int St(theta).

        The line meets the open quad a + theta*(Q - a) iff c - n.a lies strictly
        inside theta * (min, max) of n.(Q - a).
        """
        psi = np.asarray(psi, dtype=float)
        c = np.asarray(c, dtype=float)
        n = np.stack([-np.sin(psi), np.cos(psi)], axis=-1)
        best = np.full(psi.shape, np.inf)
        for vi, Q in self.quads:
            a = self.vertices[vi]
            proj = n @ (Q - a).T  # (..., 4)
            lo, hi = proj.min(axis=-1), proj.max(axis=-1)
            off = c - n @ a
            with np.errstate(divide="ignore", invalid="ignore"):
                th = np.where(off > 0, np.where(hi > 1e-15, off / hi, np.inf),
                              np.where(off < 0, np.where(lo < -1e-15, off / lo, np.inf),
                                       np.where((lo < -1e-15) & (hi > 1e-15), 0.0, np.inf)))
            best = np.minimum(best, th)
        return best

    def line_grid(self, line_samples: int):
        """Directions in [0, pi) times offsets strictly across the simplex width."""
        k = int(line_samples)
        psi = np.pi * np.arange(k) / k
        n = np.stack([-np.sin(psi), np.cos(psi)], axis=-1)
        proj = n @ self.simplex.T
        lo, hi = proj.min(axis=1), proj.max(axis=1)
        frac = (np.arange(k) + 0.5) / k
        PSI = np.repeat(psi, k)
        C = (lo[:, None] + (hi - lo)[:, None] * frac[None, :]).reshape(-1)
        return PSI, C


@dataclass
class ThetaStarResult:
    theta_hat: float
    witnesses: dict  # theta -> (psi, c) of a line missing int St(theta)
    line_samples: int
    eps_hat: float
    worst_threshold: float

    def to_dict(self) -> dict:
        return {"theta_hat": self.theta_hat, "line_samples": self.line_samples,
                "eps_hat": self.eps_hat, "worst_line_threshold": self.worst_threshold,
                "witnesses": {repr(k): list(v) for k, v in self.witnesses.items()}}


def theta_star_search(line_samples: int = 720, theta_grid=None, n: int = 2,
                      stars: SimplexStars | None = None) -> ThetaStarResult:
    """Smallest grid theta whose star set meets every sampled line of the simplex."""
    if n != 2:
        raise NotImplementedError("simplex stars are implemented for n = 2")
    if theta_grid is None:
        theta_grid = [round(0.05 * k, 10) for k in range(1, 21)]
    theta_grid = [float(t) for t in theta_grid]
    if any(b <= a for a, b in zip(theta_grid, theta_grid[1:])) or not all(0 < t <= 1 for t in theta_grid):
        raise ValueError("theta grid must be ascending in (0, 1]")
    stars = stars or SimplexStars()
    psi, c = stars.line_grid(line_samples)
    thr = stars.line_thresholds(psi, c)
    worst = int(np.argmax(thr))
    witnesses = {}
    theta_hat = None
    for th in theta_grid:
        miss = np.flatnonzero(thr >= th)
        if miss.size == 0:
            theta_hat = th
            break
        k = miss[np.argmax(thr[miss])]
        witnesses[th] = (float(psi[k]), float(c[k]))
    if theta_hat is None:
        raise NoCoveringTheta(f"no grid theta covers all lines (worst threshold {thr[worst]:.6g})")
    th2 = (1.0 + theta_hat) / 2.0
    eps_hat = float(stars.star_union(theta_hat).distance(stars.polyhedron(th2)))
    return ThetaStarResult(theta_hat, witnesses, int(line_samples), eps_hat, float(thr[worst]))


def parse_theta_grid(text: str):
    """'a:b:step' inclusive range or comma list."""
    if ":" in text:
        a, b, step = (Fraction(v) for v in text.split(":"))
        out = []
        k = 0
        while a + k * step <= b:
            out.append(float(a + k * step))
            k += 1
        return out
    return [float(v) for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------------------
# blocking disks on the unit torus


@dataclass
class DiskPlacement:
    centers: np.ndarray
    radii: np.ndarray
    truncation: int
    margin: float = 0.0
    witnesses: list = field(default_factory=list)
    trap_verdict: str | None = None

    def to_scene(self) -> SceneSpec:
        return torus_scene([(tuple(c), r) for c, r in zip(self.centers.tolist(), self.radii.tolist())])

    def to_dict(self) -> dict:
        return {"centers": self.centers.tolist(), "radii": self.radii.tolist(),
                "truncation": self.truncation, "margin": self.margin, "trap_verdict": self.trap_verdict}


def _primitive_directions(radius: float):
    """Primitive (p, q), one per line family, with radius*|(p,q)| < 1/2."""
    bound = 1.0 / (2.0 * radius)
    out = []
    m = int(math.ceil(bound)) + 1
    for p in range(0, m + 1):
        for q in range(-m, m + 1):
            if (p, q) <= (0, 0) or (p == 0 and q < 0):
                continue
            if math.gcd(p, abs(q)) != 1:
                continue
            if math.hypot(p, q) < bound:
                out.append((p, q))
    return out


def coverage_margin(centers, radius: float) -> float:
    """Smallest overlap of the blocking intervals over the rational line families.

    For primitive (p, q) the closed geodesics are level sets of f = -q x + p y
    mod 1; a disk of radius r centred at c meets the level f = t iff
    dist(t, f(c)) < r |(p, q)| on the circle R/Z.  A positive margin means
    every line family is blocked; families with r|(p, q)| >= 1/2 are blocked
    by any single disk and irrational lines are dense.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    worst = math.inf
    for p, q in _primitive_directions(radius):
        hw = radius * math.hypot(p, q)
        f = np.sort((-q * centers[:, 0] + p * centers[:, 1]) % 1.0)
        gaps = np.diff(np.concatenate([f, [f[0] + 1.0]]))
        worst = min(worst, float(2 * hw - gaps.max()))
    return worst


def disjoint_margin(centers, radius: float) -> float:
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    if len(centers) < 2:
        return math.inf
    d = centers[:, None, :] - centers[None, :, :]
    d -= np.floor(d + 0.5)
    dist = np.linalg.norm(d, axis=-1)
    iu = np.triu_indices(len(centers), 1)
    return float(dist[iu].min() - 2 * radius)


def unblocked_lines(centers, radius: float, n_dir: int = 720, n_off: int = 500, truncation=None):
    """Sampled lines of the plane missing every disk lift within the truncation window.

    Directions equispaced in [0, pi); offsets equispaced over one period of
    the lattice projection.  Returns (psi, offset) of the missing lines.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    R = truncation or (int(math.ceil(1.0 / (2.0 * radius))) + 2)
    ks = np.arange(-R, R + 1)
    lat = np.stack(np.meshgrid(ks, ks, indexing="ij"), axis=-1).reshape(-1, 2)
    lifts = (centers[:, None, :] + lat[None, :, :]).reshape(-1, 2)
    psi = np.pi * np.arange(n_dir) / n_dir
    n = np.stack([-np.sin(psi), np.cos(psi)], axis=1)
    # offsets of the lattice lines within one period: projections of Z^2 are dense or periodic;
    # sample offsets over [0, 1) * max(|n_x|, |n_y|), a period of n.Z^2 mod the larger component
    period = np.maximum(np.abs(n[:, 0]), np.abs(n[:, 1]))
    frac = (np.arange(n_off) + 0.5) / n_off
    missing = []
    proj = lifts @ n.T  # (L, n_dir)
    for j in range(n_dir):
        offs = frac * period[j]
        hit = np.abs(proj[:, j][None, :] - offs[:, None]) < radius
        miss = ~hit.any(axis=1)
        for o in offs[miss]:
            missing.append((float(psi[j]), float(o)))
    return missing


def place_blocking_disks(radius: float, budget: int = 200, seed: int = 0, max_disks: int = 4,
                         certify: bool = True, cfg=None) -> DiskPlacement:
    """Search 1..max_disks disjoint disks of the given radius that meet every torus line.

    Candidates are random centre sets refined by maximizing min(coverage,
    disjointness) margins; the first certified configuration (fewest disks)
    is checked by line sampling and re-certified with trap_test.
    """
    if not 0 < radius < 0.5:
        raise ValueError("radius must lie in (0, 0.5)")
    rng = np.random.default_rng(seed)
    R = int(math.ceil(1.0 / (2.0 * radius))) + 2

    def score(flat, k):
        C = flat.reshape(k, 2)
        return min(coverage_margin(C, radius), disjoint_margin(C, radius))

    # axis-parallel lines alone need k disks with k * 2r > 1
    k_min = int(math.floor(1.0 / (2.0 * radius))) + 1
    if k_min > max_disks:
        raise NotFound(f"axis-parallel lines need at least {k_min} disks of radius {radius}; "
                       f"witness: a horizontal line missing {max_disks} disks")
    found = None
    for k in range(k_min, max_disks + 1):
        best, best_s = None, -math.inf
        extra = None  # refinement tries after the first acceptable candidate
        tries = max(1, budget // max_disks)
        for _ in range(tries):
            x0 = rng.uniform(0, 1, 2 * k)
            x0[:2] = 0.5  # fix the first centre (translations are isometries)
            s0 = score(x0, k)
            if k > 1:
                res = minimize(lambda v: -score(np.concatenate([[0.5, 0.5], v]), k), x0[2:],
                               method="Nelder-Mead", options={"xatol": 1e-7, "fatol": 1e-9, "maxiter": 400 * k})
                x1 = np.concatenate([[0.5, 0.5], res.x % 1.0])
                s1 = score(x1, k)
                if s1 > s0:
                    x0, s0 = x1, s1
            if s0 > best_s:
                best, best_s = x0, s0
            if best_s > 1e-3:
                extra = 0 if extra is None else extra + 1
                if extra >= 8:
                    break
        if best_s > 1e-3:
            found = (best.reshape(k, 2) % 1.0, best_s)
            break
    if found is None:
        raise NotFound(f"no blocking placement of radius {radius} with <= {max_disks} disks")
    centers, margin = found
    witnesses = unblocked_lines(centers, radius, truncation=R)
    placement = DiskPlacement(centers, np.full(len(centers), float(radius)), R, margin, witnesses)
    if witnesses:
        raise NotFound(f"line sampling found {len(witnesses)} unblocked lines")
    if certify:
        from .flow import FlowConfig
        from .models import build_model
        from .scattering import sample_inward_grid, trap_test

        model = build_model(placement.to_scene())
        cfg = cfg or FlowConfig(max_length=100.0)
        verdict = trap_test(model, sample_inward_grid(model, 32, 16), cfg)
        placement.trap_verdict = verdict.label
        if not verdict.gradient_type_evidence:
            raise NotFound("placement failed trap_test re-certification")
    return placement
