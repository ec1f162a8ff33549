"""Catalog of chartable Riemannian domains behind one evaluation interface.

Every model is conformally flat in its chart, ``g(x) = phi(x) * I``, which
covers the flat plane and ball, the flat torus, the Poincare ball and their
bump perturbations.  Boundaries are described by smooth defining functions
``z`` with ``z < 0`` on the interior of M.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

import numpy as np
import sympy as sp
from scipy.optimize import brentq

from .errors import (
    BadComponentIndex,
    NonPositiveDefinite,
    OverlappingDisks,
    SceneError,
    UnsupportedDim,
    ZeroVector,
)

KINDS = ("FlatDomain", "TorusMinusDisks", "HyperbolicDomain", "ConformalPerturbation")
SCENE_KEYS = {"kind", "dim", "boundary_params", "perturbation", "seed", "base"}
MARGIN_FRACTION = 0.05
REGULARITY_TOL = 1e-3


# ---------------------------------------------------------------------------
# scene description


def _canonical(obj: Any) -> Any:
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, int):
        return obj
    if isinstance(obj, float):
        return _Float(obj)
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, np.generic):
        return _canonical(obj.item())
    if isinstance(obj, np.ndarray):
        return _canonical(obj.tolist())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


class _Float(float):
    def __repr__(self) -> str:
        return format(float(self), ".17g")


def canonical_json(obj: Any) -> str:
    """Sorted keys, no whitespace, floats with 17 significant digits."""
    def encode(o):
        if isinstance(o, _Float):
            if not math.isfinite(o):
                raise ValueError("non-finite float in canonical JSON")
            return repr(o)
        if isinstance(o, dict):
            items = sorted(o.items())
            return "{" + ",".join(json.dumps(k) + ":" + encode(v) for k, v in items) + "}"
        if isinstance(o, list):
            return "[" + ",".join(encode(v) for v in o) + "]"
        return json.dumps(o)

    return encode(_canonical(obj))


@dataclass(frozen=True)
class SceneSpec:
    kind: str
    dim: int = 2
    boundary_params: dict = field(default_factory=dict)
    perturbation: dict | None = None
    seed: int = 0
    base: "SceneSpec | None" = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SceneError(f"unknown scene kind {self.kind!r}")
        if self.dim not in (2, 3):
            raise UnsupportedDim(f"dim must be 2 or 3, got {self.dim}")
        if self.kind == "ConformalPerturbation":
            if self.base is None or self.perturbation is None:
                raise SceneError("ConformalPerturbation needs 'base' and 'perturbation'")
            if self.base.dim != self.dim:
                raise SceneError("perturbation dim differs from base dim")
            amp = float(self.perturbation.get("amplitude", 0.0))
            if not amp > -1.0:
                raise NonPositiveDefinite("conformal amplitude must exceed -1")
        elif self.perturbation is not None or self.base is not None:
            raise SceneError("'perturbation'/'base' only allowed for ConformalPerturbation")

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "kind": self.kind,
            "dim": self.dim,
            "boundary_params": self.boundary_params,
            "seed": self.seed,
        }
        if self.perturbation is not None:
            out["perturbation"] = self.perturbation
        if self.base is not None:
            out["base"] = self.base.to_dict()
        return out

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        if not isinstance(d, dict):
            raise SceneError("scene must be a JSON object")
        unknown = set(d) - SCENE_KEYS
        if unknown:
            raise SceneError(f"unknown scene keys: {sorted(unknown)}")
        if "kind" not in d:
            raise SceneError("scene is missing 'kind'")
        base = cls.from_dict(d["base"]) if d.get("base") is not None else None
        return cls(
            kind=d["kind"],
            dim=int(d.get("dim", 2)),
            boundary_params=d.get("boundary_params", {}) if base is None else {},
            perturbation=d.get("perturbation"),
            seed=int(d.get("seed", 0)),
            base=base,
        )

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SceneError(f"invalid scene JSON: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        with open(path) as fh:
            return cls.from_json(fh.read())


# convenience constructors used throughout tests and the CLI


def disk_scene(radius=1.0, center=None, dim=2) -> SceneSpec:
    center = [0.0] * dim if center is None else [float(v) for v in center]
    return SceneSpec("FlatDomain", dim, {"components": [
        {"type": "circle", "center": center, "radius": radius, "role": "outer"}]})


def annulus_scene(r_in=1.0, r_out=2.0) -> SceneSpec:
    return SceneSpec("FlatDomain", 2, {"components": [
        {"type": "circle", "center": [0.0, 0.0], "radius": r_out, "role": "outer"},
        {"type": "circle", "center": [0.0, 0.0], "radius": r_in, "role": "hole"}]})


def peanut_scene(a=1.2, c=1.0) -> SceneSpec:
    return SceneSpec("FlatDomain", 2, {"components": [
        {"type": "cassini", "center": [0.0, 0.0], "a": a, "c": c, "role": "outer"}]})


def hyperbolic_ball_scene(radius=0.5, dim=2) -> SceneSpec:
    return SceneSpec("HyperbolicDomain", dim, {"components": [
        {"type": "circle", "center": [0.0] * dim, "radius": radius, "role": "outer"}]})


def torus_scene(disks) -> SceneSpec:
    return SceneSpec("TorusMinusDisks", 2, {"disks": [
        {"center": [float(c[0]), float(c[1])], "radius": float(r)} for c, r in disks]})


def bump_scene(base: SceneSpec, center, amplitude, radius) -> SceneSpec:
    return SceneSpec("ConformalPerturbation", base.dim, {}, {
        "center": [float(v) for v in center], "amplitude": float(amplitude),
        "radius": float(radius)}, base.seed, base)


def rotated_scene(spec: SceneSpec, angle: float) -> SceneSpec:
    """Rotate every center of a planar scene about the origin."""
    if spec.dim != 2:
        raise UnsupportedDim("rotation helper is planar")
    c, s = math.cos(angle), math.sin(angle)

    def rot(p):
        return [c * p[0] - s * p[1], s * p[0] + c * p[1]]

    if spec.kind == "ConformalPerturbation":
        pert = dict(spec.perturbation)
        pert["center"] = rot(pert["center"])
        return SceneSpec(spec.kind, 2, {}, pert, spec.seed, rotated_scene(spec.base, angle))
    if spec.kind == "TorusMinusDisks":
        raise SceneError("rotations are not isometries of the unit torus")
    comps = []
    for comp in spec.boundary_params["components"]:
        comp = dict(comp)
        if comp.get("type") != "circle":
            raise SceneError("rotation helper supports circle components only")
        comp["center"] = rot(comp["center"])
        comps.append(comp)
    return SceneSpec(spec.kind, 2, {"components": comps}, None, spec.seed)


# ---------------------------------------------------------------------------
# boundary components


_SYMBOLS = sp.symbols("x y z", real=True)


def _wrap(d):
    return d - np.floor(d + 0.5)


class Component:
    """One connected boundary piece with its defining function ``z_i``."""

    def __init__(self, ctype: str, role: str, dim: int, params: dict, periodic: bool = False):
        self.type = ctype
        self.role = role
        self.dim = dim
        self.params = params
        self.periodic = periodic
        self.center = np.asarray(params.get("center", [0.0] * dim), dtype=float)
        if self.center.shape != (dim,):
            raise SceneError(f"component center must have {dim} coordinates")
        X = _SYMBOLS[:dim]
        d = [X[i] - float(self.center[i]) for i in range(dim)]
        r2 = sum(v ** 2 for v in d)
        if ctype == "circle":
            self.radius = float(params["radius"])
            if not self.radius > 0:
                raise SceneError("circle radius must be positive")
            expr = r2 - self.radius ** 2
        elif ctype == "cassini":
            if dim != 2:
                raise UnsupportedDim("cassini components are planar")
            a, c = float(params["a"]), float(params["c"])
            if not a > c > 0:
                raise SceneError("cassini oval needs a > c > 0 (single loop)")
            self.a, self.c = a, c
            expr = r2 ** 2 - 2 * c ** 2 * (d[0] ** 2 - d[1] ** 2) - (a ** 4 - c ** 4)
        elif ctype == "implicit":
            loc = {str(s): s for s in X}
            try:
                expr = sp.sympify(params["expr"], locals=loc)
            except (sp.SympifyError, TypeError) as exc:
                raise SceneError(f"cannot parse boundary expression: {exc}") from exc
            if not expr.free_symbols <= set(X):
                raise SceneError("boundary expression uses unknown symbols")
        else:
            raise SceneError(f"unknown component type {ctype!r}")
        if role == "hole" and ctype != "implicit":
            expr = -expr
        elif role not in ("outer", "hole"):
            raise SceneError(f"unknown component role {role!r}")
        self.expr = sp.expand(expr) if ctype != "implicit" else expr
        self._symbols = X
        self._partials: dict[int, list] = {}

    # -- evaluation --------------------------------------------------------
    def _local(self, X):
        X = np.asarray(X, dtype=float)
        if self.periodic:
            return self.center + _wrap(X - self.center)
        return X

    def _compile(self, order: int):
        if order not in self._partials:
            out = []
            for alpha in itertools.product(range(order + 1), repeat=self.dim):
                if sum(alpha) != order:
                    continue
                e = self.expr
                for i, k in enumerate(alpha):
                    if k:
                        e = sp.diff(e, self._symbols[i], k)
                out.append((alpha, sp.lambdify(self._symbols, e, "numpy")))
            self._partials[order] = out
        return self._partials[order]

    def _call(self, fn, X):
        vals = fn(*[X[..., i] for i in range(self.dim)])
        return np.broadcast_to(np.asarray(vals, dtype=float), X.shape[:-1])

    def value(self, X):
        X = self._local(X)
        (_, fn), = self._compile(0)
        return self._call(fn, X)

    def grad(self, X):
        X = self._local(X)
        out = np.empty(X.shape, dtype=float)
        for alpha, fn in self._compile(1):
            out[..., alpha.index(1)] = self._call(fn, X)
        return out

    def taylor(self, X, W, order: int):
        """Degree-``order`` Taylor coefficient of t -> z_i(X + t W)."""
        X = self._local(X)
        W = np.asarray(W, dtype=float)
        total = np.zeros(np.broadcast_shapes(X.shape[:-1], W.shape[:-1]))
        for alpha, fn in self._compile(order):
            coef = self._call(fn, X)
            mono = np.ones_like(total)
            fact = 1.0
            for i, k in enumerate(alpha):
                if k:
                    mono = mono * W[..., i] ** k
                    fact *= math.factorial(k)
            total = total + coef * mono / fact
        return total

    # -- chart ---------------------------------------------------------------
    def chart_point(self, s) -> np.ndarray:
        """Position on this component for parameter s (a pair in 3D)."""
        if self.dim == 2:
            phi = 2.0 * math.pi * float(s)
            e = np.array([math.cos(phi), math.sin(phi)])
            return self.center + self._polar_radius(phi) * e
        s1, s2 = (float(v) for v in s)
        phi = 2.0 * math.pi * s1
        ct = 1.0 - 2.0 * s2
        st = math.sqrt(max(0.0, 1.0 - ct * ct))
        e = np.array([st * math.cos(phi), st * math.sin(phi), ct])
        if self.type != "circle":
            raise BadComponentIndex("3D charts exist for spherical components only")
        return self.center + self.radius * e

    def _polar_radius(self, phi: float) -> float:
        if self.type == "circle":
            return self.radius
        if self.type == "cassini":
            c2 = self.c ** 2 * math.cos(2 * phi)
            return math.sqrt(c2 + math.sqrt(c2 * c2 + self.a ** 4 - self.c ** 4))
        if "rmax" not in self.params:
            raise BadComponentIndex("implicit component has no star-shaped chart (needs center and rmax)")
        e = np.array([math.cos(phi), math.sin(phi)])
        rmax = float(self.params["rmax"])

        def f(r):
            return float(self.value(self.center + r * e)) * (1.0 if self.role == "outer" else -1.0)

        return brentq(f, 1e-9 * rmax, rmax, xtol=1e-15, rtol=4e-16)

    def chart_param(self, X) -> Any:
        d = np.asarray(X, dtype=float) - self.center
        if self.periodic:
            d = _wrap(d)
        if self.dim == 2:
            return (math.atan2(d[1], d[0]) / (2 * math.pi)) % 1.0
        rho = float(np.linalg.norm(d))
        s1 = (math.atan2(d[1], d[0]) / (2 * math.pi)) % 1.0
        s2 = (1.0 - d[2] / rho) / 2.0
        return (s1, s2)


# ---------------------------------------------------------------------------
# conformal factors


class _Flat:
    def factor(self, X):
        X = np.asarray(X, dtype=float)
        return np.ones(X.shape[:-1]), np.zeros(X.shape)


class _Poincare:
    def factor(self, X):
        X = np.asarray(X, dtype=float)
        q = 1.0 - np.sum(X * X, axis=-1)
        phi = 4.0 / q ** 2
        return phi, (16.0 / q ** 3)[..., None] * X


class _Bump:
    """Multiply a base factor by 1 + rho with a compactly supported C-infinity bump."""

    def __init__(self, base, center, amplitude, radius, periodic):
        self.base = base
        self.center = np.asarray(center, dtype=float)
        self.amplitude = float(amplitude)
        self.radius = float(radius)
        self.periodic = periodic

    def rho(self, X):
        d = np.asarray(X, dtype=float) - self.center
        if self.periodic:
            d = _wrap(d)
        q = np.sum(d * d, axis=-1) / self.radius ** 2
        inside = q < 1.0
        qi = np.where(inside, q, 0.0)
        rho = np.where(inside, self.amplitude * np.exp(1.0 / (qi - 1.0)), 0.0)
        drho = np.where(inside, -rho / (qi - 1.0) ** 2, 0.0)[..., None] * (2.0 * d / self.radius ** 2)
        return rho, drho

    def factor(self, X):
        phi, dphi = self.base.factor(X)
        rho, drho = self.rho(X)
        return phi * (1.0 + rho), dphi * (1.0 + rho)[..., None] + phi[..., None] * drho


# ---------------------------------------------------------------------------
# the model


@dataclass(frozen=True)
class PhaseState:
    """A point (x, p) of the unit cotangent bundle: H(x, p) = 1/2."""

    x: np.ndarray
    p: np.ndarray
    cached_energy: float = 0.5

    @classmethod
    def from_vector(cls, model: "MetricModel", x, v) -> "PhaseState":
        x = np.asarray(x, dtype=float)
        u = normalize_direction(model, x, v)
        phi, _ = model.factor(x)
        p = float(phi) * u
        return cls(x, p, 0.5 * float(p @ p) / float(phi))

    def velocity(self, model: "MetricModel") -> np.ndarray:
        return model.inverse_metric_at(self.x) @ self.p


class MetricModel:
    """Immutable evaluation interface of a scene.

    All evaluation methods accept a single point of shape ``(n,)`` or a
    batch of shape ``(..., n)``.
    """

    def __init__(self, spec: SceneSpec, components: list[Component], metric, *,
                 torus: bool, oracle: str | None, flat: bool, hyperbolic: bool):
        self.spec = spec
        self.dim = spec.dim
        self.components = tuple(components)
        self._metric = metric
        self.torus = torus
        self.oracle = oracle
        self.flat = flat
        self.hyperbolic = hyperbolic
        self._outer = [i for i, c in enumerate(self.components) if c.role == "outer"]
        self._holes = [i for i, c in enumerate(self.components) if c.role == "hole"]
        self.diameter = self._chart_diameter()
        self.ambient_extension_margin = MARGIN_FRACTION * self.diameter

    def __setattr__(self, name, value):
        if getattr(self, "_frozen", False):
            raise AttributeError("MetricModel is immutable")
        object.__setattr__(self, name, value)

    def _freeze(self):
        object.__setattr__(self, "_frozen", True)

    @property
    def kind(self) -> str:
        return self.spec.kind

    # -- metric ------------------------------------------------------------
    def factor(self, X):
        return self._metric.factor(X)

    def metric_at(self, X):
        phi, _ = self.factor(X)
        return np.asarray(phi)[..., None, None] * np.eye(self.dim)

    def inverse_metric_at(self, X):
        phi, _ = self.factor(X)
        return (1.0 / np.asarray(phi))[..., None, None] * np.eye(self.dim)

    def metric_derivatives_at(self, X):
        """Array D[..., a, b, c] = d g_{bc} / d x^a."""
        _, dphi = self.factor(X)
        return np.asarray(dphi)[..., :, None, None] * np.eye(self.dim)

    # -- boundary ------------------------------------------------------------
    def wrap(self, X):
        X = np.asarray(X, dtype=float)
        return X - np.floor(X) if self.torus else X

    def component_values(self, X):
        X = np.asarray(X, dtype=float)
        return np.stack([c.value(X) for c in self.components], axis=-1)

    def _combine(self, Z):
        parts = []
        if self._outer:
            parts.append(np.min(Z[..., self._outer], axis=-1))
        if self._holes:
            parts.append(np.max(Z[..., self._holes], axis=-1))
        return np.maximum.reduce(parts) if len(parts) > 1 else parts[0]

    def active_component(self, X):
        """Index of the component whose z is closest to zero."""
        Z = self.component_values(X)
        return np.argmin(np.abs(Z), axis=-1)

    def boundary_z(self, X):
        return self._combine(self.component_values(X))

    def boundary_grad(self, X):
        X = np.asarray(X, dtype=float)
        Z = self.component_values(X)
        z = self._combine(Z)
        idx = np.argmin(np.abs(Z - z[..., None]), axis=-1)
        G = np.stack([c.grad(X) for c in self.components], axis=-2)
        return np.take_along_axis(G, idx[..., None, None], axis=-2)[..., 0, :]

    def in_collar(self, X):
        X = np.asarray(X, dtype=float)
        z = self.boundary_z(X)
        gnorm = np.linalg.norm(self.boundary_grad(X), axis=-1)
        ok = z <= self.ambient_extension_margin * gnorm
        if self.hyperbolic:
            ok &= np.sum(X * X, axis=-1) < 1.0
        return ok

    # -- boundary charts -----------------------------------------------------
    def component(self, index: int) -> Component:
        if not 0 <= index < len(self.components):
            raise BadComponentIndex(f"component {index} out of range")
        return self.components[index]

    def _chart_samples(self, n=256):
        pts = []
        for comp in self.components:
            if comp.dim == 2:
                ss = [(k + 0.5) / n for k in range(n)]
            else:
                m = int(math.sqrt(n))
                ss = [((i + 0.5) / m, (j + 0.5) / m) for i in range(m) for j in range(m)]
            try:
                pts.extend(comp.chart_point(s) for s in ss)
            except BadComponentIndex:
                continue
        return np.array(pts)

    def _chart_diameter(self) -> float:
        if self.torus:
            return math.sqrt(self.dim) / 2.0
        outer = [self.components[i] for i in self._outer]
        pts = []
        for comp in outer:
            try:
                pts.append(np.array([comp.chart_point(s) for s in np.linspace(0, 1, 256, endpoint=False)])
                           if comp.dim == 2 else
                           np.array([comp.chart_point((a, b)) for a in np.linspace(0, 1, 16, endpoint=False)
                                     for b in np.linspace(0.02, 0.98, 16)]))
            except BadComponentIndex:
                continue
        if not pts:
            return float(self.spec.boundary_params.get("diameter", 2.0))
        P = np.concatenate(pts)
        if len(P) < 2:
            return 1.0
        return float(np.max(np.linalg.norm(P[:, None, :] - P[None, :, :], axis=-1)))

    @cached_property
    def length_scale(self) -> float:
        """Metric diameter estimate, used for the default trap cutoff."""
        if not self.hyperbolic:
            return self.diameter
        P = self._chart_samples(64)
        if len(P) < 2:
            return self.diameter
        from .flow import poincare_distance
        D = poincare_distance(P[:, None, :], P[None, :, :])
        return float(D.max())


def _parse_components(bp: dict, dim: int) -> list[Component]:
    comps = bp.get("components")
    if not comps:
        raise SceneError("boundary_params.components must be a non-empty list")
    out = []
    for c in comps:
        if not isinstance(c, dict) or "type" not in c:
            raise SceneError("each component needs a 'type'")
        params = {k: v for k, v in c.items() if k not in ("type", "role")}
        out.append(Component(c["type"], c.get("role", "outer"), dim, params))
    # outer-first ordering
    return [c for c in out if c.role == "outer"] + [c for c in out if c.role == "hole"]


def _check_circles_disjoint(comps: list[Component], torus: bool):
    circles = [c for c in comps if c.type == "circle" and c.role == "hole"]
    for c in circles:
        if torus and 2 * c.radius >= 1.0:
            raise OverlappingDisks("a disk of diameter >= 1 overlaps its own translate")
    for a, b in itertools.combinations(circles, 2):
        d = a.center - b.center
        if torus:
            d = _wrap(d)
        if np.linalg.norm(d) <= a.radius + b.radius:
            raise OverlappingDisks("removed disks must have disjoint closures")


def build_model(spec: SceneSpec, *, validate: bool = True) -> MetricModel:
    """Construct and validate the model described by ``spec``."""
    if spec.dim not in (2, 3):
        raise UnsupportedDim(f"dim {spec.dim}")
    if spec.kind == "ConformalPerturbation":
        base = build_model(spec.base, validate=False)
        pert = spec.perturbation
        amp = float(pert.get("amplitude", 0.0))
        if amp == 0.0:
            metric = base._metric
        else:
            metric = _Bump(base._metric, pert["center"], amp, pert["radius"], base.torus)
        model = MetricModel(spec, list(base.components), metric, torus=base.torus,
                            oracle=None if amp != 0.0 else base.oracle,
                            flat=base.flat and amp == 0.0, hyperbolic=base.hyperbolic)
    elif spec.kind == "TorusMinusDisks":
        if spec.dim != 2:
            raise UnsupportedDim("TorusMinusDisks is implemented for dim 2")
        disks = spec.boundary_params.get("disks")
        if not disks:
            raise SceneError("TorusMinusDisks needs a non-empty 'disks' list")
        comps = []
        for d in disks:
            center = [float(v) % 1.0 for v in d["center"]]
            comps.append(Component("circle", "hole", 2, {"center": center, "radius": d["radius"]},
                                   periodic=True))
        _check_circles_disjoint(comps, torus=True)
        model = MetricModel(spec, comps, _Flat(), torus=True, oracle="flat", flat=True, hyperbolic=False)
    elif spec.kind == "FlatDomain":
        comps = _parse_components(spec.boundary_params, spec.dim)
        _check_circles_disjoint(comps, torus=False)
        model = MetricModel(spec, comps, _Flat(), torus=False, oracle="flat", flat=True, hyperbolic=False)
    else:
        comps = _parse_components(spec.boundary_params, spec.dim)
        _check_circles_disjoint(comps, torus=False)
        model = MetricModel(spec, comps, _Poincare(), torus=False, oracle="hyperbolic", flat=False,
                            hyperbolic=True)
        P = model._chart_samples(128)
        if len(P) and np.max(np.linalg.norm(P, axis=-1)) + model.ambient_extension_margin >= 1.0:
            raise SceneError("hyperbolic domain plus collar must lie inside the unit ball")
    model._freeze()
    if validate:
        _validate(model)
    return model


def probe_points(model: MetricModel, n_per_axis: int | None = None, seed: int = 0) -> np.ndarray:
    """A deterministic cloud of >= 1000 points of M and its collar."""
    rng = np.random.default_rng(seed)
    if model.torus:
        lo, hi = np.zeros(model.dim), np.ones(model.dim)
    else:
        P = model._chart_samples(128)
        if len(P) == 0:
            lo, hi = -np.ones(model.dim), np.ones(model.dim)
        else:
            lo = P.min(axis=0) - model.ambient_extension_margin
            hi = P.max(axis=0) + model.ambient_extension_margin
    k = n_per_axis or (40 if model.dim == 2 else 14)
    axes = [np.linspace(a, b, k) for a, b in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, model.dim)
    grid = grid + rng.uniform(-1e-3, 1e-3, grid.shape) * (hi - lo)
    keep = model.in_collar(grid)
    return grid[keep]


def _validate(model: MetricModel):
    X = probe_points(model)
    phi, _ = model.factor(X)
    if not np.all(np.isfinite(phi)) or np.min(phi) <= 0:
        raise NonPositiveDefinite("metric is not positive definite on the probe grid")
    Z = model.component_values(X)
    for i, comp in enumerate(model.components):
        G = comp.grad(X)
        near = np.abs(Z[:, i]) < REGULARITY_TOL * max(1.0, np.max(np.abs(Z[:, i])))
        if np.any(near) and np.min(np.linalg.norm(G[near], axis=-1)) == 0.0:
            raise SceneError("0 is not a regular value of the boundary function")


def normalize_direction(model: MetricModel, x, v) -> np.ndarray:
    """Positive multiple of v with g_x(u, u) = 1."""
    v = np.asarray(v, dtype=float)
    if not np.any(v):
        raise ZeroVector("cannot normalize the zero vector")
    phi, _ = model.factor(np.asarray(x, dtype=float))
    return v / math.sqrt(float(phi) * float(v @ v))


def inward_normal(model: MetricModel, x, component: int) -> np.ndarray:
    comp = model.component(component)
    grad = comp.grad(np.asarray(x, dtype=float))
    return normalize_direction(model, x, -grad)


def boundary_chart(model: MetricModel, s, component: int = 0):
    """Point of boundary component ``component`` at parameter s and its inward unit normal."""
    comp = model.component(component)
    x = comp.chart_point(s)
    if model.torus:
        x = model.wrap(x)
    return x, inward_normal(model, x, component)


def nearest_boundary_parameter(model: MetricModel, x):
    """(component, s) of the chart point closest to x."""
    x = np.asarray(x, dtype=float)
    k = int(np.argmin(np.abs(model.component_values(x))))
    return k, model.components[k].chart_param(x)
