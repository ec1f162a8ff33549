"""Command-line entry point.

Exit codes: 0 success, 2 negative verdict (trapped witnesses, not conjugate,
bound violations, no blocking placement), 1 error, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time

import numpy as np

from . import __version__
from .errors import GeoScatterError, NotFound
from .flow import FlowConfig, hamiltonian, integrate_batch
from .models import SceneSpec, build_model, canonical_json

log = logging.getLogger("geoscatter")

EXIT_OK, EXIT_ERROR, EXIT_VERDICT, EXIT_USAGE = 0, 1, 2, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


def _manifest(sub: str, args, scene: SceneSpec | None = None, **extra) -> dict:
    m = {"subcommand": sub, "version": __version__}
    if scene is not None:
        m["scene_digest"] = scene.digest()
    for key in ("npos", "ndir", "lmax", "dt", "tol", "seed"):
        if getattr(args, key, None) is not None:
            m[key] = getattr(args, key)
    m.update(extra)
    return m


def _cfg(args) -> FlowConfig:
    return FlowConfig(step_dt=args.dt, boundary_tol=args.tol, max_length=args.lmax)


def _write_json(path, obj):
    text = canonical_json(obj) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _load(path):
    spec = SceneSpec.load(path)
    return spec, build_model(spec)


# ---------------------------------------------------------------------------
# subcommands


def cmd_scatter(args):
    from .scattering import sample_inward_grid, scattering_map

    spec, model = _load(args.scene)
    cfg = _cfg(args)
    grid = sample_inward_grid(model, args.npos, args.ndir)
    meta = {"n_pos": args.npos, "n_dir": args.ndir, "n_components": len(model.components), "dim": model.dim}
    table = scattering_map(model, grid, cfg, meta)
    man = _manifest("scatter", args, spec, l_max=cfg.l_max(model), **meta)
    with open(args.out, "w", newline="") as fh:
        table.to_csv(fh, man)
    if args.trace:
        _write_traces(args.trace, model, grid, cfg)
    log.info("scatter: %d records, %d trapped", len(table.records), table.summary["trapped"])
    return EXIT_OK


def _write_traces(path, model, grid, cfg):
    X = np.array([b.position for b in grid])
    phi, _ = model.factor(X)
    P = np.array([b.direction for b in grid]) * phi[:, None]
    res = integrate_batch(model, X, P, cfg, record=True)
    with open(path, "w") as fh:
        for i, r in enumerate(res):
            for t, x, p in r.checkpoints:
                f, _ = model.factor(x)
                fh.write(json.dumps({"record": i, "t": t, "x": x.tolist(), "u": (p / f).tolist(),
                                     "H": float(hamiltonian(model, x, p))}) + "\n")


def cmd_strata(args):
    from .strata import strata_scan

    spec, model = _load(args.scene)
    rep = strata_scan(model, args.npos, args.ndir)
    _write_json(args.out, {"manifest": _manifest("strata", args, spec), "report": rep.to_dict()})
    return EXIT_VERDICT if rep.violations else EXIT_OK


def cmd_audit(args):
    from .scattering import read_table_csv
    from .strata import multiplicity_audit

    with open(args.table) as fh:
        meta, rows = read_table_csv(fh)
    viol = multiplicity_audit(rows, args.dim)
    _write_json(args.out, {"manifest": _manifest("audit", args, table_digest=meta.get("scene_digest")),
                           "n_records": len(rows), "violations": viol})
    return EXIT_VERDICT if viol else EXIT_OK


def cmd_traptest(args):
    from .scattering import sample_inward_grid, trap_test

    spec, model = _load(args.scene)
    cfg = _cfg(args)
    verdict = trap_test(model, sample_inward_grid(model, args.npos, args.ndir), cfg,
                        n_pos=args.interior_pos, n_dir=args.interior_dir)
    out = {"manifest": _manifest("traptest", args, spec, l_max=verdict.l_max),
           "verdict": verdict.label, "n_starts": verdict.n_starts, "n_witnesses": len(verdict.witnesses),
           "witnesses": [{"kind": k, "x": x.tolist(), "u": u.tolist()} for k, x, u in verdict.witnesses[:50]]}
    _write_json(args.out, out)
    return EXIT_OK if verdict.gradient_type_evidence else EXIT_VERDICT


def cmd_quotient(args):
    from .holography import build_trajectory_complex
    from .scattering import read_table_csv

    with open(args.table) as fh:
        meta, rows = read_table_csv(fh)
    grid = {k: int(meta[k]) for k in ("n_pos", "n_dir", "n_components", "dim") if k in meta}
    cx = build_trajectory_complex(rows, grid)
    _write_json(args.out, {"manifest": _manifest("quotient", args, table_digest=meta.get("scene_digest")),
                           "complex": cx.to_dict()})
    return EXIT_OK


def cmd_conjugacy(args):
    from .holography import conjugacy_check, parse_phi

    s1, m1 = _load(args.scene1)
    s2, m2 = _load(args.scene2)
    rep = conjugacy_check(m1, m2, parse_phi(args.phi), _cfg(args), args.lens, args.npos, args.ndir)
    man = _manifest("conjugacy", args, None, scene1_digest=s1.digest(), scene2_digest=s2.digest(), phi=args.phi)
    _write_json(args.out, {"manifest": man, "report": rep.to_dict()})
    return EXIT_OK if rep.conjugate else EXIT_VERDICT


def cmd_cutscatter(args):
    from .holography import cut_and_scatter_check
    from .scattering import scatter_grid

    spec, model = _load(args.scene)
    cfg = _cfg(args)
    table = scatter_grid(model, args.npos, args.ndir, cfg)
    rep = cut_and_scatter_check(model, table, cfg, args.ngeo, args.length, args.seed)
    _write_json(args.out, {"manifest": _manifest("cutscatter", args, spec), "report": rep.to_dict()})
    return EXIT_OK if rep.residual <= 1e-5 else EXIT_VERDICT


def cmd_thetastar(args):
    from .swiss_cheese import parse_theta_grid, theta_star_search

    res = theta_star_search(args.lines, parse_theta_grid(args.thetas))
    _write_json(args.out, {"manifest": _manifest("thetastar", args, lines=args.lines, thetas=args.thetas),
                           "result": res.to_dict()})
    return EXIT_OK


def cmd_blockdisks(args):
    from .swiss_cheese import place_blocking_disks

    try:
        pl = place_blocking_disks(args.radius, args.budget, args.seed, certify=not args.no_certify)
    except NotFound as exc:
        sys.stderr.write(f"NotFound: {exc}\n")
        return EXIT_VERDICT
    scene = pl.to_scene()
    with open(args.out, "w") as fh:
        fh.write(scene.to_json() + "\n")
    log.info("blockdisks: %d disks, margin %.3g, %s", len(pl.centers), pl.margin, pl.trap_verdict)
    return EXIT_OK


def cmd_balanced(args):
    from .holography import balanced_check, lyapunov_bigball
    from .scattering import scatter_grid

    spec, model = _load(args.scene)
    F = lyapunov_bigball(model, radius=args.radius)
    table = scatter_grid(model, args.npos, args.ndir, _cfg(args))
    res = balanced_check(model, F, table)
    _write_json(args.out, {"manifest": _manifest("balanced", args, spec, ball_radius=F.radius),
                           "residual": res})
    return EXIT_OK if res <= args.threshold else EXIT_VERDICT


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="geoscatter", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def flow_opts(q, npos=64, ndir=32):
        q.add_argument("--npos", type=int, default=npos)
        q.add_argument("--ndir", type=int, default=ndir)
        q.add_argument("--lmax", type=float, default=None, help="trap cutoff (default 50 x diameter)")
        q.add_argument("--dt", type=float, default=1e-2)
        q.add_argument("--tol", type=float, default=1e-12)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--out", default="-")

    q = sub.add_parser("scatter", help="scattering table as CSV")
    q.add_argument("--scene", required=True)
    q.add_argument("--trace", default=None, help="JSONL checkpoint dump")
    flow_opts(q)
    q.set_defaults(func=cmd_scatter)

    q = sub.add_parser("strata", help="tangency strata report")
    q.add_argument("--scene", required=True)
    q.add_argument("--npos", type=int, default=128)
    q.add_argument("--ndir", type=int, default=64)
    q.add_argument("--out", default="-")
    q.set_defaults(func=cmd_strata)

    q = sub.add_parser("audit", help="multiplicity bounds of a table")
    q.add_argument("--table", required=True)
    q.add_argument("--dim", type=int, default=2)
    q.add_argument("--out", default="-")
    q.set_defaults(func=cmd_audit)

    q = sub.add_parser("traptest", help="search for trapped geodesics")
    q.add_argument("--scene", required=True)
    q.add_argument("--interior-pos", type=int, default=None)
    q.add_argument("--interior-dir", type=int, default=64)
    flow_opts(q, 32, 16)
    q.set_defaults(func=cmd_traptest)

    q = sub.add_parser("quotient", help="trajectory complex of a table")
    q.add_argument("--table", required=True)
    q.add_argument("--out", default="-")
    q.set_defaults(func=cmd_quotient)

    q = sub.add_parser("conjugacy", help="scattering/lens conjugacy harness")
    q.add_argument("--scene1", required=True)
    q.add_argument("--scene2", required=True)
    q.add_argument("--phi", default="identity", help="identity | rotate:RHO | FILE")
    q.add_argument("--lens", action="store_true")
    flow_opts(q, 32, 16)
    q.set_defaults(func=cmd_conjugacy)

    q = sub.add_parser("cutscatter", help="cut & scatter decomposition on a flat torus")
    q.add_argument("--scene", required=True)
    q.add_argument("--ngeo", type=int, default=200)
    q.add_argument("--length", type=float, default=10.0)
    flow_opts(q, 256, 128)
    q.set_defaults(func=cmd_cutscatter)

    q = sub.add_parser("thetastar", help="star covering threshold on the 2-simplex")
    q.add_argument("--lines", type=int, default=720)
    q.add_argument("--thetas", default="0.05:1.0:0.05")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", default="-")
    q.set_defaults(func=cmd_thetastar)

    q = sub.add_parser("blockdisks", help="line-blocking disks on the torus")
    q.add_argument("--radius", type=float, required=True)
    q.add_argument("--budget", type=int, default=200)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--no-certify", action="store_true", help="skip the trap_test re-certification")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_blockdisks)

    q = sub.add_parser("balanced", help="big-ball Lyapunov balance residual")
    q.add_argument("--scene", required=True)
    q.add_argument("--radius", type=float, default=None, help="ball radius (chart units)")
    q.add_argument("--threshold", type=float, default=1e-6)
    flow_opts(q, 32, 16)
    q.set_defaults(func=cmd_balanced)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except (GeoScatterError, ValueError, OSError, KeyError) as exc:
        sys.stderr.write(f"{type(exc).__name__}: {exc}\n")
        return EXIT_ERROR
    log.info("%s finished in %.2fs (exit %d)", args.command, time.perf_counter() - t0, code)
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
