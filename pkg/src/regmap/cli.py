"""Command line driver.

Exit codes: 0 success, 1 configuration error, 2 invalid input, 3 solver
failure, 4 infeasible morph.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io
from .config import RunConfig, load_config, validate_config
from .errors import (
    ConfigError,
    CurveEdgeMismatch,
    InadmissibleMesh,
    InconsistentPeriodicity,
    Infeasible,
    OutsideDomain,
    PointNotOnBoundary,
    RegmapError,
)
from .mesh import CurvedMesh, check_hypothesis, linearize
from .objective import PointSetTarget, Sensor

log = logging.getLogger("regmap")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_SOLVER, EXIT_INFEASIBLE = 0, 1, 2, 3, 4
_INPUT_ERRORS = (io.InputError, InadmissibleMesh, CurveEdgeMismatch, OutsideDomain, PointNotOnBoundary,
                 InconsistentPeriodicity, ValueError)


def _threads(arg) -> int:
    env = os.environ.get("REGMAP_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError("REGMAP_THREADS", "must be an integer") from None
        if n < 1:
            raise ConfigError("REGMAP_THREADS", "must be at least 1")
        return n
    return arg if arg else (os.cpu_count() or 1)


def _metadata(cfg: RunConfig | None, **extra) -> dict:
    meta = {"version": __version__, "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat()}
    if cfg is not None:
        meta["config"] = cfg.to_json()
    meta.update(extra)
    return meta


def _resolve_paths(cfg: RunConfig, base: Path) -> RunConfig:
    for name, value in vars(cfg.paths).items():
        if value is not None and not os.path.isabs(value):
            setattr(cfg.paths, name, str((base / value).resolve()))
    return cfg


def _config(path) -> RunConfig:
    cfg = load_config(path)
    return _resolve_paths(cfg, Path(path).parent if path else Path.cwd())


def _need(value, name):
    if value is None:
        raise ConfigError(f"paths.{name}", "required for this command")
    return value


# -- geometry commands ----------------------------------------------------------------

def cmd_check(args) -> int:
    mesh = io.read_mesh(args.mesh)
    _, gm = linearize(mesh, angle_tol=args.angle_tol)
    rep = check_hypothesis(gm)
    out = {"metadata": _metadata(None, mesh=str(args.mesh)), "report": rep.to_json()}
    text = json.dumps(out, sort_keys=True, indent=1)
    if args.output:
        io.dump_json(out, args.output)
    print(text)
    return EXIT_OK if rep.ok else EXIT_INPUT


def cmd_linearize(args) -> int:
    mesh = io.read_mesh(args.mesh)
    pm, gm = linearize(mesh, angle_tol=args.angle_tol)
    poly = CurvedMesh.from_linear(pm.vertices, pm.triangles, 1, mesh.boundary_facets, mesh.periodic_pairs)
    io.write_mesh(poly, args.output)
    rep = {
        "metadata": _metadata(None, mesh=str(args.mesh)),
        "polytope_vertices": pm.polytope_vertices.tolist(),
        "angular_vertices": pm.angular_vertices.tolist(),
        "fictitious_vertices": np.asarray(pm.fictitious_vertices).tolist(),
        "hypothesis": check_hypothesis(gm).to_json(),
    }
    io.dump_json(rep, Path(args.output).with_suffix(".report.json"))
    return EXIT_OK


def cmd_morph(args) -> int:
    from .morph import MorphProblem, solve_morph

    cfg = _config(args.config)
    kappa = args.kappa or cfg.kappa
    delta = args.delta or cfg.delta
    mesh = io.read_mesh(args.mesh)
    curves, bindings = io.read_curves(args.curves)
    prob = MorphProblem(mesh, curves, bindings, kappa, delta, cfg.penalty(), cfg.sigma_beta)
    res = solve_morph(prob)
    io.write_mesh(res.mesh, args.output)
    stem = Path(args.output).with_suffix("")
    io.write_rows(f"{stem}.history.csv", ["outer", "objective", "violation"],
                  [(i + 1, f, v) for i, (f, v) in enumerate(zip(res.objective, res.violations))])
    io.dump_json({"metadata": _metadata(cfg, kappa=kappa, delta=delta), "max_violation": res.max_violation,
                  "min_jacobian": res.min_jacobian, "outer_iterations": res.outer,
                  "n_pairs": int(res.x.shape[0])}, f"{stem}.report.json")
    return EXIT_OK


# -- registration ------------------------------------------------------------------------

def _problem(cfg: RunConfig):
    from .registration import RegistrationProblem
    from .space import DisplacementSpace

    mesh = io.read_mesh(_need(cfg.paths.mesh, "mesh"))
    pm, gm = linearize(mesh, angle_tol=cfg.angle_tol)
    space = DisplacementSpace(pm, cfg.kappa, cfg.sigma_beta)
    pb = io.read_mesh(cfg.paths.pb_mesh) if cfg.paths.pb_mesh else None
    opt = {"gtol": cfg.gtol, "max_iter": cfg.max_iter}
    return RegistrationProblem(space, gm, cfg.penalty(), pb, opt)


def _sensor_lookup(mesh, params, values):
    table = {tuple(np.atleast_1d(p)): v for p, v in zip(params, values)}

    def sensor_fn(mu):
        key = tuple(np.atleast_1d(np.asarray(mu, dtype=float)))
        if key not in table:
            raise io.InputError(f"no sensor for parameter {list(key)}")
        return Sensor(mesh, table[key])

    return sensor_fn


def _template_parameter(params):
    """Training parameter nearest to the centroid (ties to the lowest index)."""
    d = np.linalg.norm(params - params.mean(axis=0), axis=1)
    return params[int(np.argmin(d))]


def cmd_register(args) -> int:
    from .registration import GreedyConfig, greedy, rbf_fit, register_new, solve_single

    cfg = _config(args.config)
    threads = _threads(args.threads)
    out = Path(args.output)
    prob = _problem(cfg)
    if cfg.paths.points:
        tmpl, tgt = io.read_points(cfg.paths.points)
        term = PointSetTarget(prob.space, prob.gm, tmpl, tgt)
        r = solve_single(prob, [(term, 1.0)])
        mapped = term.mapped(r.a)[0]
        state = {"coefficients": r.a.tolist(), "f_star": r.f_target, "status": r.status, "flags": r.flags,
                 "mapped_points": mapped.tolist()}
        io.dump_json({"metadata": _metadata(cfg), "mode": "points", "state": state}, out / "state.json")
        io.write_rows(out / "registration.csv", ["mu", "f_star", "coef_norm"],
                      [("", r.f_target, float(np.linalg.norm(r.a)))])
        return EXIT_OK if not r.flags else EXIT_SOLVER
    mesh, params, values = io.read_manifest(_need(cfg.paths.sensors, "sensors"))
    sensor_fn = _sensor_lookup(mesh, params, values)
    mu_bar = _template_parameter(params)
    gcfg = GreedyConfig(cfg.n_max, cfg.tol, cfg.tol_pod, cfg.c_inf, threads)
    st = greedy(prob, params, sensor_fn, mu_bar, gcfg)
    model = rbf_fit(params, st.coefficients, cfg.r_min, cfg.split, cfg.seed)
    doc = {"metadata": _metadata(cfg), "mode": "sensors", "state": st.to_json(),
           "template_parameter": mu_bar.tolist(), "regression": model.to_json()}
    io.write_rows(out / "registration.csv", ["mu", "f_star", "coef_norm"],
                  [(" ".join(repr(float(x)) for x in p), float(f), float(np.linalg.norm(a)))
                   for p, f, a in zip(params, st.f_star, st.a_star)])
    io.write_rows(out / "box.csv", ["index", "neighbor", "lhs", "rhs", "satisfied"],
                  [(b["index"], b["neighbor"], b["lhs"], b["rhs"], b["satisfied"]) for b in st.box])
    io.write_rows(out / "greedy.csv", ["iteration", "n", "m", "max_f"],
                  [(h["iteration"], h["n"], h["m"], h["max_f"]) for h in st.history])
    if cfg.paths.test_sensors:
        tmesh, tparams, tvalues = io.read_manifest(cfg.paths.test_sensors)
        f_test, _ = register_new(prob, st, tparams, _sensor_lookup(tmesh, tparams, tvalues), model)
        doc["held_out"] = {"params": tparams.tolist(), "f_star": f_test.tolist()}
        io.write_rows(out / "held_out.csv", ["mu", "f_star"],
                      [(" ".join(repr(float(x)) for x in p), float(f)) for p, f in zip(tparams, f_test)])
    io.dump_json(doc, out / "state.json")
    fmax = float(np.max(st.f_star))
    log.info("max f* = %.3e (tol %.1e)", fmax, cfg.tol)
    return EXIT_OK if np.isfinite(fmax) else EXIT_SOLVER


def _load_state(path):
    doc = io.load_json(path)
    try:
        cfg = validate_config(doc["metadata"]["config"])
        st = doc["state"]
        W = np.asarray(st["W"], dtype=float)
        params = np.asarray(st["params"], dtype=float)
        coeffs = np.asarray(st["coefficients"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise io.InputError(f"{path}: malformed state: {exc}") from exc
    return cfg, W, params, coeffs


def _maps_from_state(path):
    from .registration import parametric_map, rbf_fit
    from .space import DisplacementSpace

    cfg, W, params, coeffs = _load_state(path)
    mesh = io.read_mesh(_need(cfg.paths.mesh, "mesh"))
    pm, gm = linearize(mesh, angle_tol=cfg.angle_tol)
    space = DisplacementSpace(pm, cfg.kappa, cfg.sigma_beta)
    model = rbf_fit(params, coeffs, cfg.r_min, cfg.split, cfg.seed)
    return cfg, (lambda mu: parametric_map(model, W, space, gm, mu))


def cmd_map_eval(args) -> int:
    cfg, make = _maps_from_state(args.state)
    mu = np.asarray(args.mu, dtype=float)
    phi = make(mu if mu.size > 1 else float(mu[0]))
    if args.points:
        pts = io.read_tri_points(args.points)
        y = phi(pts)
        io.write_rows(args.output, ["x", "y", "phi_x", "phi_y"], np.hstack([pts, y]).tolist())
    elif args.mesh:
        mesh = io.read_mesh(args.mesh)
        flat = mesh.nodes.reshape(-1, 2)
        io.write_mesh(mesh.with_nodes(phi(flat).reshape(mesh.nodes.shape)), args.output)
    else:
        raise ConfigError("map-eval", "either --points or --mesh is required")
    return EXIT_OK


def cmd_rom(args) -> int:
    from .rom import SnapshotSet, compare

    cfg, make = _maps_from_state(args.state)
    if args.config:
        cfg = _config(args.config)
    mesh, params, values = io.read_manifest(_need(cfg.paths.snapshots, "snapshots"))
    tmesh, tparams, tvalues = io.read_manifest(_need(cfg.paths.test_snapshots, "test_snapshots"))
    if tmesh.vertices.shape != mesh.vertices.shape:
        raise io.InputError("training and test snapshots live on different meshes")
    sq = lambda p: p[:, 0] if p.shape[1] == 1 else p  # noqa: E731
    train = SnapshotSet(mesh, sq(params), values)
    test = SnapshotSet(mesh, sq(tparams), tvalues)
    ns = [n for n in cfg.rom_sizes if n <= len(train)]
    maps_tr = [make(m) for m in train.params]
    maps_te = [make(m) for m in test.params]
    reports = compare(train, test, ns, maps_tr, maps_te)
    out = Path(args.output)
    io.dump_json({"metadata": _metadata(cfg, inner_product="lumped L2"), "reports": [r.to_json() for r in reports]},
                 out / "rom.json")
    io.write_rows(out / "rom.csv", ["method", "n", "E_max", "E_max_bnd"], [row for r in reports for row in r.rows()])
    return EXIT_OK


# -- fixtures ------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from . import synthetic as syn

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if args.case == "semicircle":
        from .morph import Polyline

        poly, arc, bindings = syn.semicircle_polytope()
        io.write_mesh(poly, out / "polytope.json")
        io.write_curves(out / "curves.json", [Polyline(arc, "arc")], bindings)
        io.write_mesh(syn.semicircle_mesh(args.kappa or 4), out / "mesh.json")
        io.write_points(out / "points.csv", syn.SEMICIRCLE_A[None], syn.SEMICIRCLE_B[None])
        io.dump_json({"kappa": args.kappa or 4, "xi": 1e-4, "paths": {"mesh": "mesh.json", "points": "points.csv"}},
                     out / "config.json")
        return EXIT_OK
    kappa = args.kappa or 6
    cm = syn.bump_channel_mesh(kappa)
    pm, gm = linearize(cm)
    io.write_mesh(cm, out / "mesh.json")
    io.write_mesh(syn.pushforward_mesh(gm, syn.rectangle_mesh(20, 10, 0, 2, 0, 1)), out / "pb_mesh.json")
    rect = syn.rectangle_mesh(40, 20, 0, 2, 0, 1)
    sens_cm = CurvedMesh.from_linear(rect.vertices, rect.triangles, 1)
    io.write_mesh(sens_cm, out / "sensor_mesh.json")
    # node ids follow the vertex numbering recovered from the mesh file
    sens = sens_cm.vertex_mesh
    snap = syn.pushforward_mesh(gm, syn.rectangle_mesh(80, 40, 0, 2, 0, 1))
    io.write_mesh(snap, out / "snapshot_mesh.json")
    rng = np.random.default_rng(args.seed)
    train = np.linspace(0.0, 1.0, 20)
    test = np.sort(rng.uniform(0.0, 1.0, 5))
    ys = gm.evaluate(sens.vertices, clamp=True)[0]
    for name, ps in (("sensors", train), ("sensors_test", test)):
        io.write_manifest(out / name / "manifest.json", out / "sensor_mesh.json", ps,
                          [syn.front_field(ys, mu) for mu in ps], prefix="sensor")
    sv = snap.vertex_mesh.vertices
    for name, ps in (("snapshots", train), ("snapshots_test", test)):
        io.write_manifest(out / name / "manifest.json", out / "snapshot_mesh.json", ps,
                          [syn.front_field(sv, mu) for mu in ps])
    io.dump_json({
        "kappa": kappa, "xi": 0.01, "seed": args.seed,
        "paths": {"mesh": "mesh.json", "pb_mesh": "pb_mesh.json", "sensors": "sensors/manifest.json",
                  "test_sensors": "sensors_test/manifest.json", "snapshots": "snapshots/manifest.json",
                  "test_snapshots": "snapshots_test/manifest.json"},
    }, out / "config.json")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regmap", description="Compositional registration maps on curved meshes.")
    p.add_argument("--version", action="version", version=f"regmap {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("check", help="check a curved mesh")
    s.add_argument("mesh")
    s.add_argument("-o", "--output")
    s.add_argument("--angle-tol", type=float, default=1e-6)
    s.set_defaults(func=cmd_check)

    s = sub.add_parser("linearize", help="write the polytope mesh of a curved mesh")
    s.add_argument("mesh")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--angle-tol", type=float, default=1e-6)
    s.set_defaults(func=cmd_linearize)

    s = sub.add_parser("morph", help="morph a straight mesh onto boundary curves")
    s.add_argument("mesh")
    s.add_argument("curves")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--kappa", type=int)
    s.add_argument("--delta", type=float)
    s.add_argument("--config")
    s.set_defaults(func=cmd_morph)

    s = sub.add_parser("register", help="run the greedy registration or a point-set registration")
    s.add_argument("--config", required=True)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("map-eval", help="evaluate a parametric map")
    s.add_argument("--state", required=True)
    s.add_argument("--mu", type=float, nargs="+", required=True)
    s.add_argument("--points")
    s.add_argument("--mesh")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_map_eval)

    s = sub.add_parser("rom", help="registered versus linear POD error curves")
    s.add_argument("--state", required=True)
    s.add_argument("--config")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--threads", type=int)
    s.set_defaults(func=cmd_rom)

    s = sub.add_parser("synth", help="write synthetic fixtures")
    s.add_argument("case", choices=["front", "semicircle"])
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--kappa", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"regmap: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Infeasible as exc:
        print(f"regmap: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except _INPUT_ERRORS as exc:
        print(f"regmap: invalid input: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except RegmapError as exc:
        print(f"regmap: solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
