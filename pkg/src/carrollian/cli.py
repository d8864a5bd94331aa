"""Command line interface.

Exit codes: 0 pass, 1 validation failure, 2 IO or parse error,
3 infeasible construction, 4 integration failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .algebroid import ModelError, PreconditionError, validate
from .connection import METHODS, Infeasible, ZeroConnection, connect, max_residuals
from .distribution import IntegrationError, LeafParams, leaf_census
from .dynamics import ForceSection, classify_initial, integrate_apath
from .fields import FieldDomainError, FieldError
from .modelfile import ModelFileError, dump_model, dumps, load_model, model_hash
from .presets import make_preset, names

EXIT_OK, EXIT_FAIL, EXIT_IO, EXIT_INFEASIBLE, EXIT_INTEGRATION = 0, 1, 2, 3, 4

# residuals each method is expected to drive to zero
METHOD_CHECKS = {
    "l-compat": ("l_compat",),
    "carrollian": ("nonmetricity", "l_compat"),
    "frame-parallel": ("nonmetricity", "l_compat", "nabla_sigma"),
    "torsion-free": ("nonmetricity", "l_compat", "torsion"),
    "minimal-direct-sum": ("nonmetricity", "l_compat"),
}

log = logging.getLogger("carrollian")


class UsageError(Exception):
    pass


def _clean(obj):
    """JSON-safe copy: numpy scalars to python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def _json(obj, compact=False):
    if compact:
        return json.dumps(_clean(obj), sort_keys=True, separators=(",", ":"))
    return json.dumps(_clean(obj), sort_keys=True, indent=2)


def _emit_json(obj, out_path=None, compact=False):
    text = _json(obj, compact)
    if out_path:
        Path(out_path).write_text(text + "\n", encoding="utf-8")
    print(text)


def _fmt(v):
    return repr(float(v))


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _floats(text, count, what):
    try:
        vals = [float(v) for v in text.split(",")] if text.strip() else []
    except ValueError:
        raise UsageError(f"{what} must be comma-separated numbers, got {text!r}") from None
    if len(vals) != count:
        raise UsageError(f"{what} needs {count} values, got {len(vals)}")
    return vals


def _grid(text, dim):
    try:
        counts = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"grid must look like 21x21, got {text!r}") from None
    if len(counts) == 1:
        counts = counts * dim
    if len(counts) != dim or min(counts) < 1:
        raise UsageError(f"grid needs {dim} positive counts")
    return counts


def _header(command, model, params):
    return {"command": command, "model": model.name, "model_hash": model_hash(model), "parameters": params}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_validate(args):
    model, _ = load_model(args.path)
    rep = validate(model, samples=args.samples, seed=args.seed, tol=args.tol)
    report = _header("validate", model, {"samples": args.samples, "seed": args.seed, "tol": args.tol})
    report.update(rep.to_dict())
    report["verdict"] = "pass" if rep.passed else "fail"
    _emit_json(report, args.out)
    for name in rep.failed():
        chk = rep.check(name)
        log.error("check %s failed: %s", name, chk.detail or chk.value)
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_leaves(args):
    model, _ = load_model(args.path)
    model.require_kernel()
    grid = _grid(args.grid, model.n)
    params = LeafParams(eps=args.eps, return_tol=args.return_tol)
    census = leaf_census(model, grid, params)
    names_ = model.chart.coord_names
    rows = []
    for rec in census.records:
        rows.append([_fmt(v) for v in rec.seed] + [rec.leaf_class, rec.forward_event, rec.backward_event, _fmt(rec.arclength)])
    if args.out:
        _write_csv(args.out, list(names_) + ["class", "forward_event", "backward_event", "arclength"], rows)
    resolved = params.resolved(model)
    report = _header("leaves", model, {"grid": list(grid), **resolved.to_dict()})
    report["counts"] = census.counts
    report["cells"] = len(census.records)
    _emit_json(report)
    return EXIT_OK


def _base_connection(args, model, file_conn):
    if args.base == "zero":
        return None
    if file_conn is None:
        raise UsageError("--base file needs a [connection] table in the model file")
    return file_conn


def cmd_connect(args):
    model, file_conn = load_model(args.path)
    G0 = _base_connection(args, model, file_conn)
    params = {"method": args.method, "base": args.base, "samples": args.samples, "seed": args.seed, "tol": args.tol}
    report = _header("connect", model, params)
    conn = connect(model, args.method, G0) if args.method != "torsion-free" else METHODS[args.method](
        model, G0, samples=args.samples, seed=args.seed
    )
    if isinstance(conn, Infeasible):
        report.update(conn.to_dict())
        report["verdict"] = "infeasible"
        _emit_json(report, args.out)
        return EXIT_INFEASIBLE
    res = max_residuals(model, conn, args.samples, args.seed)
    checks = METHOD_CHECKS[args.method]
    ok = all(res[name] <= args.tol for name in checks)
    report["residuals"] = res
    report["checked"] = list(checks)
    report["gauge"] = getattr(conn, "gauge", "")
    report["verdict"] = "pass" if ok else "fail"
    if args.emit_gamma:
        _emit_gamma(args.emit_gamma, model, conn, _grid(args.gamma_grid, model.n) if model.n else ())
    _emit_json(report, args.out)
    return EXIT_OK if ok else EXIT_FAIL


def _emit_gamma(path, model, conn, grid):
    k = model.rank
    idx = [(c, a, b) for c in range(k) for a in range(k) for b in range(k)]
    header = list(model.chart.coord_names) + [f"G_{c + 1}_{a + 1}_{b + 1}" for c, a, b in idx]
    pts = model.chart.cell_centers(grid).reshape(-1, model.n) if model.n else np.zeros((1, 0))
    rows = []
    for x in pts:
        G = conn.values(model, x)
        rows.append([_fmt(v) for v in x] + [_fmt(G[i]) for i in idx])
    _write_csv(path, header, rows)


def _geodesic_connection(args, model, file_conn):
    if args.connection == "zero":
        return ZeroConnection()
    if args.connection == "file":
        if file_conn is None:
            raise UsageError("--connection file needs a [connection] table in the model file")
        return file_conn
    if args.connection in METHODS:
        conn = connect(model, args.connection)
        if isinstance(conn, Infeasible):
            raise _Infeasible(conn)
        return conn
    raise UsageError(f"--connection must be zero, file or one of {sorted(METHODS)}")


class _Infeasible(Exception):
    def __init__(self, result):
        super().__init__(f"{result.method} connection is infeasible")
        self.result = result


def cmd_geodesic(args):
    model, file_conn = load_model(args.path)
    model.require_kernel()
    start = _floats(args.start, model.n, "--start")
    alpha = _floats(args.alpha, model.rank, "--alpha")
    try:
        G = _geodesic_connection(args, model, file_conn)
    except _Infeasible as exc:
        report = _header("geodesic", model, {"connection": args.connection})
        report.update(exc.result.to_dict())
        print(_json(report, compact=True))
        return EXIT_INFEASIBLE
    force = None
    if args.force and args.force != "none":
        force = ForceSection.build(model, [s.strip() for s in args.force.split(",")], args.force_mode, label=args.force)
    try:
        cls = classify_initial(model, alpha, start)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        traj = integrate_apath(model, G, start, alpha, force, t_end=args.t, dt=args.dt)
    except FieldDomainError as exc:
        raise IntegrationError(f"field evaluation failed: {exc}") from None
    speeds = traj.speeds(model)
    mis = traj.misalignment(model)
    if args.out:
        n, k = model.n, model.rank
        header = ["t"] + [f"gamma_{c}" for c in model.chart.coord_names] + [f"alpha_{a + 1}" for a in range(k)]
        header += ["speed", "misalignment"]
        rows = []
        for j in range(len(traj.t)):
            row = [_fmt(traj.t[j])] + [_fmt(v) for v in traj.gamma[j]] + [_fmt(v) for v in traj.alpha[j]]
            rows.append(row + [_fmt(speeds[j]), _fmt(mis[j])])
        _write_csv(args.out, header, rows)
    params = {
        "connection": args.connection,
        "start": start,
        "alpha": alpha,
        "force": args.force,
        "force_mode": args.force_mode,
        "t": args.t,
        "dt": args.dt,
    }
    report = _header("geodesic", model, params)
    report.update(
        {
            "classification": cls,
            "events": [{"event": name, "t": t} for name, t in traj.events],
            "final_gamma": traj.gamma[-1],
            "final_alpha": traj.alpha[-1],
            "samples": len(traj.t),
            "max_misalignment": float(np.max(mis)),
            "integration": traj.meta,
        }
    )
    print(_json(report, compact=True))
    return EXIT_OK


def _parse_params(items):
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--param expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def cmd_preset(args):
    if args.list:
        print("\n".join(names()))
        return EXIT_OK
    if not args.name:
        raise UsageError("preset name required; available: " + ", ".join(names()))
    model = make_preset(args.name, **_parse_params(args.param))
    if args.emit:
        dump_model(model, args.emit)
    else:
        sys.stdout.write(dumps(model))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="carrollian", description="Numerical tools for Carrollian Lie algebroids.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check the algebroid and Carrollian axioms")
    v.add_argument("path")
    v.add_argument("--samples", type=int, default=128)
    v.add_argument("--seed", type=int, default=42)
    v.add_argument("--tol", type=float, default=1e-8)
    v.add_argument("--out", help="also write the JSON report here")
    v.set_defaults(func=cmd_validate)

    lv = sub.add_parser("leaves", help="classify Carroll leaves through grid cell centers")
    lv.add_argument("path")
    lv.add_argument("--grid", default="21x21")
    lv.add_argument("--eps", type=float, default=None, help="singular threshold (default 1e-6 * chart diagonal)")
    lv.add_argument("--return-tol", type=float, default=1e-4)
    lv.add_argument("--out", help="CSV of per-cell results")
    lv.set_defaults(func=cmd_leaves)

    c = sub.add_parser("connect", help="construct a connection and report its residuals")
    c.add_argument("path")
    c.add_argument("--method", choices=sorted(METHODS), default="carrollian")
    c.add_argument("--base", choices=("zero", "file"), default="zero")
    c.add_argument("--samples", type=int, default=64)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-9)
    c.add_argument("--out", help="also write the JSON report here")
    c.add_argument("--emit-gamma", help="CSV of Gamma^c_ab at grid cell centers")
    c.add_argument("--gamma-grid", default="5")
    c.set_defaults(func=cmd_connect)

    g = sub.add_parser("geodesic", help="integrate an A-path geodesic")
    g.add_argument("path")
    g.add_argument("--connection", default="zero", help="zero, file, or a construction method")
    g.add_argument("--start", required=True, help="comma-separated base point")
    g.add_argument("--alpha", required=True, help="comma-separated initial fiber vector")
    g.add_argument("--force", default="none", help="comma-separated force expressions or none")
    g.add_argument("--force-mode", choices=("general", "particle"), default="general")
    g.add_argument("--t", type=float, default=1.0)
    g.add_argument("--dt", type=float, default=0.01)
    g.add_argument("--out", help="CSV trajectory")
    g.set_defaults(func=cmd_geodesic)

    pr = sub.add_parser("preset", help="write a preset model file")
    pr.add_argument("name", nargs="?")
    pr.add_argument("--param", action="append", metavar="KEY=VALUE")
    pr.add_argument("--emit", help="output TOML path (stdout if omitted)")
    pr.add_argument("--list", action="store_true", help="list preset names")
    pr.set_defaults(func=cmd_preset)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except IntegrationError as exc:
        log.error("integration failed: %s", exc)
        return EXIT_INTEGRATION
    except (ModelFileError, ModelError, FieldError, PreconditionError, UsageError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
