"""The Carroll distribution c = rho(sigma), its singular set and its leaves."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.optimize import minimize

from . import _pyflow, _tape
from ._accel import USE_NUMBA
from .algebroid import ModelError, projector
from .fields import FieldDomainError, FieldError
from .jets import Jet, contract

POINT = "Point"
LINE = "Line"
CIRCLE = "Circle"
SEGMENT_BOTH = "SegmentBothFrozen"
SEGMENT_FWD = "SegmentOneFrozenForward"
SEGMENT_BWD = "SegmentOneFrozenBackward"
TRUNCATED = "TruncatedByChart"
LEAF_CLASSES = (POINT, LINE, CIRCLE, SEGMENT_BOTH, SEGMENT_FWD, SEGMENT_BWD, TRUNCATED)

EVENT_NAMES = {
    _tape.EV_EXIT: "Exit",
    _tape.EV_FROZEN: "Frozen",
    _tape.EV_PERIODIC: "Periodic",
    _tape.EV_BUDGET: "Budget",
    _tape.EV_UNDERFLOW: "Underflow",
    _tape.EV_ERROR: "Error",
}


class IntegrationError(RuntimeError):
    def __init__(self, message, location=None):
        self.location = None if location is None else np.asarray(location, dtype=float).tolist()
        super().__init__(message if location is None else f"{message} at {self.location}")


def default_eps(model):
    return 1e-6 * model.chart.diagonal if model.n else 1e-6


def carroll_vector(model, x):
    x = model.chart.check_point(x)
    model.require_kernel()
    rho, s, _, _ = model.values(x)
    return rho @ s


def carroll_vectors(model, X):
    """c at many points (rows of X) through the batch kernel."""
    model.require_kernel()
    n, k = model.n, model.rank
    out = model.carroll_program.values_batch(X)
    rho = out[:, : n * k].reshape(len(out), n, k)
    return np.einsum("pia,pa->pi", rho, out[:, n * k :])


def carroll_jet(model, x, order=1):
    n, k = model.n, model.rank
    parts = model.carroll_program.jets(x, order)
    J = Jet(parts, n)
    rho = J[: n * k].reshape(n, k)
    return contract("ia,a->i", rho, J[n * k :])


def singular_scan(model, grid, eps=None):
    """Cells whose center or any corner has |c| < eps, as sorted index tuples."""
    chart = model.chart
    counts = tuple(int(c) for c in (grid if np.ndim(grid) else (grid,) * chart.dim))
    if len(counts) != chart.dim or any(c < 2 for c in counts):
        raise ValueError(f"grid needs {chart.dim} counts, each >= 2")
    eps = default_eps(model) if eps is None else float(eps)
    edges = chart.edges(counts)
    corners = np.stack([m.reshape(-1) for m in np.meshgrid(*edges, indexing="ij")], axis=-1)
    cn = np.linalg.norm(carroll_vectors(model, corners), axis=1).reshape(tuple(c + 1 for c in counts))
    centers = chart.cell_centers(counts).reshape(-1, chart.dim)
    mid = np.linalg.norm(carroll_vectors(model, centers), axis=1).reshape(counts)
    low = mid < eps
    for offs in product((0, 1), repeat=chart.dim):
        sl = tuple(slice(o, o + c) for o, c in zip(offs, counts))
        low |= cn[sl] < eps
    return [tuple(int(i) for i in idx) for idx in np.argwhere(low)]


@dataclass
class LeafParams:
    eps: float | None = None
    return_tol: float = 1e-4
    max_arclength: float | None = None
    dt: float = 1e-3
    tol: float = 1e-9
    max_steps: int = 200_000
    cap: int = 20_000

    def resolved(self, model):
        d = model.chart.diagonal if model.n else 1.0
        return LeafParams(
            eps=default_eps(model) if self.eps is None else float(self.eps),
            return_tol=float(self.return_tol),
            max_arclength=10.0 * d if self.max_arclength is None else float(self.max_arclength),
            dt=float(self.dt),
            tol=float(self.tol),
            max_steps=int(self.max_steps),
            cap=int(self.cap),
        )

    def to_dict(self):
        return {
            "eps": self.eps,
            "return_tol": self.return_tol,
            "max_arclength": self.max_arclength,
            "dt": self.dt,
            "tol": self.tol,
        }


@dataclass
class LeafRecord:
    seed: np.ndarray
    leaf_class: str
    forward_event: str
    backward_event: str
    arclength: float
    polyline: np.ndarray
    period: float = 0.0
    forward_end: np.ndarray | None = None
    backward_end: np.ndarray | None = None
    params: LeafParams = field(default_factory=LeafParams)


def _trace(model, seed, sign, p):
    prog = model.carroll_program
    chart = model.chart
    tracer = _tape.trace_flow if USE_NUMBA else _pyflow.trace_flow
    ev, t, arc, period, poly, npts, status, pc = tracer(
        prog.ops,
        prog.args,
        prog.consts,
        prog.nout,
        model.n,
        model.rank,
        np.ascontiguousarray(seed, dtype=float),
        float(sign),
        chart.lo_array,
        chart.hi_array,
        p.eps,
        p.return_tol,
        p.max_arclength,
        p.dt,
        p.tol,
        p.max_steps,
        p.cap,
    )
    poly = np.array(poly[:npts])
    if ev == _tape.EV_ERROR:
        prog._raise(status, pc, poly[-1] if npts else seed)
    if ev == _tape.EV_UNDERFLOW:
        raise IntegrationError("step-size underflow while tracing leaf", poly[-1] if npts else seed)
    return EVENT_NAMES[ev], float(arc), float(period), poly


def _classify(fw, bw):
    if CIRCLE in (fw, bw) or "Periodic" in (fw, bw):
        return CIRCLE
    if "Budget" in (fw, bw):
        return TRUNCATED
    if fw == "Frozen" and bw == "Frozen":
        return SEGMENT_BOTH
    if fw == "Frozen":
        return SEGMENT_FWD
    if bw == "Frozen":
        return SEGMENT_BWD
    return LINE


def classify_leaf(model, seed, params=None):
    p = (params or LeafParams()).resolved(model)
    seed = model.chart.check_point(seed)
    c0 = carroll_vector(model, seed)
    if np.linalg.norm(c0) < p.eps:
        return LeafRecord(seed, POINT, "None", "None", 0.0, seed[None, :].copy(), params=p)
    fw, arc_f, period, poly_f = _trace(model, seed, 1.0, p)
    if fw == "Periodic":
        return LeafRecord(
            seed, CIRCLE, fw, "Periodic", arc_f, poly_f, period, poly_f[-1].copy(), poly_f[-1].copy(), params=p
        )
    bw, arc_b, period_b, poly_b = _trace(model, seed, -1.0, p)
    poly = np.concatenate([poly_b[::-1], poly_f[1:]])
    return LeafRecord(
        seed,
        _classify(fw, bw),
        fw,
        bw,
        arc_f + arc_b,
        poly,
        period_b if bw == "Periodic" else 0.0,
        poly_f[-1].copy(),
        poly_b[-1].copy(),
        params=p,
    )


@dataclass
class Census:
    grid: tuple
    classes: np.ndarray  # object array of class names, shape grid
    records: list
    counts: dict

    def cells(self, leaf_class):
        return [tuple(int(i) for i in idx) for idx in np.argwhere(self.classes == leaf_class)]


def leaf_census(model, grid, params=None):
    chart = model.chart
    counts = tuple(int(c) for c in (grid if np.ndim(grid) else (grid,) * chart.dim))
    centers = chart.cell_centers(counts).reshape(-1, chart.dim)
    records = [classify_leaf(model, x, params) for x in centers]
    classes = np.array([r.leaf_class for r in records], dtype=object).reshape(counts)
    tally = Counter(r.leaf_class for r in records)
    return Census(counts, classes, records, {name: tally.get(name, 0) for name in LEAF_CLASSES})


@dataclass
class Regularity:
    regular: bool
    min_norm: float
    argmin: np.ndarray
    eps: float

    def __bool__(self):
        return self.regular


def _lattice(chart, per_axis):
    axes = [np.linspace(a, b, per_axis) for a, b in zip(chart.lo, chart.hi)]
    return np.stack([m.reshape(-1) for m in np.meshgrid(*axes, indexing="ij")], axis=-1)


def L_regularity(model, samples=256, seed=0, eps=None, refine=8):
    """Smallest |c| found by quasi-random sampling plus local minimisation.

    Plain sampling almost never lands exactly on a singular hypersurface, so
    the best candidates are polished by bounded minimisation of |c|^2.
    """
    eps = default_eps(model) if eps is None else float(eps)
    chart = model.chart
    if chart.dim == 0:
        c = carroll_vectors(model, np.zeros((1, 0)))
        m = float(np.linalg.norm(c[0])) if c.size else 0.0
        return Regularity(m >= eps, m, np.zeros(0), eps)
    per_axis = max(3, int(round(4096 ** (1.0 / chart.dim))) | 1)
    per_axis = min(per_axis, 65)
    pts = np.concatenate([chart.halton(samples, seed), _lattice(chart, per_axis)])
    norms = np.linalg.norm(carroll_vectors(model, pts), axis=1)
    order = np.argsort(norms, kind="stable")
    best = float(norms[order[0]])
    arg = pts[order[0]].copy()

    def fun(x):
        J = carroll_jet(model, x, 1)
        v = J.value
        return float(v @ v), 2.0 * J.parts[1].T @ v

    bounds = list(zip(chart.lo, chart.hi))
    for i in order[:refine]:
        if best < eps:
            break
        try:
            res = minimize(fun, pts[i], jac=True, method="L-BFGS-B", bounds=bounds, options={"ftol": 1e-30, "gtol": 1e-30})
        except FieldError:
            continue
        val = float(np.sqrt(max(res.fun, 0.0)))
        if val < best:
            best, arg = val, np.asarray(res.x, dtype=float)
    return Regularity(best >= eps, best, arg, eps)


def is_L_regular(model, samples=256, seed=0, eps=None):
    return L_regularity(model, samples, seed, eps).regular


@dataclass
class LPathReport:
    anchor_residual: float
    transverse_residual: float
    leaf_drift: float
    tol: float

    @property
    def is_L_path(self):
        return self.anchor_residual <= self.tol and self.transverse_residual <= self.tol

    def to_dict(self):
        return {
            "anchor_residual": self.anchor_residual,
            "transverse_residual": self.transverse_residual,
            "leaf_drift": self.leaf_drift,
            "tol": self.tol,
            "is_L_path": bool(self.is_L_path),
        }


def distance_to_polyline(points, poly):
    points = np.atleast_2d(points)
    poly = np.atleast_2d(poly)
    if len(poly) == 1:
        return np.linalg.norm(points - poly[0], axis=1)
    a = poly[:-1]
    d = poly[1:] - poly[:-1]
    dd = np.einsum("si,si->s", d, d)
    dd[dd == 0.0] = 1.0
    out = np.empty(len(points))
    for start in range(0, len(points), 512):
        P = points[start : start + 512]
        rel = P[:, None, :] - a[None, :, :]
        s = np.clip(np.einsum("psi,si->ps", rel, d) / dd, 0.0, 1.0)
        diff = rel - s[..., None] * d[None, :, :]
        out[start : start + 512] = np.sqrt(np.min(np.einsum("psi,psi->ps", diff, diff), axis=1))
    return out


def check_L_path(model, trajectory, tol=1e-6, params=None):
    t = np.asarray(trajectory.t, dtype=float)
    gam = np.asarray(trajectory.gamma, dtype=float)
    alpha = np.asarray(trajectory.alpha, dtype=float)
    if len(t) < 3:
        raise ValueError("check_L_path needs at least 3 samples")
    model.require_kernel()
    gdot = np.gradient(gam, t, axis=0, edge_order=2)
    anchor = trans = 0.0
    for x, a, v in zip(gam, alpha, gdot):
        rho, s, _, _ = model.values(x)
        anchor = max(anchor, float(np.max(np.abs(rho @ a - v))) if v.size else 0.0)
        trans = max(trans, float(np.linalg.norm(projector(s) @ a)))
    try:
        leaf = classify_leaf(model, gam[0], params)
        drift = float(np.max(distance_to_polyline(gam, leaf.polyline))) if model.n else 0.0
    except (FieldDomainError, IntegrationError, ModelError):
        drift = float("nan")
    return LPathReport(anchor, trans, drift, tol)
