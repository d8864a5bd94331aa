"""Connections on a frame: tensors, Bianchi identities and constructive solvers.

Coefficients are stored as ``G[c, a, b] = Gamma^c_ab`` with
``nabla_{e_a} e_b = Gamma^c_ab e_c``. Solver-built connections are evaluated
pointwise by running their linear algebra over jets, so they can be
differentiated twice wherever the kernel rank of the metric is constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .algebroid import (
    AlgebroidModel,
    ModelError,
    PreconditionError,
    Section,
    build_model,
    dual_form_jet,
    frame_bracket,
    is_stationary,
    projector,
)
from .fields import Program, as_field
from .jets import Jet, RANK_RTOL, along, contract, inv, min_norm_solve, pinv_solve

SOLVE_RESID_TOL = 1e-8
MAX_GAMMA_ORDER = 2


class InconsistentSystemError(ModelError):
    def __init__(self, method, residual, x):
        self.method = method
        self.residual = residual
        self.point = np.asarray(x, dtype=float).tolist()
        super().__init__(f"{method}: least-squares residual {residual:.3g} above {SOLVE_RESID_TOL} at {self.point}")


# ---------------------------------------------------------------------------
# connection types
# ---------------------------------------------------------------------------


class ConnectionField:
    """Base class. ``evaluate`` returns the jet of G[c, a, b] at x."""

    label = "connection"

    def evaluate(self, model, x, order=0):  # pragma: no cover - interface
        raise NotImplementedError

    def values(self, model, x):
        return self.evaluate(model, x, 0).value

    def plus(self, other):
        return SumConnection(self, other)


@dataclass
class ZeroConnection(ConnectionField):
    label = "zero"

    def evaluate(self, model, x, order=0):
        k = model.rank
        return Jet.zeros((k, k, k), model.n, order)


@dataclass
class ExprConnection(ConnectionField):
    """Coefficients given as fields; ``entries`` maps (c, a, b) -> field."""

    entries: dict
    rank: int
    label: str = "expr"

    @classmethod
    def build(cls, model, entries, label="expr"):
        items = entries.items() if isinstance(entries, dict) else ((t[:3], t[3]) for t in entries)
        store = {}
        k = model.rank
        for (c, a, b), expr in items:
            if not all(0 <= i < k for i in (c, a, b)):
                raise ModelError(f"connection index ({c}, {a}, {b}) out of range for rank {k}")
            f = as_field(expr, model.chart)
            if not f.is_zero:
                store[(int(c), int(a), int(b))] = f
        return cls(store, k, label)

    @classmethod
    def from_array(cls, model, G, label="array"):
        G = np.asarray(G, dtype=float)
        entries = {idx: float(G[idx]) for idx in np.ndindex(G.shape) if G[idx] != 0.0}
        return cls.build(model, entries, label)

    @cached_property
    def _keys(self):
        return sorted(self.entries)

    def _program(self, chart):
        cache = self.__dict__.setdefault("_programs", {})
        key = chart.coord_names
        if key not in cache:
            cache[key] = Program([self.entries[k] for k in self._keys], chart) if self._keys else None
        return cache[key]

    def evaluate(self, model, x, order=0):
        k, n = model.rank, model.n
        if k != self.rank:
            raise ModelError(f"connection has rank {self.rank}, model has rank {k}")
        prog = self._program(model.chart)
        out = Jet.zeros((k, k, k), n, order)
        if prog is None:
            return out
        x = np.asarray(x, dtype=float).reshape(-1)
        parts = [prog.values(x)] if order == 0 else prog.jets(x, order)
        idx = tuple(np.array(v) for v in zip(*self._keys))
        for j, p in enumerate(parts):
            out.parts[j][idx] = p
        return out


@dataclass
class SumConnection(ConnectionField):
    first: ConnectionField
    second: ConnectionField

    @property
    def label(self):
        return f"{self.first.label}+{self.second.label}"

    def evaluate(self, model, x, order=0):
        return self.first.evaluate(model, x, order) + self.second.evaluate(model, x, order)


@dataclass
class SolvedConnection(ConnectionField):
    """Gamma = solver(frame jets, base jets), evaluated lazily at each point."""

    base: ConnectionField
    method: str
    stage: object  # callable(frame, G0, x) -> Gamma jet
    gauge: str = "minimum-norm least squares, SVD cutoff 1e-10 relative; omega = sigma/|sigma|^2"

    @property
    def label(self):
        return self.method

    def evaluate(self, model, x, order=0):
        if order > MAX_GAMMA_ORDER:
            raise ValueError(f"solver connections support jet order <= {MAX_GAMMA_ORDER}")
        x = np.asarray(x, dtype=float).reshape(-1)
        F = model.frame(x, order + 1)
        G0 = self.base.evaluate(model, x, order)
        return self.stage(F, G0, x)

    def correction(self, model, x):
        """Gamma_A = Gamma - Gamma0 at x."""
        return self.values(model, x) - self.base.values(model, x)


@dataclass
class Infeasible:
    method: str
    stationarity_residual: float
    equation_residual: float
    stationary: bool
    point: list = field(default_factory=list)

    def __bool__(self):
        return False

    def to_dict(self):
        return {
            "method": self.method,
            "infeasible": True,
            "stationarity_residual": self.stationarity_residual,
            "equation_residual": self.equation_residual,
            "is_stationary": bool(self.stationary),
            "point": self.point,
        }


# ---------------------------------------------------------------------------
# tensors
# ---------------------------------------------------------------------------


def _nabla_sigma(F, G):
    """D[a, c] = (nabla_{e_a} sigma)^c."""
    return along(F.rho, F.sigma) + contract("cab,b->ac", G, F.sigma)


def _torsion(F, G):
    return G - G.lin("cab->cba") - F.C


def _curvature(F, G):
    dG = along(F.rho, G)  # [a, d, b, c] = rho_a(G^d_bc)
    R = dG.lin("adbc->dcab") - dG.lin("bdac->dcab")
    R = R + contract("ebc,dae->dcab", G, G) - contract("eac,dbe->dcab", G, G)
    return R - contract("eab,dec->dcab", F.C, G)


def _nonmetricity(F, G):
    dg = along(F.rho, F.g)  # [a, b, c]
    return dg - contract("dab,dc->abc", G, F.g) - contract("dac,bd->abc", G, F.g)


def _point(model, x):
    return model.chart.check_point(x)


def covariant_derivative(model, G, u, v, x):
    x = _point(model, x)
    F = model.frame(x, 1)
    Gv = G.values(model, x)
    uj = u.jet(x, 0).value
    vj = v.jet(x, 1)
    dv = along(F.rho, vj).value  # [a, c]
    return np.einsum("a,ac->c", uj, dv) + np.einsum("a,cab,b->c", uj, Gv, vj.value)


def torsion(model, G, x):
    x = _point(model, x)
    return _torsion(model.frame(x, 0), G.evaluate(model, x, 0)).value


def curvature(model, G, x):
    x = _point(model, x)
    return _curvature(model.frame(x, 1), G.evaluate(model, x, 1)).value


def nonmetricity(model, G, x):
    x = _point(model, x)
    return _nonmetricity(model.frame(x, 1), G.evaluate(model, x, 0)).value


def nabla_sigma(model, G, x):
    x = _point(model, x)
    model.require_kernel()
    return _nabla_sigma(model.frame(x, 1), G.evaluate(model, x, 0)).value


def bianchi_tensors(model, G, x):
    """Cyclic sums of the algebraic and differential Bianchi identities."""
    x = _point(model, x)
    F = model.frame(x, 2)
    Gj = G.evaluate(model, x, 2)
    T = _torsion(F, Gj).truncate(1)
    R = _curvature(F, Gj).truncate(1)
    g = Gj.value
    Tv, Rv = T.value, R.value
    dT = along(F.rho, T).value  # [a, d, b, c]
    DT = (
        dT
        + np.einsum("dae,ebc->adbc", g, Tv)
        - np.einsum("eab,dec->adbc", g, Tv)
        - np.einsum("eac,dbe->adbc", g, Tv)
    )
    X = np.einsum("dcab->dabc", Rv) - np.einsum("adbc->dabc", DT) - np.einsum("eab,dec->dabc", Tv, Tv)
    alg = X + np.einsum("dbca->dabc", X) + np.einsum("dcab->dabc", X)
    dR = along(F.rho, R).value  # [a, d, f, b, c]
    DR = (
        dR
        + np.einsum("dae,efbc->adfbc", g, Rv)
        - np.einsum("eaf,debc->adfbc", g, Rv)
        - np.einsum("eab,dfec->adfbc", g, Rv)
        - np.einsum("eac,dfbe->adfbc", g, Rv)
    )
    Y = np.einsum("adfbc->dfabc", DR) + np.einsum("eab,dfec->dfabc", Tv, Rv)
    diff = Y + np.einsum("dfbca->dfabc", Y) + np.einsum("dfcab->dfabc", Y)
    return alg, diff


def bianchi_residuals(model, G, x):
    alg, diff = bianchi_tensors(model, G, x)
    return float(np.max(np.abs(alg))), float(np.max(np.abs(diff)))


@dataclass
class CompatResult:
    passed: bool
    residual: float

    def __bool__(self):
        return self.passed


def l_compat_residual_at(model, G, x):
    D = nabla_sigma(model, G, x)
    P = projector(model.values(x)[1])
    return float(np.max(np.linalg.norm(D @ P.T, axis=1))) if D.size else 0.0


def is_L_compatible(model, G, samples=64, seed=0, tol=1e-9):
    res = 0.0
    for x in model.chart.halton(samples, seed):
        res = max(res, l_compat_residual_at(model, G, x))
    return CompatResult(res <= tol, res)


def max_residuals(model, G, samples=64, seed=0):
    """Largest non-metricity, |nabla sigma|, L-compatibility and torsion over samples."""
    out = {"nonmetricity": 0.0, "nabla_sigma": 0.0, "l_compat": 0.0, "torsion": 0.0}
    for x in model.chart.halton(samples, seed):
        F = model.frame(x, 1)
        Gj = G.evaluate(model, x, 0)
        out["nonmetricity"] = max(out["nonmetricity"], float(np.max(np.abs(_nonmetricity(F, Gj).value))))
        out["torsion"] = max(out["torsion"], float(np.max(np.abs(_torsion(F, Gj).value))))
        if model.has_kernel:
            D = _nabla_sigma(F, Gj).value
            P = projector(F.sigma.value)
            out["nabla_sigma"] = max(out["nabla_sigma"], float(np.max(np.abs(D))))
            out["l_compat"] = max(out["l_compat"], float(np.max(np.linalg.norm(D @ P.T, axis=1))))
    return out


def curvature_preserves_L_residual(model, G, samples=64, seed=0, tol=1e-9):
    compat = is_L_compatible(model, G, samples, seed, tol)
    if not compat:
        raise PreconditionError("L-compatible", f"residual {compat.residual:.3g}")
    res = 0.0
    for x in model.chart.halton(samples, seed):
        R = curvature(model, G, x)
        s = model.values(x)[1]
        Rs = np.einsum("dcab,c->abd", R, s) @ projector(s).T
        res = max(res, float(np.max(np.linalg.norm(Rs, axis=-1))))
    return res


def torsion_on_L_residual(model, G, f, x):
    """|(I - sigma omega) T(sigma, f sigma)| through the section-level formulas."""
    sig = Section(tuple(model.sigma), model.chart)
    fsig = sig.scaled(f)
    x = _point(model, x)
    F = model.frame(x, 1)
    T = (
        covariant_derivative(model, G, sig, fsig, x)
        - covariant_derivative(model, G, fsig, sig, x)
        - frame_bracket(F, sig.jet(x, 1), fsig.jet(x, 1)).value
    )
    return float(np.linalg.norm(projector(F.sigma.value) @ T))


# ---------------------------------------------------------------------------
# linear systems
# ---------------------------------------------------------------------------


def _upper_pairs(k):
    return [(b, c) for b in range(k) for c in range(b, k)]


def _metric_selector(k):
    """M[r, s, p, q]: row r = (b <= c), unknown s = (d, e) of Gamma_A^d_{a e}.

    Row (b, c) reads g_dc X^d_b + g_bd X^d_c, which is the same for every a.
    """
    pairs = _upper_pairs(k)
    M = np.zeros((len(pairs), k * k, k, k))
    for r, (b, c) in enumerate(pairs):
        for d in range(k):
            M[r, d * k + b, d, c] += 1.0
            M[r, d * k + c, b, d] += 1.0
    return M


def _sigma_selector(k):
    """S[r, s, e]: row r = c, reads X^c_e sigma^e."""
    S = np.zeros((k, k * k, k))
    for c in range(k):
        for e in range(k):
            S[c, c * k + e, e] = 1.0
    return S


def metric_system(F, G0):
    """(A, B) with A (rows, k^2) shared by every a and B[rows, a] = N0[a, b, c]."""
    k = G0.shape[0]
    A = contract("rspq,pq->rs", _metric_selector(k), F.g)
    N0 = _nonmetricity(F, G0)
    pairs = _upper_pairs(k)
    bi = np.array([p[0] for p in pairs])
    ci = np.array([p[1] for p in pairs])
    B = Jet([np.moveaxis(p[:, bi, ci], 0, 1) for p in N0.parts], F.rho.n)
    return A, B


def _solve(A, B, order, method, x):
    if order == 0:
        X, resid = pinv_solve(A.value, B.value)
        out = Jet([X], A.n)
    else:
        out, resid = min_norm_solve(A, B)
    if resid > SOLVE_RESID_TOL:
        raise InconsistentSystemError(method, resid, x)
    return out


def _unflatten(X, k):
    """X[(d, e), a] -> Gamma_A[d, a, e]."""
    return X.reshape(k, k, k).lin("dea->dae")


def _stage_l_compat(F, G0, x):
    D = _nabla_sigma(F, G0)  # [a, c]
    omega = dual_form_jet(F.sigma)
    return G0 - contract("ac,b->cab", D, omega)


def _stage_metric(F, G0, x):
    k = G0.shape[0]
    A, B = metric_system(F, G0)
    X = _solve(A, B, G0.order, "metric-compatible", x)
    return G0 + _unflatten(X, k)


def _stage_frame_parallel(F, G1, x):
    k = G1.shape[0]
    A, B = metric_system(F, G1)
    S = contract("rse,e->rs", _sigma_selector(k), F.sigma)
    A = _vstack(A, S)
    B = _vstack(B, Jet.zeros((k, k), G1.n, B.order))
    X = _solve(A, B, G1.order, "frame-parallel", x)
    return G1 + _unflatten(X, k)


def _vstack(P, Q):
    m = min(P.order, Q.order)
    return Jet([np.concatenate([p, q], axis=0) for p, q in zip(P.parts[: m + 1], Q.parts[: m + 1])], P.n)


def torsion_free_system(F, G0):
    """Stacked metric and torsion equations over all k^3 unknowns.

    Unknown index a*k^2 + d*k + e holds Gamma_A^d_{a e}.
    """
    k = G0.shape[0]
    A, B = metric_system(F, G0)
    T0 = _torsion(F, G0)
    rm = A.shape[0]
    tors = [(c, a, b) for c in range(k) for a in range(k) for b in range(a + 1, k)]
    nrows = k * rm + len(tors)
    m = min(A.order, B.order, T0.order)
    n = F.rho.n
    Ap, bp = [], []
    for j in range(m + 1):
        tail = (n,) * j
        M = np.zeros((nrows, k**3) + tail)
        r = np.zeros((nrows,) + tail)
        for a in range(k):
            M[a * rm : (a + 1) * rm, a * k * k : (a + 1) * k * k] = A.parts[j]
            r[a * rm : (a + 1) * rm] = B.parts[j][:, a]
        for q, (c, a, b) in enumerate(tors):
            row = k * rm + q
            if j == 0:
                M[row, a * k * k + c * k + b] = 1.0
                M[row, b * k * k + c * k + a] = -1.0
            r[row] = -T0.parts[j][c, a, b]
        Ap.append(M)
        bp.append(r)
    return Jet(Ap, n), Jet(bp, n)


def _stage_torsion_free(F, G0, x):
    k = G0.shape[0]
    A, b = torsion_free_system(F, G0)
    X = _solve(A, b, G0.order, "torsion-free", x)
    return G0 + X.reshape(k, k, k).lin("ade->dae")


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------


def _base(G0):
    return ZeroConnection() if G0 is None else G0


def make_L_compatible(model, G0=None):
    model.require_kernel()
    return SolvedConnection(_base(G0), "l-compat", _stage_l_compat)


def make_metric_compatible(model, G0=None):
    return SolvedConnection(_base(G0), "metric-compatible", _stage_metric)


def make_carrollian(model, G0=None):
    model.require_kernel()
    conn = make_metric_compatible(model, G0)
    conn.method = "carrollian"
    return conn


def make_frame_parallel_carrollian(model, G0=None):
    model.require_kernel()
    G1 = make_L_compatible(model, G0)
    return SolvedConnection(G1, "frame-parallel", _stage_frame_parallel)


def make_torsion_free_carrollian(model, G0=None, samples=64, seed=0):
    """Torsion-free Carrollian connection, or Infeasible when none exists."""
    conn = SolvedConnection(_base(G0), "torsion-free", _stage_torsion_free)
    worst, where = 0.0, []
    for x in model.chart.halton(samples, seed):
        F = model.frame(x, 1)
        A, b = torsion_free_system(F, conn.base.evaluate(model, x, 0))
        _, resid = pinv_solve(A.value, b.value)
        if resid > worst:
            worst, where = resid, x.tolist()
    if worst > SOLVE_RESID_TOL:
        if model.has_kernel:
            st = is_stationary(model, samples, seed)
            return Infeasible("torsion-free", st.residual, worst, st.passed, where)
        return Infeasible("torsion-free", float("nan"), worst, False, where)
    return conn


def solver_system(conn, model, x):
    """The constraint matrix and right-hand side a solver stage used at x."""
    x = np.asarray(x, dtype=float)
    F = model.frame(x, 1)
    if conn.method == "torsion-free":
        A, b = torsion_free_system(F, conn.base.evaluate(model, x, 0))
        return A.value, b.value
    if conn.method in ("metric-compatible", "carrollian"):
        A, B = metric_system(F, conn.base.evaluate(model, x, 0))
        return A.value, B.value
    if conn.method == "frame-parallel":
        G1 = conn.base.evaluate(model, x, 0)
        A, B = metric_system(F, G1)
        k = model.rank
        S = contract("rse,e->rs", _sigma_selector(k), F.sigma)
        return _vstack(A, S).value, np.concatenate([B.value, np.zeros((k, k))])
    raise ValueError(f"no linear system for method {conn.method!r}")


# ---------------------------------------------------------------------------
# minimal connection on a direct sum
# ---------------------------------------------------------------------------


def direct_sum_block(model, samples=16, seed=0):
    """Size m of the A0 block if the model has direct-sum shape, else raise."""
    n, k = model.n, model.rank
    if not model.has_kernel or k != n + 1:
        raise ModelError("minimal direct-sum connection needs rank = dim M + 1 and a kernel frame")
    for x in model.chart.halton(samples, seed):
        rho, s, C, g = model.values(x)
        ok = (
            np.allclose(rho[:, :n], np.eye(n), atol=0)
            and np.allclose(s, np.eye(k)[-1], atol=0)
            and not np.any(g[-1])
            and not np.any(C[:, :n, :n])
            and not np.any(C[-1])
        )
        if not ok:
            raise ModelError("model is not of direct-sum shape (coordinate frame plus kernel line)")
    return n


def _base_model(model, m):
    chart = model.chart
    anchor = [["1" if i == a else "0" for a in range(m)] for i in range(m)]
    metric = [[model.metric[a][b] for b in range(m)] for a in range(m)]
    return build_model(chart, anchor, {}, metric, None, name=f"{model.name}-base")


@dataclass
class MinimalDirectSumConnection(ConnectionField):
    """Levi-Civita of g0 on A0, the trivial connection on L, and the cross term

    Gamma^d_{sigma b} = 1/2 g0^{dc} rho_sigma(g0)_{cb}.
    """

    block: int
    base_model: AlgebroidModel
    levi_civita: ConnectionField
    label: str = "minimal-direct-sum"
    method: str = "minimal-direct-sum"

    def cross_term(self, model, x, order=0):
        m = self.block
        F = model.frame(x, order + 1)
        g0 = F.g[:m, :m]
        X = F.rho[:, m]
        rg = contract("i,bci->bc", X.truncate(order), Jet(g0.parts[1:], g0.n))
        return contract("dc,cb->db", inv(g0.truncate(order)), rg) * 0.5

    def evaluate(self, model, x, order=0):
        m = self.block
        k = m + 1
        x = np.asarray(x, dtype=float).reshape(-1)
        lc = self.levi_civita.evaluate(self.base_model, x, order)
        hat = self.cross_term(model, x, order)
        parts = []
        for j in range(order + 1):
            p = np.zeros((k, k, k) + (model.n,) * j)
            p[:m, :m, :m] = lc.parts[j]
            p[:m, m, :m] = hat.parts[j]
            parts.append(p)
        return Jet(parts, model.n)


def minimal_direct_sum_connection(model):
    m = direct_sum_block(model)
    base = _base_model(model, m)
    lc = make_torsion_free_carrollian(base, None)
    if isinstance(lc, Infeasible):  # pragma: no cover - g0 is nondegenerate
        raise ModelError("Levi-Civita solve failed on the A0 block")
    return MinimalDirectSumConnection(m, base, lc)


METHODS = {
    "l-compat": make_L_compatible,
    "carrollian": make_carrollian,
    "frame-parallel": make_frame_parallel_carrollian,
    "torsion-free": make_torsion_free_carrollian,
    "minimal-direct-sum": lambda model, G0=None: minimal_direct_sum_connection(model),
}


def connect(model, method, G0=None):
    try:
        builder = METHODS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}") from None
    return builder(model, G0)


__all__ = [
    "ConnectionField",
    "ZeroConnection",
    "ExprConnection",
    "SolvedConnection",
    "MinimalDirectSumConnection",
    "Infeasible",
    "InconsistentSystemError",
    "RANK_RTOL",
    "covariant_derivative",
    "torsion",
    "curvature",
    "nonmetricity",
    "nabla_sigma",
    "bianchi_residuals",
    "is_L_compatible",
    "curvature_preserves_L_residual",
    "make_L_compatible",
    "make_metric_compatible",
    "make_carrollian",
    "make_frame_parallel_carrollian",
    "make_torsion_free_carrollian",
    "minimal_direct_sum_connection",
    "connect",
]
