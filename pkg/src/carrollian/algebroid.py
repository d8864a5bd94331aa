"""Carrollian Lie algebroids in a global frame.

A model is stored through its frame components: the anchor matrix
``rho[i, a]``, structure functions ``C[c, a, b]`` with ``[e_a, e_b] = C^c_ab e_c``,
the degenerate metric ``g[a, b]`` and the kernel frame ``sigma[a]``. Brackets of
general sections follow from the Leibniz rule, so every axiom becomes a finite
tensor identity checked pointwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .fields import Chart, FieldError, Program, ScalarField, as_field
from .jets import Jet, along, contract, inv

KERNEL_RTOL = 1e-10
SIGMA_MIN = 1e-10


class ModelError(ValueError):
    pass


class DegenerateFrameError(ModelError):
    pass


class InconsistentKernelError(ModelError):
    pass


class PreconditionError(ModelError):
    def __init__(self, hypothesis, detail=""):
        self.hypothesis = hypothesis
        msg = f"precondition failed: {hypothesis!r}"
        super().__init__(f"{msg} ({detail})" if detail else msg)


@dataclass
class Frame:
    """Jets of all frame components at one point."""

    rho: Jet
    sigma: Jet
    C: Jet
    g: Jet

    @property
    def order(self):
        return self.rho.order

    @property
    def k(self):
        return self.sigma.shape[0]


@dataclass(eq=False)
class AlgebroidModel:
    chart: Chart
    rank: int
    anchor: tuple  # n x k ScalarFields, anchor[i][a] = rho^i_a
    structure: dict  # (c, a, b) with a < b -> ScalarField
    metric: tuple  # k x k ScalarFields, symmetric by construction
    sigma: tuple  # k ScalarFields; None for a kernel-free test model
    name: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def k(self):
        return self.rank

    @property
    def n(self):
        return self.chart.dim

    @property
    def has_kernel(self):
        return self.sigma is not None

    def require_kernel(self):
        if self.sigma is None:
            raise ModelError(f"model {self.name!r} has no kernel frame sigma")

    @cached_property
    def _layout(self):
        n, k = self.n, self.rank
        fields = [self.anchor[i][a] for i in range(n) for a in range(k)]
        fields += list(self.sigma or ())
        keys = sorted(self.structure)
        fields += [self.structure[key] for key in keys]
        upper = [(a, b) for a in range(k) for b in range(a, k)]
        fields += [self.metric[a][b] for a, b in upper]
        return fields, keys, upper

    @cached_property
    def program(self):
        return Program(self._layout[0], self.chart)

    @cached_property
    def carroll_program(self):
        """Anchor followed by sigma; the layout the leaf tracer expects."""
        return Program(self._layout[0][: (self.n + 1) * self.rank], self.chart)

    def _unpack(self, parts):
        n, k = self.n, self.rank
        _, keys, upper = self._layout
        out = []
        for j, p in enumerate(parts):
            tail = p.shape[1:]
            rho = p[: n * k].reshape((n, k) + tail)
            ks = k if self.sigma is not None else 0
            sig = p[n * k : n * k + ks]
            off = n * k + ks
            C = np.zeros((k, k, k) + tail)
            for q, (c, a, b) in enumerate(keys):
                C[c, a, b] = p[off + q]
                C[c, b, a] = -p[off + q]
            off += len(keys)
            g = np.zeros((k, k) + tail)
            for q, (a, b) in enumerate(upper):
                g[a, b] = p[off + q]
                g[b, a] = p[off + q]
            out.append((rho, sig, C, g))
        frame = Frame(*(Jet([o[m] for o in out], n) for m in range(4)))
        if self.sigma is None:
            frame.sigma = None
        return frame

    def frame(self, x, order=1):
        x = np.asarray(x, dtype=float).reshape(-1)
        if order == 0:
            return self._unpack([self.program.values(x)])
        return self._unpack(self.program.jets(x, order))

    def values(self, x):
        """Plain arrays (rho, sigma, C, g) at x."""
        f = self.frame(x, 0)
        sig = f.sigma.value if f.sigma is not None else None
        return f.rho.value, sig, f.C.value, f.g.value

    def section(self, components):
        return Section.of(self, components)

    def replace(self, **changes):
        kw = dict(
            chart=self.chart,
            rank=self.rank,
            anchor=self.anchor,
            structure=self.structure,
            metric=self.metric,
            sigma=self.sigma,
            name=self.name,
            meta=dict(self.meta),
        )
        raw = {key: changes.pop(key) for key in ("anchor", "structure", "metric", "sigma") if key in changes}
        kw.update(changes)
        if raw:
            merged = {key: raw.get(key, kw[key]) for key in ("anchor", "structure", "metric", "sigma")}
            return build_model(kw["chart"], **merged, name=kw["name"], meta=kw["meta"])
        return AlgebroidModel(**kw)


def build_model(chart, anchor, structure, metric, sigma, name="", meta=None):
    """Assemble a model from expression strings, numbers or fields.

    ``structure`` is a mapping or an iterable of ``(c, a, b, expr)`` with
    0-based indices; entries with ``a > b`` are stored negated, ``a == b``
    is rejected. ``metric`` upper triangle is authoritative.
    """
    n = chart.dim
    if sigma is None:
        # kernel-free (Riemannian) models are accepted for connection tests
        k = len(metric)
    else:
        sigma = tuple(as_field(s, chart) for s in sigma)
        k = len(sigma)
    if k < 1:
        raise ModelError("rank must be at least 1")
    anchor = [list(row) for row in anchor] if n else []
    if len(anchor) != n or any(len(row) != k for row in anchor):
        raise ModelError(f"anchor must be {n} x {k}")
    anchor = tuple(tuple(as_field(v, chart) for v in row) for row in anchor)
    metric = [list(row) for row in metric]
    if len(metric) != k or any(len(row) != k for row in metric):
        raise ModelError(f"metric must be {k} x {k}")
    mfields = [[None] * k for _ in range(k)]
    for a in range(k):
        for b in range(a, k):
            f = as_field(metric[a][b], chart)
            mfields[a][b] = mfields[b][a] = f
    metric = tuple(tuple(row) for row in mfields)
    items = structure.items() if isinstance(structure, dict) else ((t[:3], t[3]) for t in structure)
    store = {}
    for (c, a, b), expr in items:
        c, a, b = int(c), int(a), int(b)
        if not (0 <= a < k and 0 <= b < k and 0 <= c < k):
            raise ModelError(f"structure index ({c}, {a}, {b}) out of range for rank {k}")
        if a == b:
            raise ModelError("structure functions with a == b vanish by antisymmetry")
        f = as_field(expr, chart)
        if a > b:
            a, b, f = b, a, -f
        if f.is_zero:
            continue
        if (c, a, b) in store:
            raise ModelError(f"duplicate structure entry ({c}, {a}, {b})")
        store[(c, a, b)] = f
    return AlgebroidModel(chart, k, anchor, store, metric, sigma, name, dict(meta or {}))


@dataclass(frozen=True)
class Section:
    components: tuple
    chart: Chart

    @classmethod
    def of(cls, model, components):
        comps = tuple(as_field(c, model.chart) for c in components)
        if len(comps) != model.rank:
            raise ModelError(f"section needs {model.rank} components, got {len(comps)}")
        return cls(comps, model.chart)

    @classmethod
    def basis(cls, model, a):
        return cls.of(model, [1.0 if b == a else 0.0 for b in range(model.rank)])

    @cached_property
    def program(self):
        return Program(list(self.components), self.chart)

    def jet(self, x, order=1):
        x = np.asarray(x, dtype=float).reshape(-1)
        if order == 0:
            return Jet([self.program.values(x)], self.chart.dim)
        return Jet(self.program.jets(x, order), self.chart.dim)

    def scaled(self, f):
        f = as_field(f, self.chart)
        return Section(tuple(f * c for c in self.components), self.chart)

    def __len__(self):
        return len(self.components)


@dataclass(frozen=True)
class DualForm:
    components: tuple

    def __call__(self, x):
        return np.array([c(x) for c in self.components])


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    comparison: str = "<="  # value <= threshold passes; ">=" for lower bounds
    detail: str = ""

    @property
    def passed(self):
        if not np.isfinite(self.value):
            return False
        if self.comparison == ">=":
            return self.value >= self.threshold
        return self.value <= self.threshold

    def to_dict(self):
        return {
            "name": self.name,
            "value": float(self.value),
            "threshold": float(self.threshold),
            "comparison": self.comparison,
            "passed": bool(self.passed),
            "detail": self.detail,
        }


@dataclass
class ValidationReport:
    checks: list
    samples: int
    seed: int
    tol: float
    errors: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.errors and all(c.passed for c in self.checks)

    def check(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failed(self):
        return [c.name for c in self.checks if not c.passed]

    def to_dict(self):
        return {
            "passed": bool(self.passed),
            "samples": self.samples,
            "seed": self.seed,
            "tol": self.tol,
            "checks": [c.to_dict() for c in self.checks],
            "errors": list(self.errors),
        }


# ---------------------------------------------------------------------------
# frame-level algebra (shared with connection and dynamics)
# ---------------------------------------------------------------------------


def dual_form_jet(sigma):
    """omega = sigma / |sigma|^2 as a jet."""
    s2 = contract("a,a->", sigma, sigma)
    if float(s2.value) < SIGMA_MIN**2:
        raise DegenerateFrameError(f"|sigma| = {np.sqrt(float(s2.value)):.3g} below {SIGMA_MIN}")
    w = inv(s2.reshape(1, 1)).reshape(())
    return contract(",a->a", w, sigma)


def projector_jet(sigma):
    """Transverse projector P = I - sigma omega^T."""
    omega = dual_form_jet(sigma)
    k = sigma.shape[0]
    return Jet.const(np.eye(k), sigma.n, sigma.order) - contract("c,d->cd", sigma, omega)


def projector(sigma):
    sigma = np.asarray(sigma, dtype=float)
    s2 = float(sigma @ sigma)
    if s2 < SIGMA_MIN**2:
        raise DegenerateFrameError(f"|sigma| = {np.sqrt(s2):.3g} below {SIGMA_MIN}")
    return np.eye(sigma.size) - np.outer(sigma, sigma) / s2


def frame_bracket(F, u, v):
    """Jet of [u, v] for section jets u, v (order drops by one)."""
    Cuv = contract("dab,a->db", F.C, u)
    Cuv = contract("db,b->d", Cuv, v)
    du = along(F.rho, u)  # [a, d] = rho_a(u^d)
    dv = along(F.rho, v)
    return Cuv + contract("a,ad->d", u, dv) - contract("a,ad->d", v, du)


def _point(model, x):
    return model.chart.check_point(x)


def _eval(model, u, x, order):
    return model.frame(x, order), u.jet(x, order)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def bracket_sections(model, u, v, x):
    x = _point(model, x)
    F = model.frame(x, 1)
    return frame_bracket(F, u.jet(x, 1), v.jet(x, 1)).value.copy()


def anchor_of_section(model, u, x):
    x = _point(model, x)
    rho, _, _, _ = model.values(x)
    return rho @ u.jet(x, 0).value


def _jacobi_tensor(F):
    dC = along(F.rho, F.C).value  # [a, d, b, c] = rho_a(C^d_bc)
    C = F.C.value
    term = np.einsum("adbc->dabc", dC) + np.einsum("ebc,dae->dabc", C, C)
    return term + np.einsum("dbca->dabc", term) + np.einsum("dcab->dabc", term)


def _anchor_tensor(F):
    dr = along(F.rho, F.rho).value  # [a, i, b] = rho_a(rho^i_b)
    rho = F.rho.value
    C = F.C.value
    return np.einsum("aib->iab", dr) - np.einsum("bia->iab", dr) - np.einsum("cab,ic->iab", C, rho)


def _maxabs(a):
    return float(np.max(np.abs(a))) if np.size(a) else 0.0


def jacobi_residual(model, x):
    x = _point(model, x)
    return _maxabs(_jacobi_tensor(model.frame(x, 1)))


def anchor_morphism_residual(model, x):
    x = _point(model, x)
    return _maxabs(_anchor_tensor(model.frame(x, 1)))


def kernel_rank_ok(g):
    """Exactly one singular value of g at or below KERNEL_RTOL * largest."""
    s = np.linalg.svd(np.atleast_2d(g), compute_uv=False)
    top = s[0] if s.size else 0.0
    small = int(np.sum(s <= KERNEL_RTOL * top)) if top > 0 else s.size
    return small == 1


def validate(model, samples=128, seed=42, tol=1e-8):
    if samples < 1:
        raise ValueError("samples must be >= 1")
    pts = model.chart.halton(samples, seed)
    jac = anch = gsig = 0.0
    bad_rank = 0
    sig_min = np.inf
    errors = []
    for x in pts:
        try:
            F = model.frame(x, 1)
        except FieldError as exc:
            errors.append(f"at {x.tolist()}: {exc}")
            continue
        jac = max(jac, _maxabs(_jacobi_tensor(F)))
        anch = max(anch, _maxabs(_anchor_tensor(F)))
        g = F.g.value
        s = F.sigma.value if F.sigma is not None else np.zeros(model.rank)
        gsig = max(gsig, _maxabs(g @ s))
        if not kernel_rank_ok(g):
            bad_rank += 1
        sig_min = min(sig_min, float(np.linalg.norm(s)))
    if errors:
        jac = anch = gsig = np.inf
    checks = [
        CheckResult("jacobi", jac, tol),
        CheckResult("anchor_morphism", anch, tol),
        CheckResult("kernel_g_sigma", gsig, tol),
        CheckResult("kernel_rank", float(bad_rank), 0.0, detail="samples where rank(g) != k-1"),
        CheckResult("sigma_nonvanishing", float(sig_min), SIGMA_MIN, ">="),
    ]
    return ValidationReport(checks, samples, seed, tol, errors)


def lie_derivative_metric(model, u, x):
    x = _point(model, x)
    F = model.frame(x, 1)
    uj = u.jet(x, 1)
    uv = uj.value
    dg = along(F.rho, F.g).value  # [a, b, c]
    du = along(F.rho, uj).value  # [b, d] = rho_b(u^d)
    C = F.C.value
    g = F.g.value
    br = np.einsum("a,dab->db", uv, C) - du.T  # [d, b] = [u, e_b]^d
    return np.einsum("a,abc->bc", uv, dg) - np.einsum("dc,db->bc", g, br) - np.einsum("bd,dc->bc", g, br)


@dataclass
class KillingResult:
    passed: bool
    residual: float

    def __bool__(self):
        return self.passed


def is_killing(model, u, samples=64, seed=0, tol=1e-9):
    res = 0.0
    for x in model.chart.halton(samples, seed):
        res = max(res, _maxabs(lie_derivative_metric(model, u, x)))
    return KillingResult(res <= tol, res)


def sigma_section(model):
    return Section(tuple(model.sigma), model.chart)


def is_stationary(model, samples=64, seed=0, tol=1e-9):
    return is_killing(model, sigma_section(model), samples, seed, tol)


@dataclass
class SymmetryResult:
    passed: bool
    killing_residual: float
    l_residual: float

    def __bool__(self):
        return self.passed


def is_infinitesimal_symmetry(model, u, samples=64, seed=0, tol=1e-9):
    kill = is_killing(model, u, samples, seed, tol)
    sig = sigma_section(model)
    lres = 0.0
    for x in model.chart.halton(samples, seed):
        F = model.frame(x, 1)
        b = frame_bracket(F, u.jet(x, 1), sig.jet(x, 1)).value
        lres = max(lres, float(np.linalg.norm(projector(F.sigma.value) @ b)))
    return SymmetryResult(kill.passed and lres <= tol, kill.residual, lres)


def default_dual_form(model, samples=64, seed=0):
    for x in model.chart.halton(samples, seed):
        s = np.array([c(x) for c in model.sigma])
        if np.linalg.norm(s) < SIGMA_MIN:
            raise DegenerateFrameError(f"sigma vanishes at {x.tolist()}")
    norm2 = model.sigma[0] * model.sigma[0]
    for c in model.sigma[1:]:
        norm2 = norm2 + c * c
    return DualForm(tuple(c / norm2 for c in model.sigma))


@dataclass
class QuotientMetric:
    gram: np.ndarray
    det: float
    basis: np.ndarray  # k x (k-1) representatives, orthonormal


def complement_basis(sigma):
    """Orthonormalized k-1 largest columns of I - sigma omega^T."""
    P = projector(sigma)
    k = P.shape[0]
    norms = np.linalg.norm(P, axis=0)
    cols = np.sort(np.argsort(-norms, kind="stable")[: k - 1])
    Q, _ = np.linalg.qr(P[:, cols])
    return Q


def quotient_metric(model, x, basis=None):
    x = _point(model, x)
    _, s, _, g = model.values(x)
    if not kernel_rank_ok(g):
        raise InconsistentKernelError(f"rank of g at {x.tolist()} is not k-1")
    B = complement_basis(s) if basis is None else np.asarray(basis, dtype=float)
    G = B.T @ g @ B
    return QuotientMetric(G, float(np.linalg.det(G)) if G.size else 1.0, B)


def _phi_values(phi, x, k2, k1):
    return np.array([[phi[i][j](x) for j in range(k1)] for i in range(k2)]).reshape(k2, k1)


def verify_morphism(phi, model1, model2, samples=32, seed=0, tol=1e-9):
    """Check that the bundle map phi (k2 x k1 fields) is a Carrollian morphism."""
    if model1.chart.coord_names != model2.chart.coord_names:
        raise ModelError("models must share the chart")
    k1, k2 = model1.rank, model2.rank
    phi = [list(row) for row in phi]
    if len(phi) != k2 or any(len(row) != k1 for row in phi):
        raise ModelError(f"phi must be {k2} x {k1}, got {len(phi)} rows")
    phi = [[as_field(v, model1.chart) for v in row] for row in phi]
    cols = [Section(tuple(phi[i][a] for i in range(k2)), model2.chart) for a in range(k1)]
    hom = anc = iso = ker = 0.0
    for x in model1.chart.halton(samples, seed):
        F1 = model1.frame(x, 0)
        F2 = model2.frame(x, 1)
        P = _phi_values(phi, x, k2, k1)
        cj = [c.jet(x, 1) for c in cols]
        for a in range(k1):
            for b in range(a + 1, k1):
                lhs = P @ F1.C.value[:, a, b]
                rhs = frame_bracket(F2, cj[a], cj[b]).value
                hom = max(hom, _maxabs(lhs - rhs))
        anc = max(anc, _maxabs(F2.rho.value @ P - F1.rho.value))
        iso = max(iso, _maxabs(P.T @ F2.g.value @ P - F1.g.value))
        image = P @ F1.sigma.value
        ker = max(ker, float(np.linalg.norm(projector(F2.sigma.value) @ image)))
        if np.linalg.norm(image) < SIGMA_MIN:
            ker = np.inf
    checks = [
        CheckResult("bracket_homomorphism", hom, tol),
        CheckResult("anchor_compatibility", anc, tol),
        CheckResult("isometry", iso, tol),
        CheckResult("kernel_mapping", ker, tol),
    ]
    return ValidationReport(checks, samples, seed, tol)


def compose_morphisms(psi, phi, chart):
    """psi o phi for field matrices (psi: k3 x k2, phi: k2 x k1)."""
    psi = [[as_field(v, chart) for v in row] for row in psi]
    phi = [[as_field(v, chart) for v in row] for row in phi]
    k2 = len(phi)
    out = []
    for row in psi:
        new = []
        for j in range(len(phi[0])):
            acc = ScalarField.constant(0.0, chart)
            for m in range(k2):
                acc = acc + row[m] * phi[m][j]
            new.append(acc)
        out.append(new)
    return out


def induced_spatial_metric(model, x, samples=64, seed=0, eps=None):
    """Metric on T_xM / C for a transitive, L-regular model of rank dim M."""
    from .distribution import is_L_regular

    x = _point(model, x)
    n, k = model.n, model.rank
    if k < n:
        raise PreconditionError("transitive", f"rank {k} < dim M = {n}")
    if k != n:
        raise PreconditionError("rank A = dim M", f"rank {k}, dim M = {n}")
    rho, s, _, g = model.values(x)
    if np.linalg.matrix_rank(rho) < n:
        raise PreconditionError("transitive", f"anchor not surjective at {x.tolist()}")
    if not is_L_regular(model, samples, seed, eps):
        raise PreconditionError("L-regular")
    c = rho @ s
    # orthonormal complement of c in R^n
    Q, _ = np.linalg.qr(np.column_stack([c / np.linalg.norm(c), np.eye(n)]))
    W = Q[:, 1:n]
    U = np.linalg.lstsq(rho, W, rcond=None)[0]
    return U.T @ g @ U
