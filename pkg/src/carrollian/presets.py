"""Example models and a seeded random generator.

Every preset is built from expression strings so it can be written to a
model file and reloaded without loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .algebroid import ModelError, build_model
from .fields import Chart, Num, differentiate, format_number, parse_expr, to_text

DEFAULT_BOUND = 2.0


def _coords(n):
    if n == 1:
        return ("x",)
    if n == 2:
        return ("x", "y")
    if n == 3:
        return ("x", "y", "z")
    return tuple(f"x{i + 1}" for i in range(n))


def _split_exprs(X):
    if isinstance(X, str):
        return [s.strip() for s in X.split(",")]
    return [str(s) for s in X]


def _split_matrix(g0):
    if isinstance(g0, str):
        return [_split_exprs(row) for row in g0.split(";")]
    return [[str(v) for v in row] for row in g0]


def _eye_exprs(n, m):
    return [["1" if i == a else "0" for a in range(m)] for i in range(n)]


def _box(names, lo, hi):
    return Chart.box(names, lo, hi)


def flat_carroll(n=3, lo=-DEFAULT_BOUND, hi=DEFAULT_BOUND):
    """Tangent algebroid of flat Carroll space with coordinates (x.., t)."""
    n = int(n)
    if n < 2:
        raise ModelError("flat-carroll needs n >= 2")
    names = _coords(n - 1) + ("t",)
    chart = _box(names, lo, hi)
    metric = [["1" if (a == b and a < n - 1) else "0" for b in range(n)] for a in range(n)]
    sigma = ["1" if a == n - 1 else "0" for a in range(n)]
    return build_model(
        chart,
        _eye_exprs(n, n),
        {},
        metric,
        sigma,
        name="flat-carroll",
        meta={"preset": "flat-carroll", "params": {"n": n}, "notes": "tangent algebroid; g = diag(1,..,1,0); sigma = d/dt"},
    )


def vector_field_line(X=("y", "0"), coords=None, lo=-DEFAULT_BOUND, hi=DEFAULT_BOUND):
    """Trivial line bundle anchored by X with the zero metric and sigma = 1."""
    X = _split_exprs(X)
    names = tuple(coords) if coords else _coords(len(X))
    chart = _box(names, lo, hi)
    return build_model(
        chart,
        [[x] for x in X],
        {},
        [["0"]],
        ["1"],
        name="vector-field-line",
        meta={
            "preset": "vector-field-line",
            "params": {"X": ",".join(X)},
            "notes": "rank 1, bracket psi X(chi) - X(psi) chi, zero metric, sigma = 1",
        },
    )


def rotation(lo=-DEFAULT_BOUND, hi=DEFAULT_BOUND):
    m = vector_field_line(("-y", "x"), lo=lo, hi=hi)
    m.meta["preset"] = "rotation"
    m.name = "rotation"
    return m


def gl2_commutator():
    """C[c, a, b] of gl2 in the basis (E11, E12, E21, E22), [A, B] = AB - BA."""
    E = []
    for i in range(2):
        for j in range(2):
            M = np.zeros((2, 2))
            M[i, j] = 1.0
            E.append(M)
    C = np.zeros((4, 4, 4))
    for a in range(4):
        for b in range(4):
            C[:, a, b] = (E[a] @ E[b] - E[b] @ E[a]).reshape(-1)
    return C


def killing_form(C):
    """tr(ad_a ad_b) with ad_a[c, b] = C[c, a, b]."""
    ad = np.einsum("cab->acb", C)
    return np.einsum("acd,bdc->ab", ad, ad)


def _structure_from_array(C, tol=0.0):
    k = C.shape[0]
    out = {}
    for c in range(k):
        for a in range(k):
            for b in range(a + 1, k):
                if abs(C[c, a, b]) > tol:
                    out[(c, a, b)] = format_number(C[c, a, b])
    return out


def action_gl2(lo=-DEFAULT_BOUND, hi=DEFAULT_BOUND):
    """gl2 acting linearly on the plane, basis (E11, E12, E21, E22).

    The fundamental vector field of A is v -> A v. That assignment reverses
    brackets, so the structure constants are the negated matrix commutator;
    with this sign the anchor is a bracket homomorphism.
    """
    chart = _box(("x", "y"), lo, hi)
    anchor = [["x", "y", "0", "0"], ["0", "0", "x", "y"]]
    structure = _structure_from_array(-gl2_commutator())
    metric = [["0", "0", "0", "0"], ["0", "1", "0", "0"], ["0", "0", "1", "0"], ["0", "0", "0", "1"]]
    return build_model(
        chart,
        anchor,
        structure,
        metric,
        ["1", "0", "0", "0"],
        name="action-gl2",
        meta={
            "preset": "action-gl2",
            "params": {},
            "notes": "action algebroid of gl2 on R^2; C = -(matrix commutator); g = diag(0,1,1,1); sigma = E11",
        },
    )


def lie_algebra_gl2():
    """gl2 over a point with its Killing form, degenerate along the identity."""
    chart = Chart((), (), ())
    C = gl2_commutator()
    K = killing_form(C)
    metric = [[format_number(K[a, b]) for b in range(4)] for a in range(4)]
    return build_model(
        chart,
        [],
        _structure_from_array(C),
        metric,
        ["1", "0", "0", "1"],
        name="lie-algebra-gl2",
        meta={
            "preset": "lie-algebra-gl2",
            "params": {},
            "notes": "gl2 with Killing form 4 tr(XY) - 2 tr X tr Y; kernel spanned by the identity",
        },
    )


def nonstationary_tangent(lo=-DEFAULT_BOUND, hi=DEFAULT_BOUND):
    """Tangent algebroid on (x, t) with g = diag(1 + t^2, 0), sigma = d/dt."""
    chart = _box(("x", "t"), lo, hi)
    return build_model(
        chart,
        _eye_exprs(2, 2),
        {},
        [["1 + t^2", "0"], ["0", "0"]],
        ["0", "1"],
        name="nonstationary-tangent",
        meta={"preset": "nonstationary-tangent", "params": {}, "notes": "L_sigma g = diag(2t, 0)"},
    )


def _direct_sum(chart, g0, X, m, extra, name, meta):
    """A0 (m anchored coordinate directions + `extra` inert ones) plus L.

    The cross structure functions C^j_{i sigma} = d_i X^j make the anchor
    a bracket homomorphism for non-constant X.
    """
    n = chart.dim
    k0 = m + extra
    k = k0 + 1
    Xn = [parse_expr(e, chart) for e in X]
    anchor = [["0"] * k for _ in range(n)]
    for i in range(m):
        anchor[i][i] = "1"
    for i in range(n):
        anchor[i][k - 1] = X[i]
    structure = {}
    for i in range(m):
        for j in range(n):
            d = differentiate(Xn[j], i)
            if not (isinstance(d, Num) and d.value == 0.0):
                if j >= m:
                    raise ModelError("X must lie in the span of the anchored directions")
                structure[(j, i, k - 1)] = to_text(d)
    metric = [["0"] * k for _ in range(k)]
    for a in range(k0):
        for b in range(k0):
            metric[a][b] = g0[a][b]
    sigma = ["0"] * k0 + ["1"]
    return build_model(chart, anchor, structure, metric, sigma, name=name, meta=meta)


def _check_pd(g0, chart, samples=64, seed=0):
    from .fields import parse_field

    fields = [[parse_field(e, chart) for e in row] for row in g0]
    for x in chart.halton(samples, seed):
        G = np.array([[f(x) for f in row] for row in fields])
        if not np.allclose(G, G.T) or np.linalg.eigvalsh(G).min() <= 0.0:
            raise ModelError(f"g0 is not symmetric positive-definite at {x.tolist()}")


def direct_sum(g0=None, X=("y", "0"), coords=None, lo=-DEFAULT_BOUND, hi=DEFAULT_BOUND):
    """Tangent algebroid with metric g0 plus a kernel line anchored by X."""
    X = _split_exprs(X)
    m = len(X)
    g0 = _split_matrix(g0) if g0 is not None else _eye_exprs(m, m)
    if len(g0) != m or any(len(row) != m for row in g0):
        raise ModelError(f"g0 must be {m} x {m}")
    chart = _box(tuple(coords) if coords else _coords(m), lo, hi)
    _check_pd(g0, chart)
    meta = {
        "preset": "direct-sum",
        "params": {"g0": ";".join(",".join(r) for r in g0), "X": ",".join(X)},
        "notes": "A0 = tangent algebroid with g0, L anchored by X; C^j_(i sigma) = d_i X^j",
        "direct_sum_block": m,
    }
    return _direct_sum(chart, g0, X, m, 0, "direct-sum", meta)


def _poly(rng, names, degree=1, scale=0.5):
    terms = [format_number(round(rng.uniform(-scale, scale), 3))]
    for name in names:
        c = round(rng.uniform(-scale, scale), 3)
        terms.append(f"{format_number(c)}*{name}")
        if degree > 1:
            c = round(rng.uniform(-scale, scale), 3)
            terms.append(f"{format_number(c)}*{name}^2")
    return "(" + " + ".join(terms) + ")"


def random_model(k=3, n=2, seed=0, lo=-1.0, hi=1.0):
    """Seeded random model built on the direct-sum pattern.

    m = min(k-1, n) frame directions are anchored to coordinates, the rest of
    A0 is inert, and sigma is anchored to a random polynomial field inside the
    anchored span. The A0 metric is B B^T + I with affine B, so it is
    positive-definite on the whole chart.
    """
    k, n, seed = int(k), int(n), int(seed)
    if k < 2 or n < 1:
        raise ModelError("random preset needs k >= 2 and n >= 1")
    rng = np.random.default_rng(seed)
    chart = _box(_coords(n), lo, hi)
    names = chart.coord_names
    m = min(k - 1, n)
    k0 = k - 1
    X = [_poly(rng, names, degree=2) if i < m else "0" for i in range(n)]
    B = [[_poly(rng, names) for _ in range(k0)] for _ in range(k0)]
    g0 = []
    for a in range(k0):
        row = []
        for b in range(k0):
            s = " + ".join(f"{B[a][q]}*{B[b][q]}" for q in range(k0))
            row.append(f"{s} + 1" if a == b else s)
        g0.append(row)
    meta = {"preset": "random", "params": {"k": k, "n": n, "seed": seed}, "notes": "seeded random direct-sum model"}
    return _direct_sum(chart, g0, X, m, k0 - m, "random", meta)


def poincare_half_plane(lo=(-1.0, 0.5), hi=(1.0, 2.0)):
    """Hyperbolic half-plane as a tangent algebroid; nondegenerate, no kernel."""
    chart = Chart(("x", "y"), lo, hi)
    return build_model(
        chart,
        _eye_exprs(2, 2),
        {},
        [["y^-2", "0"], ["0", "y^-2"]],
        None,
        name="poincare-half-plane",
        meta={"preset": "poincare-half-plane", "params": {}, "notes": "test model, kernel rank 0"},
    )


@dataclass(frozen=True)
class PresetSpec:
    name: str
    builder: object
    params: dict  # name -> converter
    description: str

    def build(self, **raw):
        kwargs = {}
        for key, value in raw.items():
            if key not in self.params:
                raise ModelError(f"preset {self.name!r} has no parameter {key!r}; known: {sorted(self.params)}")
            kwargs[key] = self.params[key](value)
        return self.builder(**kwargs)


_float = float
REGISTRY = {
    spec.name: spec
    for spec in (
        PresetSpec("flat-carroll", flat_carroll, {"n": int, "lo": _float, "hi": _float}, "flat Carroll space"),
        PresetSpec(
            "vector-field-line",
            vector_field_line,
            {"X": _split_exprs, "lo": _float, "hi": _float},
            "line bundle anchored by a vector field X",
        ),
        PresetSpec("rotation", rotation, {"lo": _float, "hi": _float}, "line bundle anchored by -y d/dx + x d/dy"),
        PresetSpec("action-gl2", action_gl2, {"lo": _float, "hi": _float}, "gl2 action algebroid on the plane"),
        PresetSpec("lie-algebra-gl2", lie_algebra_gl2, {}, "gl2 with its Killing form"),
        PresetSpec(
            "direct-sum",
            direct_sum,
            {"g0": _split_matrix, "X": _split_exprs, "lo": _float, "hi": _float},
            "Riemannian tangent algebroid plus an anchored kernel line",
        ),
        PresetSpec(
            "random",
            random_model,
            {"k": int, "n": int, "seed": int, "lo": _float, "hi": _float},
            "seeded random direct-sum model",
        ),
        PresetSpec("nonstationary-tangent", nonstationary_tangent, {"lo": _float, "hi": _float}, "g = diag(1+t^2, 0)"),
    )
}


def names():
    return sorted(REGISTRY)


def make_preset(name, **params):
    try:
        spec = REGISTRY[name]
    except KeyError:
        raise ModelError(f"unknown preset {name!r}; available: {', '.join(names())}") from None
    return spec.build(**params)


def shipped_presets():
    """One default instance of every registered preset."""
    return {name: make_preset(name) for name in names()}
