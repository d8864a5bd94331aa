"""Leaf tracing for the numpy backend.

Interpreting the tape once per field evaluation dominates the cost of leaf
tracing without numba. Here a tape is translated once into straight-line
Python source for the Carroll field, and the Dormand-Prince tracer runs on
plain float lists. The arithmetic mirrors :func:`_tape.trace_flow` operation
for operation, so both backends produce the same leaves. Any exception or
non-finite intermediate falls back to the tape interpreter, which stays the
authority on error status and location.
"""

import math
from functools import lru_cache

import numpy as np

from . import _tape as T

_UNARY = {
    T.OP_SIN: "_m.sin",
    T.OP_COS: "_m.cos",
    T.OP_TAN: "_m.tan",
    T.OP_EXP: "_m.exp",
    T.OP_LOG: "_m.log",
    T.OP_SQRT: "_m.sqrt",
    T.OP_TANH: "_m.tanh",
}
_BINARY = {T.OP_ADD: "+", T.OP_SUB: "-", T.OP_MUL: "*", T.OP_DIV: "/"}


def _source(ops, args, consts, nout, n, k):
    lines = ["def _field(x, sign):"]
    stack, temps = [], []
    outs = ["0.0"] * nout
    for pc in range(len(ops)):
        op, a = int(ops[pc]), int(args[pc])
        if op == T.OP_CONST:
            stack.append(repr(float(consts[a])))
            continue
        if op == T.OP_VAR:
            stack.append(f"x[{a}]")
            continue
        if op == T.OP_STORE:
            outs[a] = stack.pop()
            continue
        name = f"v{pc}"
        if op in _BINARY:
            v = stack.pop()
            u = stack.pop()
            expr = f"{u} {_BINARY[op]} {v}"
        else:
            u = stack.pop()
            if op == T.OP_NEG:
                expr = f"-{u}"
            elif op == T.OP_POW:
                expr = f"{u} ** {a}"
            else:
                expr = f"{_UNARY[op]}({u})"
        lines.append(f"    {name} = {expr}")
        stack.append(name)
        temps.append(name)
    # any inf or nan among the intermediates makes this probe non-finite
    if temps:
        lines.append(f"    if not _m.isfinite(_m.fsum(({', '.join(temps)},))):")
        lines.append("        raise ArithmeticError")
    comps = []
    for i in range(n):
        s = "0.0"
        for a in range(k):
            s = f"({s} + {outs[i * k + a]} * {outs[n * k + a]})"
        comps.append(f"sign * {s}")
    lines.append(f"    return [{', '.join(comps)}]")
    return "\n".join(lines)


@lru_cache(maxsize=64)
def _compiled(ops_b, args_b, consts_b, nout, n, k):
    ops = np.frombuffer(ops_b, dtype=np.int64)
    args = np.frombuffer(args_b, dtype=np.int64)
    consts = np.frombuffer(consts_b, dtype=float)
    scope = {"_m": math}
    exec(compile(_source(ops, args, consts, nout, n, k), "<carroll-field>", "exec"), scope)
    return scope["_field"]


class _FieldError(Exception):
    def __init__(self, status, pc):
        super().__init__(status, pc)
        self.status = status
        self.pc = pc


def _field_fn(ops, args, consts, nout, n, k, sign):
    fast = _compiled(
        np.ascontiguousarray(ops, dtype=np.int64).tobytes(),
        np.ascontiguousarray(args, dtype=np.int64).tobytes(),
        np.ascontiguousarray(consts, dtype=float).tobytes(),
        int(nout), int(n), int(k),
    )

    def field(x):
        try:
            return fast(x, sign)
        except (ArithmeticError, ValueError):
            c = np.empty(n)
            status, pc = T.carroll_field(ops, args, consts, nout, n, k, np.array(x, dtype=float), sign, c)
            if status != T.ERR_OK:
                raise _FieldError(status, pc) from None
            return c.tolist()

    return field


def _norm(v):
    s = 0.0
    for vi in v:
        s += vi * vi
    return math.sqrt(s)


def _dp_step(f, n, x, h, k1, scale_tol):
    """Return (x_new, f(x_new), error norm); mirrors the numba kernel."""
    r = range(n)
    k2 = f([x[i] + h * (k1[i] / 5.0) for i in r])
    k3 = f([x[i] + h * (3.0 / 40.0 * k1[i] + 9.0 / 40.0 * k2[i]) for i in r])
    k4 = f([x[i] + h * (44.0 / 45.0 * k1[i] - 56.0 / 15.0 * k2[i] + 32.0 / 9.0 * k3[i]) for i in r])
    k5 = f([
        x[i] + h * (
            19372.0 / 6561.0 * k1[i]
            - 25360.0 / 2187.0 * k2[i]
            + 64448.0 / 6561.0 * k3[i]
            - 212.0 / 729.0 * k4[i]
        )
        for i in r
    ])
    k6 = f([
        x[i] + h * (
            9017.0 / 3168.0 * k1[i]
            - 355.0 / 33.0 * k2[i]
            + 46732.0 / 5247.0 * k3[i]
            + 49.0 / 176.0 * k4[i]
            - 5103.0 / 18656.0 * k5[i]
        )
        for i in r
    ])
    xn = [
        x[i] + h * (
            35.0 / 384.0 * k1[i]
            + 500.0 / 1113.0 * k3[i]
            + 125.0 / 192.0 * k4[i]
            - 2187.0 / 6784.0 * k5[i]
            + 11.0 / 84.0 * k6[i]
        )
        for i in r
    ]
    k7 = f(xn)
    err = 0.0
    for i in r:
        e = h * (
            71.0 / 57600.0 * k1[i]
            - 71.0 / 16695.0 * k3[i]
            + 71.0 / 1920.0 * k4[i]
            - 17253.0 / 339200.0 * k5[i]
            + 22.0 / 525.0 * k6[i]
            - 1.0 / 40.0 * k7[i]
        )
        sc = scale_tol * (1.0 + max(abs(x[i]), abs(xn[i])))
        q = abs(e) / sc
        if q > err:
            err = q
    return xn, k7, err


def _inside(x, lo, hi, slack):
    for xi, a, b in zip(x, lo, hi):
        w = slack * (b - a)
        if xi < a - w or xi > b + w:
            return False
    return True


def trace_flow(ops, args, consts, nout, n, k, x0, sign, lo, hi, eps, return_tol,
               max_arc, h0, tol, max_steps, cap):
    """Same contract and event logic as :func:`_tape.trace_flow`."""
    f = _field_fn(ops, args, consts, nout, n, k, float(sign))
    x0 = [float(v) for v in x0]
    lo = [float(v) for v in lo]
    hi = [float(v) for v in hi]
    poly = []

    def done(ev, t, arc, period, status=T.ERR_OK, pc=-1):
        out = np.array(poly, dtype=float).reshape(-1, n) if poly else np.empty((0, n))
        return ev, t, arc, period, out, len(poly), status, pc

    def push(p):
        if len(poly) < cap:
            poly.append(list(p))
        else:
            poly[cap - 1] = list(p)

    def dist2(a, b):
        s = 0.0
        for i in range(n):
            s += (a[i] - b[i]) ** 2
        return s

    t = arc = 0.0
    try:
        W = 10
        diag = 0.0
        for i in range(n):
            diag += (hi[i] - lo[i]) ** 2
        diag = math.sqrt(diag)
        slack = 1e-12
        x = list(x0)
        k1 = f(x)
        poly.append(list(x))
        h = h0
        far = False
        far_thr = 10.0 * return_tol
        gprev = 0.0
        ring_t = [0.0] * W
        ring_x = [[0.0] * n for _ in range(W)]
        ring_x[0] = list(x)
        nacc = 1
        max_disp = 0.02 * diag
        for _ in range(max_steps):
            speed = _norm(k1)
            if speed > 0.0 and h * speed > max_disp:
                h = max_disp / speed
            xn, k7, errn = _dp_step(f, n, x, h, k1, tol)
            if not math.isfinite(errn) or errn > 1.0:
                if math.isfinite(errn):
                    h *= max(0.2, 0.9 * errn ** -0.2)
                else:
                    h *= 0.2
                if h < 1e-14 * (1.0 + abs(t)):
                    return done(T.EV_UNDERFLOW, t, arc, 0.0)
                continue
            if not _inside(xn, lo, hi, slack):
                a_, b_ = 0.0, h
                for _it in range(60):
                    m_ = 0.5 * (a_ + b_)
                    try:
                        xt, _, _ = _dp_step(f, n, x, m_, k1, tol)
                        ok = _inside(xt, lo, hi, slack)
                    except _FieldError:
                        ok = False
                    if ok:
                        a_ = m_
                    else:
                        b_ = m_
                if a_ > 0.0:
                    xt, _, _ = _dp_step(f, n, x, a_, k1, tol)
                    arc += math.sqrt(dist2(xt, x))
                    t += a_
                    push(xt)
                return done(T.EV_EXIT, t, arc, 0.0)
            gnew = 0.0
            dist = 0.0
            for i in range(n):
                gnew += (xn[i] - x0[i]) * k7[i]
                dist += (xn[i] - x0[i]) ** 2
            dist = math.sqrt(dist)
            if far and gprev < 0.0 and gnew >= 0.0:
                a_, b_ = 0.0, h
                for _it in range(60):
                    m_ = 0.5 * (a_ + b_)
                    xt, kt, _ = _dp_step(f, n, x, m_, k1, tol)
                    gm = 0.0
                    for i in range(n):
                        gm += (xt[i] - x0[i]) * kt[i]
                    if gm < 0.0:
                        a_ = m_
                    else:
                        b_ = m_
                tau = 0.5 * (a_ + b_)
                xt, kt, _ = _dp_step(f, n, x, tau, k1, tol)
                if math.sqrt(dist2(xt, x0)) <= return_tol:
                    arc += math.sqrt(dist2(xt, x))
                    if len(poly) < cap:
                        poly.append(list(xt))
                    return done(T.EV_PERIODIC, t + tau, arc, t + tau)
            if dist > far_thr:
                far = True
            arc += math.sqrt(dist2(xn, x))
            t += h
            x = xn
            k1 = k7
            gprev = gnew
            push(x)
            slot = nacc % W
            ring_t[slot] = t
            ring_x[slot] = list(x)
            nacc += 1
            if _norm(k1) < eps and nacc > W:
                old = nacc % W
                dt_w = t - ring_t[old]
                disp = math.sqrt(dist2(x, ring_x[old]))
                if dt_w > 0.0 and disp / dt_w < eps:
                    return done(T.EV_FROZEN, t, arc, 0.0)
            if arc >= max_arc:
                return done(T.EV_BUDGET, t, arc, 0.0)
            if errn == 0.0:
                h *= 5.0
            else:
                h *= min(5.0, 0.9 * errn ** -0.2)
        return done(T.EV_BUDGET, t, arc, 0.0)
    except _FieldError as err:
        return done(T.EV_ERROR, t, arc, 0.0, err.status, err.pc)
