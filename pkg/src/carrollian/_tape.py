"""Hot kernels: stack-tape evaluation of expression programs and leaf tracing.

A program is a flat instruction tape (``ops``, ``args``) plus a constant pool.
Every ``OP_STORE`` pops the stack top into an output slot, so one tape can
carry many fields. The kernels below are written in the numba-compatible
subset and compiled through :func:`carrollian._accel.jit`; with the flag off
they run as ordinary Python. ``eval_values_batch_np`` is the vectorised numpy
route used for grid scans when numba is disabled.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, jit

OP_CONST = 0
OP_VAR = 1
OP_ADD = 2
OP_SUB = 3
OP_MUL = 4
OP_DIV = 5
OP_NEG = 6
OP_POW = 7
OP_SIN = 8
OP_COS = 9
OP_TAN = 10
OP_EXP = 11
OP_LOG = 12
OP_SQRT = 13
OP_TANH = 14
OP_STORE = 15

ERR_OK = 0
ERR_LOG = 1
ERR_SQRT = 2
ERR_DIV = 3
ERR_POW = 4
ERR_NONFINITE = 5

ERROR_TEXT = {
    ERR_LOG: "log of nonpositive argument",
    ERR_SQRT: "sqrt of negative argument (or zero where derivatives are needed)",
    ERR_DIV: "division by zero",
    ERR_POW: "zero raised to a negative power",
    ERR_NONFINITE: "non-finite value",
}

# flow events
EV_EXIT = 0
EV_FROZEN = 1
EV_PERIODIC = 2
EV_BUDGET = 3
EV_UNDERFLOW = 4
EV_ERROR = 5


@jit
def _pow_coeff(p, j):
    c = 1.0
    for i in range(j):
        c *= p - i
    return c


@jit
def _unary_coeffs(op, p, u, need_deriv):
    """Return (status, f0, f1, f2, f3) for the unary op at u."""
    if op == OP_NEG:
        return ERR_OK, -u, -1.0, 0.0, 0.0
    if op == OP_SIN:
        s = math.sin(u)
        c = math.cos(u)
        return ERR_OK, s, c, -s, -c
    if op == OP_COS:
        s = math.sin(u)
        c = math.cos(u)
        return ERR_OK, c, -s, -c, s
    if op == OP_TAN:
        t = math.tan(u)
        s = 1.0 + t * t
        return ERR_OK, t, s, 2.0 * t * s, s * (2.0 + 6.0 * t * t)
    if op == OP_EXP:
        e = math.exp(u)
        return ERR_OK, e, e, e, e
    if op == OP_LOG:
        if u <= 0.0:
            return ERR_LOG, 0.0, 0.0, 0.0, 0.0
        r = 1.0 / u
        return ERR_OK, math.log(u), r, -r * r, 2.0 * r * r * r
    if op == OP_SQRT:
        if u < 0.0 or (need_deriv and u == 0.0):
            return ERR_SQRT, 0.0, 0.0, 0.0, 0.0
        s = math.sqrt(u)
        if not need_deriv:
            return ERR_OK, s, 0.0, 0.0, 0.0
        return ERR_OK, s, 0.5 / s, -0.25 / (s * u), 0.375 / (s * u * u)
    if op == OP_TANH:
        th = math.tanh(u)
        s = 1.0 - th * th
        return ERR_OK, th, s, -2.0 * th * s, s * (6.0 * th * th - 2.0)
    if op == OP_POW:
        if u == 0.0 and p < 0:
            return ERR_POW, 0.0, 0.0, 0.0, 0.0
        f = np.zeros(4)
        for j in range(4):
            c = _pow_coeff(p, j)
            if c != 0.0:
                f[j] = c * u ** (p - j)
        return ERR_OK, f[0], f[1], f[2], f[3]
    # reciprocal, used by division (op code reused as a private marker)
    if u == 0.0:
        return ERR_DIV, 0.0, 0.0, 0.0, 0.0
    r = 1.0 / u
    return ERR_OK, r, -r * r, 2.0 * r * r * r, -6.0 * r * r * r * r


@jit
def eval_values(ops, args, consts, x, out):
    """Evaluate all outputs of a tape at one point. Returns (status, pc)."""
    stack = np.empty(ops.shape[0] + 1)
    sp = -1
    for pc in range(ops.shape[0]):
        op = ops[pc]
        a = args[pc]
        if op == OP_CONST:
            sp += 1
            stack[sp] = consts[a]
            continue
        if op == OP_VAR:
            sp += 1
            stack[sp] = x[a]
            continue
        if op == OP_STORE:
            out[a] = stack[sp]
            sp -= 1
            continue
        if op == OP_ADD or op == OP_SUB or op == OP_MUL or op == OP_DIV:
            v = stack[sp]
            sp -= 1
            u = stack[sp]
            if op == OP_ADD:
                r = u + v
            elif op == OP_SUB:
                r = u - v
            elif op == OP_MUL:
                r = u * v
            else:
                if v == 0.0:
                    return ERR_DIV, pc
                r = u / v
        else:
            status, r, f1, f2, f3 = _unary_coeffs(op, a, stack[sp], False)
            if status != ERR_OK:
                return status, pc
        if not math.isfinite(r):
            return ERR_NONFINITE, pc
        stack[sp] = r
    return ERR_OK, -1


@jit
def _apply_unary(V, G, H, T, s, n, order, f0, f1, f2, f3):
    if order >= 3:
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    T[s, i, j, k] = (
                        f1 * T[s, i, j, k]
                        + f2 * (H[s, i, j] * G[s, k] + H[s, i, k] * G[s, j] + H[s, j, k] * G[s, i])
                        + f3 * G[s, i] * G[s, j] * G[s, k]
                    )
    if order >= 2:
        for i in range(n):
            for j in range(n):
                H[s, i, j] = f1 * H[s, i, j] + f2 * G[s, i] * G[s, j]
    if order >= 1:
        for i in range(n):
            G[s, i] = f1 * G[s, i]
    V[s] = f0


@jit
def _apply_mul(V, G, H, T, u, v, n, order):
    if order >= 3:
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    T[u, i, j, k] = (
                        T[u, i, j, k] * V[v]
                        + V[u] * T[v, i, j, k]
                        + H[u, i, j] * G[v, k]
                        + H[u, i, k] * G[v, j]
                        + H[u, j, k] * G[v, i]
                        + G[u, i] * H[v, j, k]
                        + G[u, j] * H[v, i, k]
                        + G[u, k] * H[v, i, j]
                    )
    if order >= 2:
        for i in range(n):
            for j in range(n):
                H[u, i, j] = (
                    H[u, i, j] * V[v] + V[u] * H[v, i, j] + G[u, i] * G[v, j] + G[u, j] * G[v, i]
                )
    if order >= 1:
        for i in range(n):
            G[u, i] = G[u, i] * V[v] + V[u] * G[v, i]
    V[u] = V[u] * V[v]


@jit
def eval_jets(ops, args, consts, n, order, x, ov, og, oh, ot):
    """Truncated Taylor evaluation (order <= 3) of every tape output at x.

    ``og``, ``oh``, ``ot`` receive gradients, Hessians and third-derivative
    tensors; parts above ``order`` are left untouched.
    Returns (status, pc).
    """
    S = ops.shape[0] + 1
    V = np.zeros(S)
    G = np.zeros((S, n))
    H = np.zeros((S, n, n))
    if order >= 3:
        T = np.zeros((S, n, n, n))
    else:
        T = np.zeros((S, 0, 0, 0))
    sp = -1
    for pc in range(ops.shape[0]):
        op = ops[pc]
        a = args[pc]
        if op == OP_CONST or op == OP_VAR:
            sp += 1
            if order >= 1:
                G[sp, :] = 0.0
            if order >= 2:
                H[sp, :, :] = 0.0
            if order >= 3:
                T[sp, :, :, :] = 0.0
            if op == OP_CONST:
                V[sp] = consts[a]
            else:
                V[sp] = x[a]
                if order >= 1:
                    G[sp, a] = 1.0
            continue
        if op == OP_STORE:
            ov[a] = V[sp]
            if order >= 1:
                og[a, :] = G[sp, :]
            if order >= 2:
                oh[a, :, :] = H[sp, :, :]
            if order >= 3:
                ot[a, :, :, :] = T[sp, :, :, :]
            sp -= 1
            continue
        if op == OP_ADD or op == OP_SUB:
            sgn = 1.0 if op == OP_ADD else -1.0
            u = sp - 1
            V[u] += sgn * V[sp]
            if order >= 1:
                G[u, :] += sgn * G[sp, :]
            if order >= 2:
                H[u, :, :] += sgn * H[sp, :, :]
            if order >= 3:
                T[u, :, :, :] += sgn * T[sp, :, :, :]
            sp -= 1
        elif op == OP_MUL or op == OP_DIV:
            if op == OP_DIV:
                status, f0, f1, f2, f3 = _unary_coeffs(-1, 0, V[sp], order >= 1)
                if status != ERR_OK:
                    return status, pc
                _apply_unary(V, G, H, T, sp, n, order, f0, f1, f2, f3)
            _apply_mul(V, G, H, T, sp - 1, sp, n, order)
            sp -= 1
        else:
            status, f0, f1, f2, f3 = _unary_coeffs(op, a, V[sp], order >= 1)
            if status != ERR_OK:
                return status, pc
            _apply_unary(V, G, H, T, sp, n, order, f0, f1, f2, f3)
        if not math.isfinite(V[sp]):
            return ERR_NONFINITE, pc
    return ERR_OK, -1


@jit
def eval_values_batch(ops, args, consts, nout, X, out):
    """Row-wise :func:`eval_values`; returns (status, pc, failing row)."""
    buf = np.empty(nout)
    for r in range(X.shape[0]):
        status, pc = eval_values(ops, args, consts, X[r], buf)
        if status != ERR_OK:
            return status, pc, r
        out[r, :] = buf
    return ERR_OK, -1, -1


def eval_values_batch_np(ops, args, consts, nout, X, out):
    """Vectorised numpy twin of :func:`eval_values_batch`."""
    m = X.shape[0]
    stack = []
    with np.errstate(all="ignore"):
        for pc in range(ops.shape[0]):
            op = int(ops[pc])
            a = int(args[pc])
            if op == OP_CONST:
                stack.append(np.full(m, consts[a]))
                continue
            if op == OP_VAR:
                stack.append(X[:, a].astype(float))
                continue
            if op == OP_STORE:
                out[:, a] = stack.pop()
                continue
            bad = None
            if op in (OP_ADD, OP_SUB, OP_MUL, OP_DIV):
                v = stack.pop()
                u = stack.pop()
                if op == OP_ADD:
                    r = u + v
                elif op == OP_SUB:
                    r = u - v
                elif op == OP_MUL:
                    r = u * v
                else:
                    bad = (v == 0.0, ERR_DIV)
                    r = u / v
            else:
                u = stack.pop()
                if op == OP_NEG:
                    r = -u
                elif op == OP_POW:
                    if a < 0:
                        bad = (u == 0.0, ERR_POW)
                    r = u ** float(a)
                elif op == OP_SIN:
                    r = np.sin(u)
                elif op == OP_COS:
                    r = np.cos(u)
                elif op == OP_TAN:
                    r = np.tan(u)
                elif op == OP_EXP:
                    r = np.exp(u)
                elif op == OP_LOG:
                    bad = (u <= 0.0, ERR_LOG)
                    r = np.log(u)
                elif op == OP_SQRT:
                    bad = (u < 0.0, ERR_SQRT)
                    r = np.sqrt(u)
                else:
                    r = np.tanh(u)
            if bad is not None and bad[0].any():
                return bad[1], pc, int(np.argmax(bad[0]))
            notfinite = ~np.isfinite(r)
            if notfinite.any():
                return ERR_NONFINITE, pc, int(np.argmax(notfinite))
            stack.append(r)
    return ERR_OK, -1, -1


# ---------------------------------------------------------------------------
# leaf tracing: Dormand-Prince 5(4) on the Carroll field c = sign * rho . sigma
# ---------------------------------------------------------------------------


@jit
def carroll_field(ops, args, consts, nout, n, k, x, sign, c):
    buf = np.empty(nout)
    status, pc = eval_values(ops, args, consts, x, buf)
    if status != ERR_OK:
        return status, pc
    for i in range(n):
        s = 0.0
        for a in range(k):
            s += buf[i * k + a] * buf[n * k + a]
        c[i] = sign * s
    return ERR_OK, -1


@jit
def _norm(v):
    s = 0.0
    for i in range(v.shape[0]):
        s += v[i] * v[i]
    return math.sqrt(s)


@jit
def _dp_step(ops, args, consts, nout, n, k, sign, x, h, k1, xn, k7, scale_tol):
    """One Dormand-Prince step from x with size h (k1 = f(x) given).

    Writes the 5th-order result to xn and f(xn) to k7. Returns
    (status, pc, error norm).
    """
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    k5 = np.empty(n)
    k6 = np.empty(n)
    y = np.empty(n)
    for i in range(n):
        y[i] = x[i] + h * (k1[i] / 5.0)
    st, pc = carroll_field(ops, args, consts, nout, n, k, y, sign, k2)
    if st != ERR_OK:
        return st, pc, 0.0
    for i in range(n):
        y[i] = x[i] + h * (3.0 / 40.0 * k1[i] + 9.0 / 40.0 * k2[i])
    st, pc = carroll_field(ops, args, consts, nout, n, k, y, sign, k3)
    if st != ERR_OK:
        return st, pc, 0.0
    for i in range(n):
        y[i] = x[i] + h * (44.0 / 45.0 * k1[i] - 56.0 / 15.0 * k2[i] + 32.0 / 9.0 * k3[i])
    st, pc = carroll_field(ops, args, consts, nout, n, k, y, sign, k4)
    if st != ERR_OK:
        return st, pc, 0.0
    for i in range(n):
        y[i] = x[i] + h * (
            19372.0 / 6561.0 * k1[i]
            - 25360.0 / 2187.0 * k2[i]
            + 64448.0 / 6561.0 * k3[i]
            - 212.0 / 729.0 * k4[i]
        )
    st, pc = carroll_field(ops, args, consts, nout, n, k, y, sign, k5)
    if st != ERR_OK:
        return st, pc, 0.0
    for i in range(n):
        y[i] = x[i] + h * (
            9017.0 / 3168.0 * k1[i]
            - 355.0 / 33.0 * k2[i]
            + 46732.0 / 5247.0 * k3[i]
            + 49.0 / 176.0 * k4[i]
            - 5103.0 / 18656.0 * k5[i]
        )
    st, pc = carroll_field(ops, args, consts, nout, n, k, y, sign, k6)
    if st != ERR_OK:
        return st, pc, 0.0
    for i in range(n):
        xn[i] = x[i] + h * (
            35.0 / 384.0 * k1[i]
            + 500.0 / 1113.0 * k3[i]
            + 125.0 / 192.0 * k4[i]
            - 2187.0 / 6784.0 * k5[i]
            + 11.0 / 84.0 * k6[i]
        )
    st, pc = carroll_field(ops, args, consts, nout, n, k, xn, sign, k7)
    if st != ERR_OK:
        return st, pc, 0.0
    err = 0.0
    for i in range(n):
        e = h * (
            71.0 / 57600.0 * k1[i]
            - 71.0 / 16695.0 * k3[i]
            + 71.0 / 1920.0 * k4[i]
            - 17253.0 / 339200.0 * k5[i]
            + 22.0 / 525.0 * k6[i]
            - 1.0 / 40.0 * k7[i]
        )
        sc = scale_tol * (1.0 + max(abs(x[i]), abs(xn[i])))
        r = abs(e) / sc
        if r > err:
            err = r
    return ERR_OK, -1, err


@jit
def _inside(x, lo, hi, slack):
    for i in range(x.shape[0]):
        w = slack * (hi[i] - lo[i])
        if x[i] < lo[i] - w or x[i] > hi[i] + w:
            return False
    return True


@jit
def trace_flow(ops, args, consts, nout, n, k, x0, sign, lo, hi, eps, return_tol,
               max_arc, h0, tol, max_steps, cap):
    """Integrate x' = sign * c(x) from x0 until a terminal event.

    Returns (event, t, arclength, period, polyline, npts, status, pc).
    Events: exit, frozen (|c| < eps and trailing-window speed < eps),
    periodic (closest return within return_tol), budget, underflow.
    """
    W = 10
    diag = 0.0
    for i in range(n):
        diag += (hi[i] - lo[i]) ** 2
    diag = math.sqrt(diag)
    slack = 1e-12
    poly = np.empty((cap, n))
    x = x0.copy()
    xn = np.empty(n)
    k1 = np.empty(n)
    k7 = np.empty(n)
    xt = np.empty(n)
    kt = np.empty(n)
    ring_t = np.zeros(W)
    ring_x = np.zeros((W, n))
    st, pc = carroll_field(ops, args, consts, nout, n, k, x, sign, k1)
    if st != ERR_OK:
        return EV_ERROR, 0.0, 0.0, 0.0, poly, 0, st, pc
    poly[0, :] = x
    npts = 1
    t = 0.0
    arc = 0.0
    h = h0
    far = False
    far_thr = 10.0 * return_tol
    gprev = 0.0
    nacc = 0
    ring_t[0] = 0.0
    ring_x[0, :] = x
    nacc = 1
    max_disp = 0.02 * diag
    for _ in range(max_steps):
        speed = _norm(k1)
        if speed > 0.0 and h * speed > max_disp:
            h = max_disp / speed
        st, pc, errn = _dp_step(ops, args, consts, nout, n, k, sign, x, h, k1, xn, k7, tol)
        if st != ERR_OK:
            return EV_ERROR, t, arc, 0.0, poly, npts, st, pc
        if not math.isfinite(errn) or errn > 1.0:
            if math.isfinite(errn):
                h *= max(0.2, 0.9 * errn ** -0.2)
            else:
                h *= 0.2
            if h < 1e-14 * (1.0 + abs(t)):
                return EV_UNDERFLOW, t, arc, 0.0, poly, npts, ERR_OK, -1
            continue
        if not _inside(xn, lo, hi, slack):
            # land the final vertex on the boundary so the polyline spans the chart
            a_ = 0.0
            b_ = h
            for _it in range(60):
                m_ = 0.5 * (a_ + b_)
                st, pc, e_ = _dp_step(ops, args, consts, nout, n, k, sign, x, m_, k1, xt, kt, tol)
                if st == ERR_OK and _inside(xt, lo, hi, slack):
                    a_ = m_
                else:
                    b_ = m_
            if a_ > 0.0:
                st, pc, e_ = _dp_step(ops, args, consts, nout, n, k, sign, x, a_, k1, xt, kt, tol)
                seg = 0.0
                for i in range(n):
                    seg += (xt[i] - x[i]) ** 2
                arc += math.sqrt(seg)
                t += a_
                if npts < cap:
                    poly[npts, :] = xt
                    npts += 1
                else:
                    poly[cap - 1, :] = xt
            return EV_EXIT, t, arc, 0.0, poly, npts, ERR_OK, -1
        # closest return to the seed: g = (x - x0).c(x) crosses from - to +
        gnew = 0.0
        dist = 0.0
        for i in range(n):
            gnew += (xn[i] - x0[i]) * k7[i]
            dist += (xn[i] - x0[i]) ** 2
        dist = math.sqrt(dist)
        if far and gprev < 0.0 and gnew >= 0.0:
            a_ = 0.0
            b_ = h
            for _it in range(60):
                m_ = 0.5 * (a_ + b_)
                st, pc, e_ = _dp_step(ops, args, consts, nout, n, k, sign, x, m_, k1, xt, kt, tol)
                gm = 0.0
                for i in range(n):
                    gm += (xt[i] - x0[i]) * kt[i]
                if gm < 0.0:
                    a_ = m_
                else:
                    b_ = m_
            tau = 0.5 * (a_ + b_)
            st, pc, e_ = _dp_step(ops, args, consts, nout, n, k, sign, x, tau, k1, xt, kt, tol)
            d = 0.0
            for i in range(n):
                d += (xt[i] - x0[i]) ** 2
            d = math.sqrt(d)
            if d <= return_tol:
                seg = 0.0
                for i in range(n):
                    seg += (xt[i] - x[i]) ** 2
                arc += math.sqrt(seg)
                if npts < cap:
                    poly[npts, :] = xt
                    npts += 1
                return EV_PERIODIC, t + tau, arc, t + tau, poly, npts, ERR_OK, -1
        if dist > far_thr:
            far = True
        seg = 0.0
        for i in range(n):
            seg += (xn[i] - x[i]) ** 2
        arc += math.sqrt(seg)
        t += h
        x[:] = xn
        k1[:] = k7
        gprev = gnew
        if npts < cap:
            poly[npts, :] = x
            npts += 1
        else:
            poly[cap - 1, :] = x
        slot = nacc % W
        ring_t[slot] = t
        ring_x[slot, :] = x
        nacc += 1
        if _norm(k1) < eps and nacc > W:
            old = nacc % W
            dt_w = t - ring_t[old]
            disp = 0.0
            for i in range(n):
                disp += (x[i] - ring_x[old, i]) ** 2
            disp = math.sqrt(disp)
            if dt_w > 0.0 and disp / dt_w < eps:
                return EV_FROZEN, t, arc, 0.0, poly, npts, ERR_OK, -1
        if arc >= max_arc:
            return EV_BUDGET, t, arc, 0.0, poly, npts, ERR_OK, -1
        if errn == 0.0:
            h *= 5.0
        else:
            h *= min(5.0, 0.9 * errn ** -0.2)
    return EV_BUDGET, t, arc, 0.0, poly, npts, ERR_OK, -1


def batch_values(ops, args, consts, nout, X):
    """Evaluate a tape on many points with the active backend."""
    out = np.empty((X.shape[0], nout))
    X = np.ascontiguousarray(X, dtype=float)
    if USE_NUMBA:
        status, pc, row = eval_values_batch(ops, args, consts, nout, X, out)
    else:
        status, pc, row = eval_values_batch_np(ops, args, consts, nout, X, out)
    return out, int(status), int(pc), int(row)
