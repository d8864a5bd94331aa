"""Truncated Taylor jets of tensor-valued functions on a chart.

A :class:`Jet` of order ``m`` stores ``parts[j]`` for ``j = 0..m``: the j-th
derivative tensor, with the tensor axes first and ``j`` trailing derivative
axes of size ``n``. Products follow the Leibniz rule, so every algebraic
operation on frame components stays exact up to the stored order.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np
import scipy.linalg

_DLETTERS = "XYZW"
RANK_RTOL = 1e-10


class Jet:
    __slots__ = ("parts", "n")

    def __init__(self, parts, n):
        self.parts = [np.asarray(p, dtype=float) for p in parts]
        self.n = int(n)

    @classmethod
    def const(cls, value, n, order):
        value = np.asarray(value, dtype=float)
        parts = [value] + [np.zeros(value.shape + (n,) * j) for j in range(1, order + 1)]
        return cls(parts, n)

    @classmethod
    def zeros(cls, shape, n, order):
        return cls.const(np.zeros(shape), n, order)

    @classmethod
    def stack(cls, jets, axis=0):
        order = min(j.order for j in jets)
        n = jets[0].n
        return cls([np.stack([j.parts[d] for j in jets], axis=axis) for d in range(order + 1)], n)

    @property
    def order(self):
        return len(self.parts) - 1

    @property
    def shape(self):
        return self.parts[0].shape

    @property
    def value(self):
        return self.parts[0]

    def __repr__(self):
        return f"Jet(shape={self.shape}, n={self.n}, order={self.order})"

    def truncate(self, order):
        if order > self.order:
            raise ValueError(f"cannot raise jet order {self.order} to {order}")
        return Jet(self.parts[: order + 1], self.n)

    def _match(self, other):
        if isinstance(other, Jet):
            m = min(self.order, other.order)
            return self.truncate(m), other.truncate(m)
        return self, Jet.const(np.broadcast_to(other, self.shape), self.n, self.order)

    def __add__(self, other):
        a, b = self._match(other)
        return Jet([p + q for p, q in zip(a.parts, b.parts)], self.n)

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self._match(other)
        return Jet([p - q for p, q in zip(a.parts, b.parts)], self.n)

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return Jet([-p for p in self.parts], self.n)

    def __mul__(self, c):
        if isinstance(c, Jet):
            raise TypeError("use contract() for jet products")
        return Jet([c * p for p in self.parts], self.n)

    __rmul__ = __mul__

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        if any(i is Ellipsis for i in idx):
            # an index like x[..., 0] would hit derivative axes
            raise IndexError("jets only support leading-axis indexing")
        idx = idx + (Ellipsis,)
        return Jet([p[idx] for p in self.parts], self.n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return Jet([p.reshape(shape + (self.n,) * j) for j, p in enumerate(self.parts)], self.n)

    def lin(self, spec):
        """Apply a single-operand einsum (transpose, trace, sum) to tensor axes."""
        src, dst = spec.split("->")
        out = []
        for j, p in enumerate(self.parts):
            d = _DLETTERS[:j]
            out.append(np.einsum(f"{src}{d}->{dst}{d}", p))
        return Jet(out, self.n)

    def max_abs(self):
        return float(np.max(np.abs(self.value))) if self.value.size else 0.0


def _product_part(spec_a, spec_b, spec_out, pa, pb, j):
    """j-th derivative of an einsum product via the Leibniz rule."""
    letters = _DLETTERS[:j]
    total = None
    for r in range(j + 1):
        for S in combinations(range(j), r):
            la = "".join(letters[i] for i in S)
            lb = "".join(letters[i] for i in range(j) if i not in S)
            term = np.einsum(f"{spec_a}{la},{spec_b}{lb}->{spec_out}{letters}", pa[r], pb[j - r])
            total = term if total is None else total + term
    return total


def _split(spec):
    ins, out = spec.replace(" ", "").split("->")
    a, b = ins.split(",")
    return a, b, out


def contract(spec, a, b):
    """Einsum-style product of two jets (tensor indices only in ``spec``)."""
    sa, sb, so = _split(spec)
    if not isinstance(a, Jet):
        a = Jet.const(a, b.n, b.order)
    if not isinstance(b, Jet):
        b = Jet.const(b, a.n, a.order)
    m = min(a.order, b.order)
    return Jet([_product_part(sa, sb, so, a.parts, b.parts, j) for j in range(m + 1)], a.n)


def deriv(f):
    """Total derivative: the first derivative axis becomes a trailing tensor axis.

    The result has one order less than ``f``.
    """
    if f.order < 1:
        raise ValueError("need an order >= 1 jet to differentiate")
    return Jet(f.parts[1:], f.n)


def along(rho, f):
    """Directional derivatives ``out[a, ...] = rho[i, a] * d_i f[...]``."""
    return contract("ia,...i->a...", rho, deriv(f))


def inv(M):
    """Jet of the inverse of a square matrix jet."""
    V = np.linalg.inv(M.value)
    parts = [V]
    for j in range(1, M.order + 1):
        trial = parts + [np.zeros(V.shape + (M.n,) * j)]
        rest = _product_part("ab", "bc", "ac", M.parts, trial, j)
        parts.append(-np.einsum("ab,bc" + _DLETTERS[:j] + "->ac" + _DLETTERS[:j], V, rest))
    return Jet(parts, M.n)


def rank_of(A0, rtol=RANK_RTOL):
    if A0.size == 0:
        return 0
    s = np.linalg.svd(A0, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def min_norm_solve(A, b, rtol=RANK_RTOL):
    """Minimum-norm solution jet of ``A x = b`` for a consistent system.

    ``b`` may carry extra trailing tensor axes (several right-hand sides).

    Assumes the rank of ``A`` is constant near the base point, so the
    pseudoinverse is smooth there. Independent rows are chosen at the base
    point and ``x = A_r^T (A_r A_r^T)^{-1} b_r``. Also returns the base-point
    least-squares residual ``|A0 x0 - b0|`` so callers can detect an
    inconsistent system.
    """
    A0 = A.value
    m, p = A0.shape
    r = rank_of(A0, rtol)
    if r == 0:
        x = Jet.zeros((p,) + b.shape[1:], A.n, min(A.order, b.order))
        return x, float(np.linalg.norm(b.value))
    _, _, piv = scipy.linalg.qr(A0.T, pivoting=True, mode="economic")
    rows = np.sort(piv[:r])
    Ar = A[rows]
    br = b[rows]
    G = contract("ap,bp->ab", Ar, Ar)
    y = contract("ab,b...->a...", inv(G), br)
    x = contract("ap,a...->p...", Ar, y)
    resid = float(np.linalg.norm(np.tensordot(A0, x.value, axes=1) - b.value))
    return x, resid


def pinv_solve(A0, b0, rtol=RANK_RTOL):
    """Plain value-level minimum-norm solve with the same rank cutoff."""
    if A0.size == 0:
        x = np.zeros((A0.shape[1],) + np.shape(b0)[1:])
    else:
        x = np.linalg.pinv(A0, rcond=rtol) @ b0
    return x, float(np.linalg.norm(A0 @ x - b0))
