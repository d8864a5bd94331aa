"""Random expression strings covering every grammar production.

Arguments of log, sqrt, tan and division are wrapped so the result is
smooth on the box [-1, 1]^n, which keeps property tests off domain errors.
"""

import numpy as np
from hypothesis import strategies as st

NAMES = ("x", "y", "z")


def leaves(names):
    nums = st.sampled_from(["0.5", "2", "1.25", "3", "0.1", "1e-1", ".75"])
    return st.one_of(st.sampled_from(list(names)), nums)


def _wrap(children):
    unary = st.tuples(st.sampled_from(["sin", "cos", "tanh", "exp_small", "log1", "sqrt1", "tan_t", "neg"]), children)
    binary = st.tuples(st.sampled_from(["+", "-", "*", "/", "^2", "^3", "^-1"]), children, children)

    def u(t):
        f, a = t
        if f == "exp_small":
            return f"exp(0.5*tanh({a}))"
        if f == "log1":
            return f"log(1 + ({a})^2)"
        if f == "sqrt1":
            return f"sqrt(2 + sin({a}))"
        if f == "tan_t":
            return f"tan(tanh({a}))"
        if f == "neg":
            return f"-({a})"
        return f"{f}({a})"

    def b(t):
        op, a, c = t
        if op == "/":
            return f"({a})/(1.5 + cos({c}))"
        if op == "^2":
            return f"({a})^2"
        if op == "^3":
            return f"tanh({a})^3"
        if op == "^-1":
            return f"(2 + sin({a}))^-1"
        return f"({a}) {op} ({c})"

    return st.one_of(unary.map(u), binary.map(b))


def expressions(names=NAMES, max_leaves=12):
    return st.recursive(leaves(names), _wrap, max_leaves=max_leaves)


def central_gradient(f, x, h):
    g = np.zeros(len(x))
    for i in range(len(x)):
        e = np.zeros(len(x))
        e[i] = h[i]
        g[i] = (f(x + e) - f(x - e)) / (2 * h[i])
    return g


def central_hessian(f, x, h):
    n = len(x)
    H = np.zeros((n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        for j in range(n):
            ej = np.zeros(n)
            ej[j] = h[j]
            H[i, j] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h[i] * h[j])
    return H
