"""Geodesics of algebroid connections (A-paths) with optional external forces.

The state is (gamma, alpha) with
    gamma' = rho(gamma) alpha,
    alpha'^c = -Gamma^c_ab(gamma) alpha^a alpha^b + F^c(gamma),
integrated by fixed-step RK4 and refined by halving the step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .algebroid import ModelError, PreconditionError, projector
from .connection import ZeroConnection, is_L_compatible
from .distribution import IntegrationError, check_L_path, classify_leaf, distance_to_polyline
from .fields import as_field

FREEZE_TOL = 1e-9
FREEZE_STEPS = 10
REFINE_TOL = 1e-8
PARTICLE = "Particle"
SWIFTON = "Swifton"


@dataclass
class ForceSection:
    components: tuple
    mode: str = "general"  # "particle" forces must stay parallel to sigma
    label: str = "force"

    @classmethod
    def build(cls, model, components, mode="general", label="force", samples=32, seed=0):
        comps = tuple(as_field(c, model.chart) for c in components)
        if len(comps) != model.rank:
            raise ModelError(f"force needs {model.rank} components, got {len(comps)}")
        if mode not in ("general", "particle"):
            raise ValueError(f"unknown force mode {mode!r}")
        force = cls(comps, mode, label)
        if mode == "particle":
            for x in model.chart.halton(samples, seed):
                s = model.values(x)[1]
                resid = float(np.linalg.norm(projector(s) @ force(x)))
                if resid > 1e-10:
                    raise ModelError(f"particle force has transverse part {resid:.3g} at {x.tolist()}")
        return force

    def __call__(self, x):
        return np.array([c(x) for c in self.components])


@dataclass
class Trajectory:
    t: np.ndarray
    gamma: np.ndarray
    alpha: np.ndarray
    events: list  # (name, time)
    meta: dict = field(default_factory=dict)

    @property
    def final_event(self):
        return self.events[-1][0] if self.events else "Completed"

    @property
    def frozen(self):
        return any(name == "Frozen" for name, _ in self.events)

    def state_at(self, s):
        """(gamma, alpha) at parameter s; a frozen path stays at its last sample."""
        if s < self.t[0] or (s > self.t[-1] + 1e-12 and not self.frozen):
            raise ValueError(f"t = {s} outside the integrated range [{self.t[0]}, {self.t[-1]}]")
        if s >= self.t[-1]:
            return self.gamma[-1].copy(), self.alpha[-1].copy()
        g = np.array([np.interp(s, self.t, col) for col in self.gamma.T])
        a = np.array([np.interp(s, self.t, col) for col in self.alpha.T])
        return g, a

    def speeds(self, model):
        return np.array([np.linalg.norm(model.values(x)[0] @ a) for x, a in zip(self.gamma, self.alpha)])

    def misalignment(self, model):
        out = np.zeros(len(self.t))
        for j, (x, a) in enumerate(zip(self.gamma, self.alpha)):
            na = np.linalg.norm(a)
            if na > 0.0:
                out[j] = np.linalg.norm(projector(model.values(x)[1]) @ a) / na
        return out


def _rhs_factory(model, G, force):
    n = model.n
    zero = isinstance(G, ZeroConnection)

    def rhs(y):
        x, a = y[:n], y[n:]
        rho = model.values(x)[0]
        gd = rho @ a
        if zero:
            ad = np.zeros_like(a)
        else:
            ad = -np.einsum("cab,a,b->c", G.values(model, x), a, a)
        if force is not None:
            ad = ad + force(x)
        return np.concatenate([gd, ad])

    return rhs


def _rk4(model, rhs, y0, t_end, steps, freeze_tol):
    n = model.n
    chart = model.chart
    h = t_end / steps
    ys = [y0.copy()]
    ts = [0.0]
    events = []
    y = y0.copy()
    still = 0
    for j in range(steps):
        k1 = rhs(y)
        speed = float(np.linalg.norm(k1[:n]))
        still = still + 1 if speed < freeze_tol else 0
        if still >= FREEZE_STEPS:
            events.append(("Frozen", ts[-1]))
            break
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        ynew = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(ynew)):
            raise IntegrationError("non-finite state", y[:n])
        tnew = (j + 1) * h
        if not chart.contains(ynew[:n]):
            events.append(("ExitedChart", tnew))
            break
        y = ynew
        ys.append(y.copy())
        ts.append(tnew)
    if not events:
        events.append(("Completed", ts[-1]))
    return np.array(ts), np.array(ys), events


def integrate_apath(
    model,
    G=None,
    start=None,
    alpha0=None,
    force=None,
    t_end=1.0,
    dt=0.01,
    refine=True,
    max_halvings=8,
    freeze_tol=FREEZE_TOL,
):
    if dt <= 0.0 or t_end <= 0.0:
        raise ValueError("dt and t_end must be positive")
    G = ZeroConnection() if G is None else G
    x0 = model.chart.check_point(start)
    a0 = np.asarray(alpha0, dtype=float).reshape(-1)
    if a0.shape != (model.rank,):
        raise ValueError(f"alpha0 needs {model.rank} components")
    rhs = _rhs_factory(model, G, force)
    y0 = np.concatenate([x0, a0])
    steps = max(1, int(np.ceil(t_end / dt - 1e-12)))
    t, ys, events = _rk4(model, rhs, y0, t_end, steps, freeze_tol)
    halvings = 0
    change = float("nan")
    while refine and halvings < max_halvings:
        t2, ys2, ev2 = _rk4(model, rhs, y0, t_end, 2 * steps, freeze_tol)
        # compare at the last time both runs reached; coarse index j is fine index 2j
        j = min(len(t) - 1, (len(t2) - 1) // 2)
        change = float(np.max(np.abs(ys[j, : model.n] - ys2[2 * j, : model.n])))
        steps *= 2
        halvings += 1
        t, ys, events = t2, ys2, ev2
        if change <= REFINE_TOL:
            break
        if t_end / steps < 1e-12:
            raise IntegrationError("step-size underflow during refinement", ys[-1, : model.n])
    meta = {
        "connection": getattr(G, "label", "custom"),
        "force": getattr(force, "label", "none") if force is not None else "none",
        "dt": t_end / steps,
        "dt_requested": dt,
        "halvings": halvings,
        "refinement_change": change,
    }
    return Trajectory(t, ys[:, : model.n], ys[:, model.n :], events, meta)


def classify_initial(model, alpha0, start, tol=1e-9):
    a = np.asarray(alpha0, dtype=float).reshape(-1)
    na = float(np.linalg.norm(a))
    if na == 0.0:
        raise ValueError("alpha0 is zero; particle/swifton undefined")
    s = model.values(model.chart.check_point(start))[1]
    return PARTICLE if np.linalg.norm(projector(s) @ a) <= tol * na else SWIFTON


@dataclass
class ConfinementReport:
    misalignment: float
    anchor_residual: float
    transverse_residual: float
    leaf_drift: float
    tol: float

    @property
    def confined(self):
        return self.misalignment <= self.tol and self.leaf_drift <= self.tol

    def to_dict(self):
        return {
            "misalignment": self.misalignment,
            "anchor_residual": self.anchor_residual,
            "transverse_residual": self.transverse_residual,
            "leaf_drift": self.leaf_drift,
            "tol": self.tol,
            "confined": bool(self.confined),
        }


def particle_confinement(model, G, trajectory, tol=1e-6, samples=32, seed=0):
    compat = is_L_compatible(model, G, samples, seed)
    if not compat:
        raise PreconditionError("L-compatible", f"residual {compat.residual:.3g}")
    if classify_initial(model, trajectory.alpha[0], trajectory.gamma[0]) != PARTICLE:
        raise PreconditionError("Particle", "initial fiber vector is transverse to the kernel")
    mis = float(np.max(trajectory.misalignment(model)))
    lp = check_L_path(model, trajectory, tol)
    return ConfinementReport(mis, lp.anchor_residual, lp.transverse_residual, lp.leaf_drift, tol)


def leaf_crossings(model, trajectory, spacing=0.1):
    """How many bands of width ``spacing`` away from the initial leaf the path reaches."""
    leaf = classify_leaf(model, trajectory.gamma[0])
    d = distance_to_polyline(trajectory.gamma, leaf.polyline)
    return int(np.floor(np.max(d) / spacing)), float(np.max(d))
