"""Proximity operators and a proximal-gradient solver with a fixed-point stopping test.

All prox operators act in the Hilbert geometry of a control ``DiscreteSpace``
(mass-matrix inner product). For the ball this is a radial scaling; for a
box it is a pointwise clamp when the mass matrix is diagonal and a
mass-weighted projection otherwise (primal-dual active sets, with bounded
least squares as the fallback).
"""
from __future__ import annotations

import csv
import functools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse.linalg as spla
from scipy.optimize import lsq_linear

from .errors import LineSearchStall, NonFiniteValue

log = logging.getLogger(__name__)

EPS = np.finfo(float).eps


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "zero"  # zero | ball | box
    radius: float | None = None
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if self.kind not in ("zero", "ball", "box"):
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.kind == "ball" and not (self.radius is not None and self.radius > 0):
            raise ValueError("ball radius must be positive")
        if self.kind == "box":
            if self.lo is None or self.hi is None or np.any(np.asarray(self.lo) > np.asarray(self.hi)):
                raise ValueError("box needs lo <= hi")

    @classmethod
    def zero(cls):
        return cls("zero")

    @classmethod
    def ball(cls, radius):
        return cls("ball", radius=float(radius))

    @classmethod
    def box(cls, lo, hi):
        return cls("box", lo=lo, hi=hi)

    @property
    def is_indicator(self) -> bool:
        return self.kind != "zero"

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "ball":
            d["radius"] = self.radius
        if self.kind == "box":
            d["lo"], d["hi"] = self.lo, self.hi
        return d


class ProxOperator:
    def __init__(self, spec: RegularizerSpec, space):
        self.spec = spec
        self.space = space

    @functools.cached_property
    def _chol(self):
        return scipy.linalg.cholesky(self.space.mass.toarray(), lower=False)

    def _bounds(self):
        n = self.space.dim
        lo = np.broadcast_to(np.asarray(self.spec.lo, float), (n,))
        hi = np.broadcast_to(np.asarray(self.spec.hi, float), (n,))
        return lo, hi

    def __call__(self, v, scale=1.0):
        return prox_apply(self, scale, v)

    def value(self, u) -> float:
        """psi(u): zero on the feasible set, +inf outside."""
        s = self.spec
        if s.kind == "zero":
            return 0.0
        if s.kind == "ball":
            return 0.0 if self.space.l2_norm(u) <= s.radius else math.inf
        lo, hi = self._bounds()
        return 0.0 if np.all(u >= lo) and np.all(u <= hi) else math.inf

    def contains(self, u) -> bool:
        return self.value(u) == 0.0


def _project_ball(space, v, radius):
    nv = space.l2_norm(v)
    if nv <= radius:
        return np.array(v, float)
    w = v * (radius / nv)
    # guard against the scaled vector landing a few ulps outside the ball
    while space.l2_norm(w) > radius:
        w = w * (1.0 - 2 * EPS)
    return w


def _project_box_active_set(mass, v, lo, hi, max_iter=50):
    """Mass-weighted box projection by primal-dual active sets.

    Solves min (w-v)^T M (w-v) over lo <= w <= hi. Returns None when the
    iteration does not settle on a point satisfying the KKT conditions, so
    the caller can fall back to a general bounded least-squares solver.
    """
    mv = mass @ v
    w = np.clip(v, lo, hi)
    mu = mv - mass @ w
    upper = lower = None
    for _ in range(max_iter):
        up, low = w + mu > hi, w + mu < lo
        low &= ~up
        if upper is not None and np.array_equal(up, upper) and np.array_equal(low, lower):
            break
        upper, lower = up, low
        w = np.where(up, hi, np.where(low, lo, 0.0))
        free = ~(up | low)
        if free.any():
            mff = mass[free][:, free].tocsc()
            rhs = mv[free] - mass[free][:, ~free] @ w[~free]
            w[free] = spla.spsolve(mff, rhs) if mff.shape[0] > 1 else rhs / mff.toarray()[0, 0]
        mu = mv - mass @ w
        mu[free] = 0.0
    else:
        return None
    scale = 1e-12 * max(1.0, np.abs(mv).max())
    slack = 1e-12 * max(1.0, np.abs(v).max())
    ok = (np.all(mu[upper] >= -scale) and np.all(mu[lower] <= scale)
          and np.all(w >= lo - slack) and np.all(w <= hi + slack))
    return np.clip(w, lo, hi) if ok else None


def prox_apply(op: ProxOperator, scale: float, v) -> np.ndarray:
    """prox of psi/scale at v; the scale only matters for non-indicator psi (none here)."""
    if not scale > 0:
        raise ValueError("prox scale must be positive")
    v = np.asarray(v, float)
    s = op.spec
    if s.kind == "zero":
        return v.copy()
    if s.kind == "ball":
        return _project_ball(op.space, v, s.radius)
    lo, hi = op._bounds()
    if op.space.mass_is_diagonal:
        return np.clip(v, lo, hi)
    if np.all(v >= lo) and np.all(v <= hi):
        # points of the set are their own projection; keeps prox idempotent bitwise
        return v.copy()
    w = _project_box_active_set(op.space.mass, v, lo, hi)
    if w is not None:
        return w
    w = np.clip(v, lo, hi)
    free = lo < hi
    if not free.any():
        return w
    # pinned components (lo == hi) move to the right-hand side
    r = op._chol
    rf = r[:, free]
    rhs = r @ v - r[:, ~free] @ w[~free]
    res = lsq_linear(rf, rhs, bounds=(lo[free], hi[free]), method="bvls", tol=1e-14)
    w[free] = np.clip(res.x, lo[free], hi[free])
    return w


def fixpoint_residual(p, grad_f1, u) -> float:
    """||u - prox_{psi/alpha}(-grad_f1/alpha)|| in the control norm."""
    w = prox_apply(p.prox, p.alpha, -np.asarray(grad_f1) / p.alpha)
    return p.control_space.l2_norm(np.asarray(u) - w)


@dataclass(frozen=True)
class OptimizerConfig:
    step0: float = 1.0
    backtrack: float = 0.5
    sufficient_decrease: float = 1e-4
    fixpoint_tol: float = 1e-8
    max_iter: int = 10_000
    min_step: float = 2.0**-30

    def __post_init__(self):
        if not (self.step0 > 0 and self.sufficient_decrease > 0 and self.fixpoint_tol > 0
                and self.max_iter >= 1 and self.min_step > 0):
            raise ValueError("optimizer parameters must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack must lie in (0, 1)")


@dataclass
class OptimizeResult:
    u_star: np.ndarray
    value: float
    fixpoint_residual: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def minimize(p, smooth_grad, prox: ProxOperator, cfg: OptimizerConfig = OptimizerConfig(),
             u0=None, trace_path=None) -> OptimizeResult:
    """Forward-backward splitting for ``f + psi`` with backtracking.

    ``smooth_grad(u)`` returns ``(f(u), grad f(u))`` where ``f`` includes the
    alpha-quadratic and the gradient is the Riesz representative in the
    control space. Step lengths start from a Barzilai-Borwein guess. When the
    objective decrease of a trial step drops to rounding level, the decrease
    is measured by the trapezoidal rule on the two gradients instead.
    """
    space = p.control_space
    inner = space.inner
    alpha = p.alpha
    u = prox(np.zeros(space.dim) if u0 is None else np.asarray(u0, float))
    f, g = smooth_grad(u)
    _check_finite(f, g)
    t = cfg.step0
    history = []
    writer = None
    fh = None
    if trace_path is not None:
        fh = open(trace_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "value", "residual", "step"])
    try:
        it = 0
        while True:
            res = fixpoint_residual(p, g - alpha * u, u)
            history.append((it, f, res, t))
            if writer:
                writer.writerow([it, repr(f), repr(res), repr(t)])
            if res <= cfg.fixpoint_tol:
                return OptimizeResult(u, f, res, it, True, history)
            if it >= cfg.max_iter:
                return OptimizeResult(u, f, res, it, False, history)
            noise = 64 * EPS * max(abs(f), 1.0)
            while True:
                u_new = prox(u - t * g)
                d = u_new - u
                dd = inner(d, d)
                f_new, g_new = smooth_grad(u_new)
                _check_finite(f_new, g_new)
                need = cfg.sufficient_decrease / t * dd
                if f_new <= f - need:
                    break
                if abs(f_new - f) <= noise:
                    est = 0.5 * inner(g + g_new, d)
                    if est <= -need and f_new <= f + noise:
                        break
                t *= cfg.backtrack
                if t < cfg.min_step:
                    raise LineSearchStall(
                        f"step below {cfg.min_step:g} at iteration {it} (residual {res:.3e})"
                    )
            assert f_new <= f + noise, "accepted step increased the objective"
            s = d
            yv = g_new - g
            sy = inner(s, yv)
            t = float(np.clip(dd / sy, 1e-10, 1e10)) if sy > 0 else cfg.step0
            u, f, g = u_new, f_new, g_new
            it += 1
    finally:
        if fh is not None:
            fh.close()


def _check_finite(f, g):
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise NonFiniteValue("objective or gradient is not finite")
