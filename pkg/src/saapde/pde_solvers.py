"""Damped Newton for the semilinear state equations and linear adjoint solves.

A ``SemilinearSystem`` represents the discrete residual

    R(y) = A(xi) y + N(y) - f(u, xi)

where ``A(xi)`` is the assembled linear part, ``N`` one of the monotone
nonlinearities below and ``f`` the control/load right-hand side as a dual
vector. Residual norms are measured in the dual norm of the state space.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NewtonDivergence, SingularJacobian, UnknownProblemTag
from .mesh_fem import DiscreteSpace

log = logging.getLogger(__name__)


class CubicLumped:
    """y -> y^3 integrated with the lumped (row-sum) mass; monotone and diagonal."""

    name = "cubic"

    def __init__(self, space: DiscreteSpace):
        self.weights = space.lumped_mass

    def value(self, y):
        return self.weights * y**3

    def jacobian(self, y):
        return sp.diags(3.0 * self.weights * y**2)


class Convection1D:
    """Exact P1 integration of (y y', v) on (0,1) with homogeneous Dirichlet data.

    On an element with end values a (left) and b (right) the contributions to
    the left and right test functions are (b-a)(2a+b)/6 and (b-a)(a+2b)/6.
    """

    name = "convection"

    def __init__(self, space: DiscreteSpace):
        if space.kind != "H01" or space.layout.dim != 1:
            raise ValueError("convection term is defined on the 1D H01 space")
        self.n = space.dim

    def _pad(self, y):
        full = np.zeros(self.n + 2)
        full[1:-1] = y
        return full[:-1], full[1:]

    def value(self, y):
        a, b = self._pad(y)
        d = b - a
        out = np.zeros(self.n + 2)
        out[:-1] += d * (2 * a + b) / 6.0
        out[1:] += d * (a + 2 * b) / 6.0
        return out[1:-1]

    def jacobian(self, y):
        a, b = self._pad(y)
        m = self.n + 2
        k = np.arange(m - 1)
        rows = np.concatenate([k, k, k + 1, k + 1])
        cols = np.concatenate([k, k + 1, k, k + 1])
        vals = np.concatenate(
            [(b - 4 * a) / 6.0, (a + 2 * b) / 6.0, -(2 * a + b) / 6.0, (4 * b - a) / 6.0]
        )
        full = sp.coo_matrix((vals, (rows, cols)), shape=(m, m)).tocsr()
        return full[1:-1][:, 1:-1]


@dataclass(frozen=True, eq=False)
class SemilinearSystem:
    space: DiscreteSpace
    linear_part: Callable  # Sample -> sparse matrix
    rhs: Callable  # (u, Sample) -> dual vector
    nonlinearity: object | None = None

    def residual(self, y, a, f):
        r = a @ y - f
        if self.nonlinearity is not None:
            r = r + self.nonlinearity.value(y)
        return r

    def jacobian(self, y, a):
        if self.nonlinearity is None:
            return a.tocsc()
        return (a + self.nonlinearity.jacobian(y)).tocsc()


@dataclass(frozen=True)
class NewtonConfig:
    residual_tol: float = 1e-10
    max_iter: int = 50
    backtrack: float = 0.5
    min_step: float = 2.0**-20
    armijo: float = 1e-4
    polish: int = 0  # extra full steps after convergence, kept when they do not hurt

    def __post_init__(self):
        if not self.residual_tol > 0:
            raise ValueError("residual_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.polish < 0:
            raise ValueError("polish must be nonnegative")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack must lie in (0, 1)")


@dataclass
class SolveReport:
    iterations: int
    final_residual: float
    converged: bool
    history: list = field(default_factory=list)


def _factor(mat):
    try:
        lu = spla.splu(mat)
    except RuntimeError as exc:  # SuperLU reports exact singularity this way
        raise SingularJacobian(str(exc)) from exc
    return lu


def solve_state(system: SemilinearSystem, u, xi, cfg: NewtonConfig = NewtonConfig(), y0=None):
    """Damped Newton from ``y0`` (zero by default). Returns ``(y, report)``."""
    space = system.space
    a = system.linear_part(xi)
    f = system.rhs(u, xi)
    y = np.zeros(space.dim) if y0 is None else np.array(y0, float)
    r = system.residual(y, a, f)
    res = space.dual_norm(r)
    history = [res]
    it = 0
    while res > cfg.residual_tol:
        if it >= cfg.max_iter:
            rep = SolveReport(it, res, False, history)
            raise NewtonDivergence(f"no convergence in {it} iterations (residual {res:.3e})", rep, y)
        jac = system.jacobian(y, a)
        step = _factor(jac).solve(-r)
        if not np.all(np.isfinite(step)):
            raise SingularJacobian("non-finite Newton step")
        t = 1.0
        while True:
            y_new = y + t * step
            r_new = system.residual(y_new, a, f)
            res_new = space.dual_norm(r_new)
            if res_new <= (1.0 - cfg.armijo * t) * res:
                break
            t *= cfg.backtrack
            if t < cfg.min_step:
                rep = SolveReport(it, res, False, history)
                raise NewtonDivergence(f"line search failed at residual {res:.3e}", rep, y)
        y, r, res = y_new, r_new, res_new
        it += 1
        history.append(res)
    for _ in range(cfg.polish):
        # pushes the state to rounding level so that warm-started solves do not
        # leave tolerance-sized noise in objective values
        y_new = y + _factor(system.jacobian(y, a)).solve(-r)
        r_new = system.residual(y_new, a, f)
        res_new = space.dual_norm(r_new)
        if not res_new <= res:
            break
        y, r, res = y_new, r_new, res_new
        history.append(res)
    return y, SolveReport(it, res, True, history)


def solve_adjoint(system: SemilinearSystem, y, xi, rhs_dual) -> np.ndarray:
    """Solve ``E_y(y)^T z = rhs_dual`` with the Jacobian at the converged state."""
    rhs_dual = np.asarray(rhs_dual, float)
    if not np.any(rhs_dual):
        return np.zeros_like(rhs_dual)
    jac = system.jacobian(y, system.linear_part(xi))
    z = _factor(jac.T.tocsc()).solve(rhs_dual)
    if not np.all(np.isfinite(z)):
        raise SingularJacobian("non-finite adjoint solution")
    return z


def multistart_agreement(system, u, xi, guesses, cfg=NewtonConfig()) -> float:
    """Largest distance (state norm) between Newton solutions from several starts."""
    sols = [solve_state(system, u, xi, cfg, y0=g)[0] for g in guesses]
    return max(system.space.norm(s - sols[0]) for s in sols[1:]) if len(sols) > 1 else 0.0


def stability_check_state(problem, u, xi, y) -> float:
    """Smallest margin (bound minus bounded quantity) of the state stability estimates."""
    checks = {
        "boundary_semilinear": "state_margins",
        "burgers": "state_margins",
        "distributed_maxterm": "state_margins",
        "appendix_infcompact": "state_margins",
    }
    tag = getattr(problem, "tag", None)
    if tag not in checks:
        raise UnknownProblemTag(f"unknown problem tag {tag!r}")
    margins = getattr(problem, checks[tag])(u, xi, y)
    return float(min(margins.values()))
