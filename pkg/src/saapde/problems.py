"""The four risk-neutral model problems behind one evaluation interface.

Each problem exposes the state solve, the tracking functional ``J1``, the
adjoint state, the gradient factorization ``grad J1 = K[M]`` with the
``V``-norm of ``M``, the envelope ``zeta`` and the discrete counterparts of
the stability estimates used to build it.

Tags:
  boundary_semilinear  Robin boundary control of -div(kappa grad y) + g y + y^3 = b
  burgers              distributed control of the steady Burgers equation on (0,1)
  distributed_maxterm  distributed control through a random elliptic smoother,
                       tracking functional (1/2)||max(0, 1 - y)||^2
  appendix_infcompact  -div(kappa grad y) + y^3 = u with homogeneous Dirichlet data
"""
from __future__ import annotations

import copy
import functools
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SingularSystem, UnknownProblemTag
from .mesh_fem import (
    Grid1D,
    Mesh2D,
    assemble_1d,
    assemble_2d,
    assemble_2d_boundary_like,
    friedrichs_constant,
    trace_constant,
    trace_matrix,
    weighted_boundary_mass,
    weighted_mass,
    weighted_stiffness,
)
from .pde_solvers import (
    Convection1D,
    CubicLumped,
    NewtonConfig,
    SemilinearSystem,
    solve_adjoint,
    solve_state,
)
from .prox_opt import ProxOperator, RegularizerSpec
from .random_inputs import Distributions, FieldLayout, RandomModel

TAGS = ("boundary_semilinear", "burgers", "distributed_maxterm", "appendix_infcompact")


@dataclass
class Evaluation:
    """Everything one state + adjoint solve yields at (u, xi)."""

    value: float
    gradient: np.ndarray | None
    m: np.ndarray | None
    y: np.ndarray
    z: np.ndarray | None


class ProblemInstance:
    """Shared machinery; subclasses fill in the problem-specific operators."""

    tag = "abstract"

    def __init__(self, alpha, psi: RegularizerSpec, dists: Distributions,
                 newton: NewtonConfig = NewtonConfig(), r_ad=None):
        if not alpha > 0:
            raise ValueError("the regularization parameter alpha must be positive")
        self.alpha = float(alpha)
        self.psi = psi
        self.dists = dists
        self.newton = newton
        self.r_ad = r_ad
        self._kappa_min_bound = None
        self._sample_cache = {}

    def _per_sample(self, name, xi, build):
        """Memoize ``build(xi)`` by sample identity (samples are immutable)."""
        key = (name, id(xi))
        hit = self._sample_cache.get(key)
        if hit is not None and hit[0] is xi:
            return hit[1]
        val = build(xi)
        if len(self._sample_cache) > 256:
            self._sample_cache.clear()
        self._sample_cache[key] = (xi, val)
        return val

    def linear_operator(self, xi):
        return self._per_sample("linear", xi, self._linear_part)

    # ---- construction helpers ---------------------------------------------
    @functools.cached_property
    def prox(self) -> ProxOperator:
        return ProxOperator(self.psi, self.control_space)

    @property
    def kappa_min(self):
        """Lower bound on kappa used by the estimates (the law's bound unless overridden)."""
        if self._kappa_min_bound is not None:
            return self._kappa_min_bound
        return self.dists.kappa[0]

    @property
    def g_min(self):
        return self.dists.g[0]

    @property
    def coercivity(self):
        return min(self.kappa_min, self.g_min)

    def with_envelope(self, r_ad) -> "ProblemInstance":
        other = copy.copy(self)
        other.r_ad = float(r_ad)
        return other

    def with_bound_constants(self, kappa_min=None) -> "ProblemInstance":
        """Copy whose estimates use ``kappa_min`` while samples keep their own law."""
        if kappa_min is not None and not kappa_min > 0:
            raise ValueError("kappa_min must be positive")
        other = copy.copy(self)
        other._kappa_min_bound = None if kappa_min is None else float(kappa_min)
        return other

    def with_newton(self, newton: NewtonConfig) -> "ProblemInstance":
        other = copy.copy(self)
        other.newton = newton
        return other

    def field_layout(self) -> FieldLayout:
        return FieldLayout.from_space(self.state_space, self.b0)

    def make_model(self, support="finite_atoms", n_atoms=5, atom_seed=0, weights=None) -> RandomModel:
        lay = self.field_layout()
        if support == "finite_atoms":
            return RandomModel.finite(self.dists, lay, n_atoms, atom_seed, weights)
        if support == "continuous":
            return RandomModel.continuous(self.dists, lay)
        raise ValueError(f"unknown support kind {support!r}")

    # ---- evaluation --------------------------------------------------------
    def solve_state(self, u, xi, y0=None):
        return solve_state(self.system, u, xi, self.newton, y0=y0)

    def state(self, u, xi):
        return self.solve_state(u, xi)[0]

    def j1_from_state(self, y) -> float:
        raise NotImplementedError

    def dj1_from_state(self, y) -> np.ndarray:
        """Derivative of J1 with respect to the state, as a dual vector."""
        raise NotImplementedError

    def adjoint(self, u, xi, y):
        return solve_adjoint(self.system, y, xi, -self.dj1_from_state(y))

    def m_from_adjoint(self, xi, z) -> np.ndarray:
        return z

    def k_apply(self, m) -> np.ndarray:
        raise NotImplementedError

    def m_norm(self, m) -> float:
        return self.state_space.norm(m)

    def objective_j1(self, u, xi) -> float:
        return self.j1_from_state(self.state(u, xi))

    def evaluate(self, u, xi, gradient=True, y0=None) -> Evaluation:
        y = self.solve_state(u, xi, y0=y0)[0]
        val = self.j1_from_state(y)
        if not gradient:
            return Evaluation(val, None, None, y, None)
        z = self.adjoint(u, xi, y)
        m = self.m_from_adjoint(xi, z)
        return Evaluation(val, self.k_apply(m), m, y, z)

    def m_component(self, u, xi) -> np.ndarray:
        return self.evaluate(u, xi).m

    def gradient_j1(self, u, xi) -> np.ndarray:
        return self.evaluate(u, xi).gradient

    def control_norm(self, u) -> float:
        return self.control_space.l2_norm(u)

    def psi_value(self, u) -> float:
        return self.prox.value(u)

    def full_objective(self, u, xi) -> float:
        """J1 + psi + (alpha/2)||u||^2 at a single sample."""
        return (self.objective_j1(u, xi) + self.psi_value(u)
                + 0.5 * self.alpha * self.control_norm(u) ** 2)

    def zeta(self, xi) -> float:
        raise NotImplementedError

    def _need_r_ad(self):
        if self.r_ad is None:
            raise ValueError("zeta needs R_ad; build the problem with with_envelope(r_ad)")
        return self.r_ad

    def state_margins(self, u, xi, y) -> dict:
        raise NotImplementedError

    def adjoint_margins(self, u, xi, y, z) -> dict:
        raise NotImplementedError

    def k_norm(self) -> float:
        """Operator norm of K from V into the control space."""
        raise NotImplementedError

    def feasible_reference_control(self):
        """Default u0: zero projected onto the feasible set."""
        return self.prox(np.zeros(self.control_space.dim))

    def snapshot_rows(self, u, xi):
        """Node table rows (x..., y, z) for CSV dumps."""
        ev = self.evaluate(u, xi)
        coords = self.state_space.coordinates
        return coords, ev


# --------------------------------------------------------------------------
class BoundarySemilinear(ProblemInstance):
    tag = "boundary_semilinear"

    def __init__(self, n=16, alpha=1e-2, psi=RegularizerSpec.zero(), dists=Distributions(),
                 newton=NewtonConfig(), r_ad=None, y_d=None, b0=None):
        super().__init__(alpha, psi, dists, newton, r_ad)
        self.n = n
        self.mesh = Mesh2D.unit_square(n)
        self.state_space = assemble_2d(self.mesh, "H1")
        self.control_space = assemble_2d_boundary_like(self.state_space)
        self.trace = trace_matrix(self.state_space, self.control_space)
        x = self.state_space.coordinates
        self.y_d = (np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])) if y_d is None else np.asarray(y_d, float)
        self.b0 = np.ones(self.state_space.dim) if b0 is None else np.asarray(b0, float)
        self.system = SemilinearSystem(
            self.state_space, self.linear_operator, self._rhs, CubicLumped(self.state_space)
        )
        self.c_b = 1.0

    def _linear_part(self, xi):
        s = self.state_space
        return (weighted_stiffness(s, xi.kappa) + weighted_mass(s, xi.g)
                + weighted_boundary_mass(s, xi.sigma))

    def control_to_rhs(self, u):
        """Dual vector of v -> (B u, tr v) on the boundary, with B the identity."""
        return self.trace.T @ (self.control_space.mass @ u)

    def _rhs(self, u, xi):
        return self.state_space.mass @ xi.b + self.control_to_rhs(u)

    def j1_from_state(self, y):
        d = y - self.y_d
        return 0.5 * float(d @ (self.state_space.mass @ d))

    def dj1_from_state(self, y):
        return self.state_space.mass @ (y - self.y_d)

    def k_apply(self, m):
        return -(self.trace @ m)

    @functools.cached_property
    def c_trace(self):
        return trace_constant(self.state_space, self.control_space)

    def k_norm(self):
        return self.c_b * self.c_trace

    def zeta(self, xi):
        m = self.coercivity
        yd = self.state_space.l2_norm(self.y_d)
        bn = self.state_space.l2_norm(xi.b)
        return (yd + (self.c_trace * self.c_b * self._need_r_ad() + bn) / m) / m

    def state_margins(self, u, xi, y):
        s = self.state_space
        lhs = self.coercivity * s.h1_norm(y)
        rhs = s.l2_norm(xi.b) + self.c_trace * self.control_space.l2_norm(u)
        return {"gleq_h1_state": rhs - lhs}

    def adjoint_margins(self, u, xi, y, z):
        s = self.state_space
        return {"gleq_h1_adjoint": s.l2_norm(y - self.y_d) - self.coercivity * s.h1_norm(z)}


# --------------------------------------------------------------------------
def _l1_norm_p1(x, vals):
    """Exact integral of |v| for a continuous piecewise linear v on nodes x."""
    a, b = vals[:-1], vals[1:]
    h = np.diff(x)
    same = a * b >= 0
    out = np.empty_like(h)
    out[same] = h[same] * (np.abs(a[same]) + np.abs(b[same])) / 2
    ns = ~same
    out[ns] = h[ns] * (a[ns] ** 2 + b[ns] ** 2) / (2 * (np.abs(a[ns]) + np.abs(b[ns])))
    return float(out.sum())


class Burgers(ProblemInstance):
    tag = "burgers"

    def __init__(self, n=63, alpha=1e-2, psi=RegularizerSpec.ball(2.0),
                 dists=Distributions(kappa=(1.0, 2.0), kappa_per_quadrant=False),
                 newton=NewtonConfig(), r_ad=None, y_d=None, b0=None, subdomain=(0.25, 0.75)):
        super().__init__(alpha, psi, dists, newton, r_ad)
        self.n = n
        self.grid = Grid1D(n)
        self.state_space = assemble_1d(self.grid, "H01")
        self.control_space = assemble_1d(self.grid, "L2_subdomain", subdomain=subdomain)
        lay = self.state_space.layout
        full_masked = lay.assemble(lay.local_mass, mask=self.control_space.element_mask)
        self.coupling = full_masked[self.state_space.dofs][:, self.control_space.dofs].tocsr()
        pos = np.full(lay.n_nodes, -1)
        pos[self.state_space.dofs] = np.arange(self.state_space.dim)
        self._ctrl_pos = pos[self.control_space.dofs]
        if np.any(self._ctrl_pos < 0):
            raise ValueError("control subdomain must stay inside (0, 1)")
        x = self.state_space.coordinates[:, 0]
        self.y_d = x * (1 - x) if y_d is None else np.asarray(y_d, float)
        self.b0 = np.ones(self.state_space.dim) if b0 is None else np.asarray(b0, float)
        self.system = SemilinearSystem(
            self.state_space, self.linear_operator, self._rhs, Convection1D(self.state_space)
        )

    def _linear_part(self, xi):
        return weighted_stiffness(self.state_space, xi.kappa)

    def control_to_rhs(self, u):
        """Dual vector of v -> (B u, v) with B the extension by zero off the subdomain."""
        return self.coupling @ u

    def _rhs(self, u, xi):
        return self.state_space.mass @ xi.b + self.control_to_rhs(u)

    def j1_from_state(self, y):
        d = y - self.y_d
        return 0.5 * float(d @ (self.state_space.mass @ d))

    def dj1_from_state(self, y):
        return self.state_space.mass @ (y - self.y_d)

    def k_apply(self, m):
        return -m[self._ctrl_pos]

    def k_norm(self):
        # restriction from H01 to L2(D0) is bounded by Friedrichs' constant
        s = self.state_space
        rest = sp.csr_matrix((np.ones(len(self._ctrl_pos)),
                              (np.arange(len(self._ctrl_pos)), self._ctrl_pos)),
                             shape=(self.control_space.dim, s.dim))
        a = (rest.T @ self.control_space.mass @ rest).toarray()
        lam = scipy.linalg.eigh(a, s.stiffness.toarray(), eigvals_only=True,
                       subset_by_index=[s.dim - 1, s.dim - 1])[0]
        return float(np.sqrt(lam))

    def zeta1(self, xi):
        return (self.state_space.l2_norm(xi.b) + self._need_r_ad()
                + self.state_space.l2_norm(self.y_d)) / self.kappa_min

    def zeta(self, xi):
        k = self.kappa_min
        z1 = self.zeta1(xi)
        return z1 / k * ((2.0 / k) * z1 * math.exp((3.0 / k) * z1) + 1.0)

    def l1_norm(self, y):
        full = np.zeros(self.state_space.layout.n_nodes)
        full[self.state_space.dofs] = y
        return _l1_norm_p1(self.grid.nodes, full)

    def state_margins(self, u, xi, y):
        s = self.state_space
        lhs = self.kappa_min * s.h01_norm(y)
        rhs = s.l2_norm(xi.b) + self.control_space.l2_norm(u)
        return {"nsburgers": rhs - lhs}

    def adjoint_margins(self, u, xi, y, z):
        s = self.state_space
        kap = float(xi.kappa[0])
        zinf = float(np.max(np.abs(z))) if len(z) else 0.0
        track = s.l2_norm(y - self.y_d)
        linf_bound = 2.0 / kap * math.exp(3.0 / kap * self.l1_norm(y)) * track
        h01_bound = s.l2_norm(y) * zinf + track
        return {
            "sburgers_adjoint": linf_bound - zinf,
            "sburgers_adjoint_prime": h01_bound - kap * s.h01_norm(z),
        }

    def skew_defect(self, y):
        """(y y', y) on the discrete level; zero up to rounding for exact quadrature."""
        return float(self.system.nonlinearity.value(y) @ y)


# --------------------------------------------------------------------------
class DistributedMaxterm(ProblemInstance):
    tag = "distributed_maxterm"

    def __init__(self, n=16, alpha=1e-2, psi=RegularizerSpec.box(0.0, 5.0),
                 dists=Distributions(r=(1.0, 2.0)), newton=NewtonConfig(), r_ad=None, b0=None):
        super().__init__(alpha, psi, dists, newton, r_ad)
        self.n = n
        self.mesh = Mesh2D.unit_square(n)
        self.state_space = assemble_2d(self.mesh, "H1")
        self.control_space = assemble_2d(self.mesh, "L2_domain")
        self.b0 = np.ones(self.state_space.dim) if b0 is None else np.asarray(b0, float)
        self.lumped = self.state_space.lumped_mass
        self.system = SemilinearSystem(
            self.state_space, self.linear_operator, self._rhs, CubicLumped(self.state_space)
        )

    @property
    def r_min(self):
        return self.dists.r[0]

    def _linear_part(self, xi):
        s = self.state_space
        return weighted_stiffness(s, xi.kappa) + weighted_mass(s, xi.g)

    def _smoother(self, xi):
        return self._per_sample("smoother", xi, self._factor_smoother)

    def _factor_smoother(self, xi):
        mat = (weighted_stiffness(self.state_space, xi.r) + self.state_space.mass).tocsc()
        try:
            return spla.splu(mat)
        except RuntimeError as exc:
            raise SingularSystem(str(exc)) from exc

    def btilde_apply(self, xi, f):
        """Solve (r grad w, grad v) + (w, v) = <f, v> for w."""
        f = np.asarray(f, float)
        if not np.any(f):
            return np.zeros_like(f)
        return self._smoother(xi).solve(f)

    def btilde_adjoint_apply(self, xi, f):
        # the smoother's matrix is symmetric
        return self.btilde_apply(xi, f)

    def control_to_rhs(self, u, xi):
        m = self.state_space.mass
        return m @ self.btilde_apply(xi, self.control_space.mass @ u)

    def _rhs(self, u, xi):
        return self.control_to_rhs(u, xi) + self.state_space.mass @ xi.b

    def j1_from_state(self, y):
        p = np.maximum(0.0, 1.0 - y)
        return 0.5 * float(self.lumped @ (p * p))

    def dj1_from_state(self, y):
        return -self.lumped * np.maximum(0.0, 1.0 - y)

    def m_from_adjoint(self, xi, z):
        return self.btilde_adjoint_apply(xi, self.state_space.mass @ z)

    def k_apply(self, m):
        return -np.asarray(m)

    def k_norm(self):
        return 1.0  # ||v||_L2 <= ||v||_H1

    def zeta(self, xi):
        m = self.coercivity
        one = math.sqrt(self.lumped.sum())
        bn = self.state_space.l2_norm(xi.b)
        return (one + (bn + self._need_r_ad() / min(self.r_min, 1.0)) / m) / m

    def state_margins(self, u, xi, y):
        s = self.state_space
        f = self.control_space.mass @ u
        w = self.btilde_apply(xi, f)
        smoother = s.dual_norm(f) - min(self.r_min, 1.0) * s.h1_norm(w)
        state = s.dual_norm(s.mass @ (w + xi.b)) - self.coercivity * s.h1_norm(y)
        return {"sese_h1_state_smoother": smoother, "sese_h1_state": state}

    def adjoint_margins(self, u, xi, y, z):
        s = self.state_space
        one = math.sqrt(self.lumped.sum())
        return {"sese_h1_adjoint": one + s.h1_norm(y) - self.coercivity * s.h1_norm(z)}


# --------------------------------------------------------------------------
class AppendixInfcompact(ProblemInstance):
    tag = "appendix_infcompact"

    def __init__(self, n=16, alpha=1.0, psi=RegularizerSpec.ball(2.0),
                 dists=Distributions(kappa=(1.0, 2.0)), newton=NewtonConfig(), r_ad=None):
        super().__init__(alpha, psi, dists, newton, r_ad)
        self.n = n
        self.mesh = Mesh2D.unit_square(n)
        self.state_space = assemble_2d(self.mesh, "H01")
        self.control_space = assemble_2d(self.mesh, "L2_domain")
        lay = self.state_space.layout
        full_m = lay.assemble(lay.local_mass)
        self.coupling = full_m[self.state_space.dofs][:, self.control_space.dofs].tocsr()
        pos = np.full(lay.n_nodes, -1)
        pos[self.control_space.dofs] = np.arange(self.control_space.dim)
        self._state_pos = pos[self.state_space.dofs]
        self.b0 = np.zeros(self.state_space.dim)
        self.system = SemilinearSystem(
            self.state_space, self.linear_operator, self._rhs, CubicLumped(self.state_space)
        )

    @property
    def coercivity(self):
        return self.kappa_min

    @functools.cached_property
    def c_d(self):
        return friedrichs_constant(self.state_space)

    def _linear_part(self, xi):
        return weighted_stiffness(self.state_space, xi.kappa)

    def control_to_rhs(self, u):
        return self.coupling @ u

    def _rhs(self, u, xi):
        return self.control_to_rhs(u)

    def j1_from_state(self, y):
        return 0.5 * float(y @ (self.state_space.mass @ y))

    def dj1_from_state(self, y):
        return self.state_space.mass @ y

    def k_apply(self, m):
        out = np.zeros(self.control_space.dim)
        out[self._state_pos] = -np.asarray(m)
        return out

    def k_norm(self):
        return self.c_d

    def zeta(self, xi):
        # adjoint and state estimates chained: ||z|| <= C_D/k ||y||_L2 <= C_D^3/k^2 ||u||
        return self.c_d**3 / self.kappa_min**2 * self._need_r_ad()

    @property
    def eps_max(self):
        return (self.c_d**2 / self.kappa_min) ** 2 + self.alpha

    def state_margins(self, u, xi, y):
        lhs = self.state_space.h01_norm(y)
        rhs = self.c_d / self.kappa_min * self.control_space.l2_norm(u)
        return {"intro_stateequation": rhs - lhs}

    def adjoint_margins(self, u, xi, y, z):
        s = self.state_space
        return {"adjoint_h01": self.c_d / self.kappa_min * s.l2_norm(y) - s.h01_norm(z)}


PROBLEMS = {
    cls.tag: cls for cls in (BoundarySemilinear, Burgers, DistributedMaxterm, AppendixInfcompact)
}


def make_problem(tag, **kwargs) -> ProblemInstance:
    try:
        cls = PROBLEMS[tag]
    except KeyError:
        raise UnknownProblemTag(f"unknown problem tag {tag!r}") from None
    return cls(**kwargs)


def adjoint_linfty_bound_burgers(p: Burgers, u, xi, y, z) -> dict:
    """Margins of the L-infinity and H01 adjoint estimates for Burgers."""
    return p.adjoint_margins(u, xi, y, z)
