"""Sample average objectives, exact references on finite support, and experiments.

Within one objective evaluation every distinct sample object is solved once
(finite-support batches repeat atoms many times); the per-sample results are
then reduced in batch order, so the sum never depends on evaluation order.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SaaPdeError, SampleSolveError, ViolationFound
from .prox_opt import OptimizeResult, OptimizerConfig, fixpoint_residual, minimize
from .random_inputs import SampleStream, exact_expectation, ordered_mean

log = logging.getLogger(__name__)


def _warm_solver(problem):
    """Copy of ``problem`` whose Newton solves end with one polishing step."""
    return problem.with_newton(replace(problem.newton, polish=max(problem.newton.polish, 1)))


def _evaluate_unique(problem, u, samples, gradient=True, threads=1, warm=None):
    """Evaluate each distinct sample once; returns a list aligned with ``samples``.

    ``warm`` maps sample ids to ``(sample, state)``: Newton starts from the
    stored state and the dict is refreshed with the new ones.
    """
    uniq = {}
    order = []
    for i, s in enumerate(samples):
        if id(s) not in uniq:
            uniq[id(s)] = (i, s)
            order.append(id(s))

    def run(key):
        i, s = uniq[key]
        y0 = None
        if warm is not None:
            hit = warm.get(key)
            y0 = hit[1] if hit is not None and hit[0] is s else None
        try:
            ev = problem.evaluate(u, s, gradient=gradient, y0=y0)
            if warm is not None:
                warm[key] = (s, ev.y)
            return ev
        except SaaPdeError as exc:
            raise SampleSolveError(i + 1, exc) from exc

    if threads > 1 and len(order) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = dict(zip(order, pool.map(run, order)))
    else:
        results = {k: run(k) for k in order}
    return [results[id(s)] for s in samples]


@dataclass(eq=False)
class SaaProblem:
    problem: object
    batch: list
    threads: int = 1
    warm_start: bool = False

    def __post_init__(self):
        if len(self.batch) < 1:
            raise ValueError("an SAA problem needs at least one sample")
        self._warm = {} if self.warm_start else None
        self._solver = _warm_solver(self.problem) if self.warm_start else self.problem

    @property
    def n(self):
        return len(self.batch)

    @property
    def alpha(self):
        return self.problem.alpha

    def _evals(self, u, gradient=True):
        return _evaluate_unique(self._solver, u, self.batch, gradient, self.threads, self._warm)

    def f1(self, u) -> float:
        return ordered_mean([e.value for e in self._evals(u, gradient=False)])

    def f1_and_grad(self, u):
        ev = self._evals(u)
        return ordered_mean([e.value for e in ev]), ordered_mean([e.gradient for e in ev])

    def smooth(self, u):
        """Smooth part F1 + (alpha/2)||u||^2 and its gradient."""
        f1, g1 = self.f1_and_grad(u)
        p = self.problem
        return f1 + 0.5 * p.alpha * p.control_norm(u) ** 2, g1 + p.alpha * np.asarray(u)

    def value_and_grad(self, u):
        """Full objective (inf outside the feasible set) and the smooth-part gradient."""
        f, g = self.smooth(u)
        return f + self.problem.psi_value(u), g

    def value(self, u) -> float:
        p = self.problem
        return self.f1(u) + p.psi_value(u) + 0.5 * p.alpha * p.control_norm(u) ** 2

    def mean_m(self, u):
        return ordered_mean([e.m for e in self._evals(u)])

    def mean_zeta(self) -> float:
        cache = {}
        vals = []
        for s in self.batch:
            if id(s) not in cache:
                cache[id(s)] = self.problem.zeta(s)
            vals.append(cache[id(s)])
        return ordered_mean(vals)


@dataclass(eq=False)
class ExactProblem:
    problem: object
    model: object
    threads: int = 1
    warm_start: bool = False

    def __post_init__(self):
        if self.model.support_kind != "finite_atoms":
            raise ValueError("exact problems need a finite-support model")
        self._warm = {} if self.warm_start else None
        self._solver = _warm_solver(self.problem) if self.warm_start else self.problem

    @property
    def alpha(self):
        return self.problem.alpha

    def _evals(self, u, gradient=True):
        return _evaluate_unique(self._solver, u, list(self.model.atoms), gradient, self.threads,
                                self._warm)

    def _weighted(self, values):
        total = None
        for w, v in zip(self.model.weights, values):
            total = w * v if total is None else total + w * v
        return total

    def f1(self, u) -> float:
        return self._weighted([e.value for e in self._evals(u, gradient=False)])

    def f1_and_grad(self, u):
        ev = self._evals(u)
        return self._weighted([e.value for e in ev]), self._weighted([e.gradient for e in ev])

    def smooth(self, u):
        f1, g1 = self.f1_and_grad(u)
        p = self.problem
        return f1 + 0.5 * p.alpha * p.control_norm(u) ** 2, g1 + p.alpha * np.asarray(u)

    def value_and_grad(self, u):
        f, g = self.smooth(u)
        return f + self.problem.psi_value(u), g

    def value(self, u) -> float:
        p = self.problem
        return self.f1(u) + p.psi_value(u) + 0.5 * p.alpha * p.control_norm(u) ** 2

    def mean_m(self, u):
        return self._weighted([e.m for e in self._evals(u)])

    def expected_zeta(self) -> float:
        return exact_expectation(self.model, self.problem.zeta)


def saa_value_and_grad(s: SaaProblem, u):
    return s.value_and_grad(u)


def exact_value_and_grad(e: ExactProblem, u):
    return e.value_and_grad(u)


def default_starts(obj, problem, extra=()):
    """Zero (projected), one prox-gradient fixed-point map from it, and ``extra``."""
    u0 = problem.feasible_reference_control()
    _, g1 = obj.f1_and_grad(u0)
    u1 = problem.prox(-g1 / problem.alpha)
    return [u0, u1, *extra]


def multistart_minimize(obj, starts, cfg: OptimizerConfig = OptimizerConfig(), trace_path=None):
    """Best (lowest value) converged result over the given starts."""
    best = None
    for k, u0 in enumerate(starts):
        tp = None if trace_path is None else f"{trace_path}.start{k}.csv"
        res = minimize(obj.problem, obj.smooth, obj.problem.prox, cfg, u0=u0, trace_path=tp)
        if best is None or (res.converged, -res.value) > (best.converged, -best.value):
            best = res
    return best


def solve_reference(e: ExactProblem, cfg: OptimizerConfig = OptimizerConfig(), starts=None,
                    trace_path=None) -> OptimizeResult:
    """Optimal value and a solution of the exact (finite-support) problem."""
    if starts is None:
        starts = default_starts(e, e.problem)
    return multistart_minimize(e, starts, cfg, trace_path)


def solve_saa(s: SaaProblem, cfg: OptimizerConfig = OptimizerConfig(), starts=None,
              trace_path=None) -> OptimizeResult:
    if starts is None:
        starts = default_starts(s, s.problem)
    return multistart_minimize(s, starts, cfg, trace_path)


# --------------------------------------------------------------------------
@dataclass
class VadEnvelope:
    """Sublevel-type set {u feasible: (alpha/2)||u||^2 <= E[J(u0)] + rho} and a covering ball."""

    u0: np.ndarray
    rho: float
    bound: float
    r_ad: float
    alpha: float

    @property
    def radius(self) -> float:
        """Radius of the ball cut out by the quadratic inequality."""
        return math.sqrt(2.0 * self.bound / self.alpha)


def build_envelope(e: ExactProblem, rho=1.0, u0=None, margin=0.01) -> VadEnvelope:
    """Envelope from the exact expectation of the full objective at ``u0``.

    The covering radius is 1% above the smaller of the quadratic-bound radius
    and the radius of a ball-shaped feasible set.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    p = e.problem
    u0 = p.feasible_reference_control() if u0 is None else np.asarray(u0, float)
    bound = e.value(u0) + rho
    if not math.isfinite(bound):
        raise ValueError("u0 must be feasible")
    radius = math.sqrt(2.0 * bound / p.alpha)
    if p.psi.kind == "ball":
        radius = min(radius, p.psi.radius)
    return VadEnvelope(u0, float(rho), float(bound), (1.0 + margin) * radius, p.alpha)


def vad_membership(env: VadEnvelope, u, problem) -> bool:
    if problem.psi_value(u) != 0.0:
        return False
    return 0.5 * env.alpha * problem.control_norm(u) ** 2 <= env.bound


def wad_bound_check(s: SaaProblem, u_star, env: VadEnvelope, rho, expected_zeta, tol=1e-8) -> dict:
    """Margins of the chain ||mean M(u*)|| <= mean zeta <= E[zeta] + rho and the fixed-point test."""
    p = s.problem
    mz = s.mean_zeta()
    m_mean = s.mean_m(u_star)
    _, g1 = s.f1_and_grad(u_star)
    res = fixpoint_residual(p, g1, u_star)
    return {
        "lln_margin": expected_zeta + rho - mz,
        "envelope_margin": mz - p.m_norm(m_mean),
        "fixpoint_residual": res,
        "reproduces": res <= tol,
    }


def envelope_chain_margin(s: SaaProblem, u) -> float:
    """C_K * mean zeta - ||grad F1_N(u)||; nonnegative inside the covering ball."""
    p = s.problem
    _, g1 = s.f1_and_grad(u)
    return p.k_norm() * s.mean_zeta() - p.control_norm(g1)


# --------------------------------------------------------------------------
@dataclass
class ConsistencyRow:
    N: int
    seed: int
    theta_hat: float
    abs_value_error: float
    solution_distance: float
    fixpoint_residual: float
    wall_time: float
    converged: bool
    in_vad: bool
    flag: str = ""


@dataclass
class ConsistencyReport:
    rows: list
    reference_value: float
    reference_solution: np.ndarray
    reference_residual: float
    tolerance: float
    alpha: float = 1.0
    summary: dict = field(default_factory=dict)

    def resolution(self):
        """Error levels the solver cannot resolve: rounding for values, tol/alpha for points."""
        value_floor = 64 * np.finfo(float).eps * max(1.0, abs(self.reference_value))
        return value_floor, self.tolerance / self.alpha

    def medians(self):
        out = {}
        for n in sorted({r.N for r in self.rows}):
            sel = [r for r in self.rows if r.N == n and not r.flag]
            out[n] = {
                "median_abs_value_error": float(np.median([r.abs_value_error for r in sel])) if sel else math.nan,
                "median_solution_distance": float(np.median([r.solution_distance for r in sel])) if sel else math.nan,
                "count": len(sel),
            }
        return out

    def write_csv(self, path):
        cols = list(ConsistencyRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([getattr(r, c) if not isinstance(getattr(r, c), float)
                            else repr(getattr(r, c)) for c in cols])

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary, fh, indent=2, sort_keys=True)


def _strictly_decreasing(vals):
    return all(b < a for a, b in zip(vals, vals[1:]))


def summarize(report: ConsistencyReport, ratio=1.0 / 3.0) -> dict:
    med = report.medians()
    ns = sorted(med)
    ve = [med[n]["median_abs_value_error"] for n in ns]
    sd = [med[n]["median_solution_distance"] for n in ns]
    summary = {
        "reference_value": report.reference_value,
        "reference_fixpoint_residual": report.reference_residual,
        "medians": {str(n): med[n] for n in ns},
        "n_rows": len(report.rows),
        "n_flagged": sum(1 for r in report.rows if r.flag),
        "max_fixpoint_residual": max((r.fixpoint_residual for r in report.rows), default=0.0),
    }
    value_floor, dist_floor = report.resolution()
    flat = all(v <= value_floor for v in ve) and all(d <= dist_floor for d in sd)
    summary["flat_at_zero"] = flat
    if flat:
        # e.g. a single atom: every SAA problem is the exact one, no trend to see
        summary["trend_checked"] = False
        summary["trend_ok"] = True
    elif len(ns) < 2:
        summary["trend_checked"] = False
        summary["warning"] = "fewer than two sample sizes; trend check skipped"
        summary["trend_ok"] = True
    else:
        summary["trend_checked"] = True
        summary["value_error_decreasing"] = _strictly_decreasing(ve)
        summary["solution_distance_decreasing"] = _strictly_decreasing(sd)
        summary["value_error_ratio"] = ve[-1] / ve[0] if ve[0] > 0 else 0.0
        summary["ratio_ok"] = ve[-1] <= ratio * ve[0]
        summary["trend_ok"] = bool(summary["value_error_decreasing"]
                                   and summary["solution_distance_decreasing"]
                                   and summary["ratio_ok"])
    report.summary = summary
    return summary


def run_consistency(e: ExactProblem, n_list, seeds, cfg: OptimizerConfig = OptimizerConfig(),
                    reference: OptimizeResult | None = None, env: VadEnvelope | None = None,
                    progress=None) -> ConsistencyReport:
    """SAA solves over sample sizes and seeds; batches of one seed are nested prefixes."""
    n_list = [int(n) for n in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("sample sizes must be strictly increasing")
    p = e.problem
    if reference is None:
        reference = solve_reference(e, cfg)
    u_ref = reference.u_star
    rows = []
    for seed in seeds:
        stream = SampleStream(e.model, int(seed))
        full = stream.batch(max(n_list))
        for n in n_list:
            t0 = time.perf_counter()
            s = SaaProblem(p, full[:n], e.threads, warm_start=True)
            try:
                res = solve_saa(s, cfg, starts=default_starts(s, p, extra=(u_ref,)))
                flag = "" if res.converged else "not_converged"
                row = ConsistencyRow(
                    n, int(seed), res.value, abs(res.value - reference.value),
                    p.control_norm(res.u_star - u_ref), res.fixpoint_residual,
                    time.perf_counter() - t0, res.converged,
                    vad_membership(env, res.u_star, p) if env is not None else True, flag)
            except SaaPdeError as exc:
                row = ConsistencyRow(n, int(seed), math.nan, math.nan, math.nan, math.nan,
                                     time.perf_counter() - t0, False, False, f"solver_failure: {exc}")
            rows.append(row)
            if progress:
                progress(row)
    report = ConsistencyReport(rows, reference.value, u_ref, reference.fixpoint_residual,
                               cfg.fixpoint_tol, p.alpha)
    summarize(report)
    return report


# --------------------------------------------------------------------------
def zeta_lln_check(e: ExactProblem, n_list, seeds) -> dict:
    """Per N: max and median over seeds of |mean zeta - E[zeta]|."""
    p = e.problem
    exact = e.expected_zeta()
    zcache = {id(a): p.zeta(a) for a in e.model.atoms}
    out = {"expected_zeta": exact, "per_n": {}}
    for n in n_list:
        errs = []
        for seed in seeds:
            batch = SampleStream(e.model, int(seed)).batch(int(n))
            errs.append(abs(ordered_mean([zcache[id(s)] for s in batch]) - exact))
        out["per_n"][int(n)] = {"max_error": float(max(errs)), "median_error": float(np.median(errs)),
                                "max_relative_error": float(max(errs) / exact) if exact else 0.0}
    meds = [out["per_n"][int(n)]["median_error"] for n in n_list]
    out["decreasing"] = meds[-1] < meds[0] if len(meds) > 1 else True
    return out


def uniform_error_probe(e: ExactProblem, n_list, seeds, probes) -> dict:
    """Max over probe controls of |F_N - F| (F1 parts only; the rest cancels), medians over seeds."""
    p = e.problem
    atoms = list(e.model.atoms)
    table = np.array([[p.objective_j1(u, a) for a in atoms] for u in probes])
    exact = table @ np.asarray(e.model.weights)
    pos = {id(a): k for k, a in enumerate(atoms)}
    out = {}
    for n in n_list:
        sup = []
        for seed in seeds:
            batch = SampleStream(e.model, int(seed)).batch(int(n))
            idx = [pos[id(s)] for s in batch]
            saa = np.array([ordered_mean([row[k] for k in idx]) for row in table])
            sup.append(float(np.max(np.abs(saa - exact))))
        out[int(n)] = float(np.median(sup))
    return out


def appendix_epsilon_check(problem, model, n, seed, eps, n_samples=100, rng_seed=0) -> dict:
    """Sample controls on and inside the V_eps ball and check F_N(u) <= eps."""
    eps_max = problem.eps_max
    if not 0 < eps <= eps_max:
        raise ValueError(f"eps must lie in (0, eps_max = {eps_max!r}]")
    radius = math.sqrt(2.0 * eps / eps_max)
    s = SaaProblem(problem, SampleStream(model, int(seed)).batch(int(n)))
    rng = np.random.default_rng([rng_seed, int(seed)])
    worst = -math.inf
    worst_u = None
    zero_value = s.value(np.zeros(problem.control_space.dim))
    values = []
    for k in range(2 * n_samples):
        u = rng.standard_normal(problem.control_space.dim)
        u *= radius / problem.control_norm(u)
        if k >= n_samples:
            u *= rng.uniform(0.0, 1.0)
        val = s.value(u)
        values.append(val)
        if val > worst:
            worst, worst_u = val, u
        if val > eps:
            raise ViolationFound(f"F_N(u) = {val!r} exceeds eps = {eps!r}", control=u, value=val)
    return {
        "eps": eps,
        "eps_max": eps_max,
        "c_d": problem.c_d,
        "radius": radius,
        "n": int(n),
        "zero_value": zero_value,
        "max_value": worst,
        "n_checked": len(values),
        "worst_control_norm": problem.control_norm(worst_u),
    }


# --------------------------------------------------------------------------
def random_feasible_control(problem, rng, radius):
    """Random direction scaled to a norm uniform in [0, radius], then projected."""
    d = rng.standard_normal(problem.control_space.dim)
    d *= rng.uniform(0.0, radius) / problem.control_norm(d)
    return problem.prox(d)


def gradient_check(problem, model, n_points=3, n_dirs=10, step=1e-5, seed=0, radius=1.0):
    """Central differences of J1(., xi) against the adjoint gradient.

    Each point pairs a random feasible control with one draw of ``model``;
    directions have unit control norm. Returns one row per (point, direction).
    """
    stream = SampleStream(model, int(seed))
    rows = []
    for k in range(n_points):
        rng = np.random.default_rng([int(seed), k, 17])
        xi = stream.draw(k + 1)
        u = random_feasible_control(problem, rng, radius)
        g = problem.gradient_j1(u, xi)
        for j in range(n_dirs):
            d = rng.standard_normal(problem.control_space.dim)
            d /= problem.control_norm(d)
            fd = (problem.objective_j1(u + step * d, xi)
                  - problem.objective_j1(u - step * d, xi)) / (2 * step)
            ad = problem.control_space.inner(g, d)
            rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-300)
            rows.append({"point": k, "direction": j, "fd_value": fd, "adjoint_value": ad,
                         "rel_error": rel})
    return rows


def stability_sweep(problem, model, n_cases=1000, seed=0, radius=None):
    """Stability and envelope margins at random (u, xi) with ||u|| <= radius.

    ``radius`` defaults to the problem's R_ad. Every row carries the margins of
    the state and adjoint estimates and ``envelope`` = zeta(xi) - ||M(u, xi)||.
    """
    radius = problem._need_r_ad() if radius is None else float(radius)
    stream = SampleStream(model, int(seed))
    rows = []
    for i in range(1, n_cases + 1):
        rng = np.random.default_rng([int(seed), i, 23])
        xi = stream.draw(i)
        u = random_feasible_control(problem, rng, radius)
        ev = problem.evaluate(u, xi)
        row = {"case": i, "u_norm": problem.control_norm(u)}
        row.update(problem.state_margins(u, xi, ev.y))
        row.update(problem.adjoint_margins(u, xi, ev.y, ev.z))
        row["envelope"] = problem.zeta(xi) - problem.m_norm(ev.m)
        rows.append(row)
    return rows


def margin_columns(rows):
    return [k for k in rows[0] if k not in ("case", "u_norm")] if rows else []
