import functools
import math

import numpy as np
import pytest

from saapde.errors import SampleSolveError, ViolationFound
from saapde.pde_solvers import NewtonConfig
from saapde.problems import make_problem
from saapde.prox_opt import OptimizerConfig
from saapde.random_inputs import RandomModel, SampleStream, ordered_mean
from saapde.saa_engine import (
    ExactProblem,
    SaaProblem,
    appendix_epsilon_check,
    build_envelope,
    envelope_chain_margin,
    exact_value_and_grad,
    run_consistency,
    saa_value_and_grad,
    solve_reference,
    solve_saa,
    summarize,
    uniform_error_probe,
    vad_membership,
    wad_bound_check,
    zeta_lln_check,
)

CFG = OptimizerConfig()


@functools.lru_cache(maxsize=None)
def tiny():
    """4x4 boundary problem, 5-atom model, covering radius from its envelope."""
    p = make_problem("boundary_semilinear", n=4)
    model = p.make_model()
    env = build_envelope(ExactProblem(p, model))
    return p.with_envelope(env.r_ad), model, env


@functools.lru_cache(maxsize=None)
def tiny_reference():
    p, model, _ = tiny()
    return solve_reference(ExactProblem(p, model), CFG)


def single(model, k=0):
    return RandomModel.from_atoms(model.dists, model.layout, [model.atoms[k]], [1.0])


def controls(p, count, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal(p.control_space.dim) * scale for _ in range(count)]


def test_n1_equals_deterministic_problem():
    p, model, _ = tiny()
    xi = model.atoms[2]
    for u in controls(p, 5):
        v, g = saa_value_and_grad(SaaProblem(p, [xi]), u)
        assert v == p.full_objective(u, xi)
        assert np.array_equal(g, p.gradient_j1(u, xi) + p.alpha * u)


def test_single_atom_exact_equals_saa():
    p, model, _ = tiny()
    one = single(model, 1)
    e = ExactProblem(p, one)
    xi = one.atoms[0]
    for u in controls(p, 20, seed=1):
        ve, ge = exact_value_and_grad(e, u)
        vs, gs = saa_value_and_grad(SaaProblem(p, [xi]), u)
        assert ve == vs and np.array_equal(ge, gs)
        # larger N: equal to the fixed-order fold of N copies
        j1, g1 = p.objective_j1(u, xi), p.gradient_j1(u, xi)
        s7 = SaaProblem(p, [xi] * 7)
        f7, gr7 = s7.f1_and_grad(u)
        assert f7 == ordered_mean([j1] * 7) and np.array_equal(gr7, ordered_mean([g1] * 7))
        assert f7 == pytest.approx(j1, rel=8 * np.finfo(float).eps)


def test_two_identical_samples_equal_one():
    p, model, _ = tiny()
    xi = model.atoms[0]
    u = controls(p, 1, seed=2)[0]
    v1, g1 = SaaProblem(p, [xi]).value_and_grad(u)
    v2, g2 = SaaProblem(p, [xi, xi]).value_and_grad(u)
    assert v1 == v2 and np.array_equal(g1, g2)


def test_two_equal_weight_atoms():
    p, model, _ = tiny()
    a, b = model.atoms[:2]
    e = ExactProblem(p, RandomModel.from_atoms(model.dists, model.layout, [a, b], [0.5, 0.5]))
    u = controls(p, 1, seed=3)[0]
    assert e.f1(u) == pytest.approx(0.5 * (p.objective_j1(u, a) + p.objective_j1(u, b)), rel=1e-15)


def test_infeasible_value_is_inf_with_gradient():
    p = make_problem("burgers", n=15)
    xi = p.make_model().atoms[0]
    u = np.full(p.control_space.dim, 10.0)
    v, g = SaaProblem(p, [xi]).value_and_grad(u)
    assert v == math.inf and np.all(np.isfinite(g))


def test_threads_bitwise_equal():
    p, model, _ = tiny()
    batch = SampleStream(model, 3).batch(40)
    u = controls(p, 1, seed=4)[0]
    a = SaaProblem(p, batch).value_and_grad(u)
    b = SaaProblem(p, batch, threads=4).value_and_grad(u)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_warm_start_matches_cold():
    p, model, _ = tiny()
    batch = SampleStream(model, 5).batch(20)
    cold, warm = SaaProblem(p, batch), SaaProblem(p, batch, warm_start=True)
    for u in controls(p, 4, seed=5):
        # cold solves stop anywhere below the Newton residual tolerance
        assert warm.value(u) == pytest.approx(cold.value(u), rel=1e-9)


def test_sample_failure_reports_index():
    p = make_problem("boundary_semilinear", n=4,
                     newton=NewtonConfig(max_iter=1)).with_envelope(1.0)
    batch = p.make_model().atoms[:2]
    with pytest.raises(SampleSolveError) as info:
        SaaProblem(p, list(batch)).value(np.full(p.control_space.dim, 50.0))
    assert info.value.index == 1


def test_interchange_finite_differences():
    p, model, _ = tiny()
    e = ExactProblem(p, model)
    rng = np.random.default_rng(6)
    u = rng.standard_normal(p.control_space.dim)
    _, g = e.f1_and_grad(u)
    for _ in range(5):
        d = rng.standard_normal(p.control_space.dim)
        d /= p.control_norm(d)
        fd = (e.f1(u + 1e-5 * d) - e.f1(u - 1e-5 * d)) / 2e-5
        assert fd == pytest.approx(p.control_space.inner(g, d), rel=1e-5)


def test_reference_trivial_and_reference_optimality():
    p, model, _ = tiny()
    ref = tiny_reference()
    assert ref.converged and ref.fixpoint_residual <= 1e-8
    # J1 = 0 with y_d = state of the zero control: u* = 0, value 0
    one = single(model)
    q = make_problem("boundary_semilinear", n=4, y_d=p.state(np.zeros(p.control_space.dim), one.atoms[0]))
    r0 = solve_reference(ExactProblem(q, one), CFG)
    assert r0.value == pytest.approx(0.0, abs=1e-16) and q.control_norm(r0.u_star) <= 1e-8


def test_appendix_reference_is_zero():
    p = make_problem("appendix_infcompact", n=8)
    e = ExactProblem(p, p.make_model())
    ref = solve_reference(e, CFG)
    assert ref.converged
    assert e.value(np.zeros(p.control_space.dim)) == 0.0
    assert ref.value == pytest.approx(0.0, abs=1e-15)


def test_vad_membership_examples():
    p, model, env = tiny()
    assert vad_membership(env, env.u0, p)
    d = controls(p, 1, seed=7)[0]
    d /= p.control_norm(d)
    assert vad_membership(env, d * env.radius * (1 - 1e-12), p)
    assert not vad_membership(env, d * env.radius * (1 + 1e-9), p)
    assert env.r_ad > env.radius


def test_envelope_validation():
    p, model, _ = tiny()
    with pytest.raises(ValueError):
        build_envelope(ExactProblem(p, model), rho=0.0)


def test_wad_single_atom_margin_is_rho():
    p, model, env = tiny()
    one = single(model)
    e = ExactProblem(p, one)
    s = SaaProblem(p, [one.atoms[0]] * 3)
    res = solve_saa(s, CFG)
    chk = wad_bound_check(s, res.u_star, env, 0.5, e.expected_zeta())
    assert chk["lln_margin"] == 0.5
    assert chk["envelope_margin"] >= 0 and chk["reproduces"]


def test_wad_large_n_concentration():
    p, model, env = tiny()
    e = ExactProblem(p, model)
    ez = e.expected_zeta()
    u_ref = tiny_reference().u_star
    ok = 0
    for seed in range(20):
        s = SaaProblem(p, SampleStream(model, seed).batch(10_000))
        res = solve_saa(s, CFG, starts=[u_ref])
        chk = wad_bound_check(s, res.u_star, env, 1.0, ez)
        assert chk["envelope_margin"] >= 0 and chk["reproduces"]
        ok += chk["lln_margin"] >= 0
    assert ok >= 19


def test_zeta_lln():
    p, model, _ = tiny()
    rep1 = zeta_lln_check(ExactProblem(p, single(model)), [10, 1000], range(3))
    # zero up to the rounding of an N-term left fold
    assert all(v["max_relative_error"] <= n * np.finfo(float).eps for n, v in rep1["per_n"].items())
    rep = zeta_lln_check(ExactProblem(p, model), [10, 1000, 10_000], range(20))
    assert rep["per_n"][10_000]["max_relative_error"] <= 0.05
    assert rep["per_n"][1000]["median_error"] < rep["per_n"][10]["median_error"]


def test_envelope_chain():
    p, model, env = tiny()
    s = SaaProblem(p, SampleStream(model, 8).batch(30))
    for u in controls(p, 20, seed=9):
        u *= np.random.default_rng(int(abs(u[0]) * 1e6)).uniform(0, p.r_ad) / p.control_norm(u)
        assert envelope_chain_margin(s, u) >= 0


def test_uniform_error_probe_decreases():
    p, model, env = tiny()
    probes = controls(p, 50, seed=10)
    probes = [u * env.radius / max(p.control_norm(u), env.radius) for u in probes]
    out = uniform_error_probe(ExactProblem(p, model), [10, 100, 1000], range(20), probes)
    assert out[1000] < out[100] < out[10]


def test_consistency_single_atom_flat():
    p, model, env = tiny()
    e = ExactProblem(p, single(model), warm_start=True)
    rep = run_consistency(e, [1, 5, 20], [0, 1], CFG, env=env)
    floor_v, floor_d = rep.resolution()
    assert all(r.abs_value_error <= floor_v and r.solution_distance <= floor_d for r in rep.rows)
    assert rep.summary["flat_at_zero"] and rep.summary["trend_ok"]


def test_consistency_replay_and_outputs(tmp_path):
    p, model, env = tiny()
    ref = tiny_reference()
    runs = [run_consistency(ExactProblem(p, model, warm_start=True), [4, 40], [0, 1], CFG,
                            reference=ref, env=env) for _ in range(2)]
    key = lambda r: (r.N, r.seed, r.theta_hat, r.abs_value_error, r.solution_distance,  # noqa: E731
                     r.fixpoint_residual, r.converged, r.in_vad, r.flag)
    assert [key(r) for r in runs[0].rows] == [key(r) for r in runs[1].rows]
    assert all(r.fixpoint_residual <= CFG.fixpoint_tol for r in runs[0].rows)
    runs[0].write_csv(tmp_path / "c.csv")
    runs[0].write_json(tmp_path / "s.json")
    header = (tmp_path / "c.csv").read_text().splitlines()[0]
    assert header == ("N,seed,theta_hat,abs_value_error,solution_distance,fixpoint_residual,"
                      "wall_time,converged,in_vad,flag")
    with pytest.raises(ValueError):
        run_consistency(ExactProblem(p, model), [10, 5], [0], CFG, reference=ref)


def test_single_n_skips_trend():
    p, model, env = tiny()
    rep = run_consistency(ExactProblem(p, model, warm_start=True), [8], [0], CFG,
                          reference=tiny_reference())
    s = summarize(rep)
    assert not s["trend_checked"] and "warning" in s and s["trend_ok"]


def test_appendix_epsilon_check():
    p = make_problem("appendix_infcompact", n=8)
    model = p.make_model()
    rep = appendix_epsilon_check(p, model, 50, 0, p.eps_max, n_samples=20)
    assert rep["zero_value"] == 0.0 and rep["max_value"] <= p.eps_max
    assert rep["radius"] == pytest.approx(math.sqrt(2), abs=1e-12)
    assert appendix_epsilon_check(p, model, 50, 0, p.eps_max / 2, 5)["radius"] == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        appendix_epsilon_check(p, model, 50, 0, 1.01 * p.eps_max)
    # an overstated kappa_min shrinks eps_max below what the sphere attains
    q = p.with_bound_constants(kappa_min=100.0)
    with pytest.raises(ViolationFound) as info:
        appendix_epsilon_check(q, model, 50, 0, q.eps_max)
    assert info.value.control is not None
