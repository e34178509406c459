import csv
import json
import subprocess
import sys

import pytest
from hypothesis import given, settings, strategies as st

from saapde import config as cfgmod
from saapde.cli import GRADCHECK_COLUMNS, apply_overrides, main
from saapde.errors import ConfigError


def write(tmp_path, text, name="c.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run(tmp_path, command, text, *extra):
    return main([command, "--config", write(tmp_path, text), "--out", str(tmp_path / "out"), *extra])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---- config ---------------------------------------------------------------
def test_defaults_and_problem_defaults():
    cfg = cfgmod.parse('problem = "burgers"')
    p = cfg.build_problem()
    assert p.n == 63 and p.alpha == 1e-2 and p.psi.kind == "ball" and p.psi.radius == 2.0
    assert cfg.seeds == tuple(range(20)) and cfg.n_list == (10, 100, 1000)


@pytest.mark.parametrize("text, msg", [
    ('problem = "burgers"\ncolour = 1', "unknown key"),
    ('problem = "burgers"\n[optimizer]\nstepsize = 1', "unknown key"),
    ('problem = "heat"', "unknown problem"),
    ('problem = "burgers"\nalpha = 0.0', "alpha"),
    ('problem = "burgers"\nalpha = -1', "alpha"),
    ('problem = "burgers"\nn = "big"', "integer"),
    ('problem = "burgers"\nn_list = [100, 10]', "increasing"),
    ('problem = "burgers"\nseeds = []', "seeds"),
    ('problem = "burgers"\n[model]\nsupport = "finite"', "support"),
    ('problem = "burgers"\n[model]\nn_atoms = 2\nweights = [0.7, 0.7]', "weights"),
    ('problem = "burgers"\n[regularizer]\nkind = "ball"', "radius"),
    ('problem = "burgers"\n[distributions]\nkappa = [2.0, 1.0]', "kappa"),
    ('problem = "burgers"\n[optimizer]\nbacktrack = 1.5', "backtrack"),
    ('alpha = 1.0', "problem"),
    ('problem = ', "parse"),
])
def test_rejections(text, msg):
    with pytest.raises(ConfigError, match=msg):
        cfgmod.parse(text)


def test_round_trip_and_json():
    text = """
problem = "distributed_maxterm"
n = 6
alpha = 0.05
seeds = [3, 4]
n_list = [5, 50]
[regularizer]
kind = "box"
lo = 0.0
hi = 2.0
[distributions]
r = [1.0, 3.0]
[model]
n_atoms = 2
weights = [0.25, 0.75]
[bounds]
kappa_min_bound = 0.5
"""
    cfg = cfgmod.parse(text)
    again = cfgmod.parse(cfgmod.dumps(cfg))
    assert again == cfg and cfgmod.dumps(again) == cfgmod.dumps(cfg)
    assert cfgmod.parse(json.dumps(cfg.to_dict()), "json") == cfg
    p = cfg.build_problem()
    assert p.alpha == 0.05 and p.dists.r == (1.0, 3.0) and p.psi.hi == 2.0
    assert cfg.build_model(p).weights == (0.25, 0.75)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(sorted(cfgmod.PROBLEMS)),
       st.floats(1e-4, 1e2), st.lists(st.integers(0, 10**6), min_size=1, max_size=5, unique=True),
       st.integers(1, 8), st.floats(1e-12, 1e-3))
def test_round_trip_property(problem, alpha, seeds, threads, tol):
    cfg = cfgmod.from_dict({"problem": problem, "alpha": alpha, "seeds": seeds, "threads": threads,
                            "optimizer": {"fixpoint_tol": tol}})
    assert cfgmod.parse(cfgmod.dumps(cfg)) == cfg


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        cfgmod.load(tmp_path / "nope.toml")


def test_seed_override_shifts_seed_list():
    cfg = cfgmod.parse('problem = "burgers"\nseeds = [0, 1, 2]')
    new = apply_overrides(cfg, seed=10, threads=2)
    assert new.seed == 10 and new.seeds == (10, 11, 12) and new.threads == 2
    with pytest.raises(ConfigError):
        apply_overrides(cfg, threads=0)


# ---- commands -------------------------------------------------------------
def test_bad_alpha_exit_3(tmp_path):
    assert run(tmp_path, "gradcheck", 'problem = "burgers"\nalpha = 0.0') == 3
    assert not (tmp_path / "out").exists()


def test_gradcheck(tmp_path):
    text = 'problem = "burgers"\nn = 31\n[gradcheck]\npoints = 2\ndirections = 3'
    assert run(tmp_path, "gradcheck", text) == 0
    rows = read_csv(tmp_path / "out" / "gradcheck.csv")
    assert rows[0] == GRADCHECK_COLUMNS and len(rows) == 7
    assert max(float(r[4]) for r in rows[1:]) <= 1e-5
    # an impossible tolerance is an assertion failure
    assert run(tmp_path, "gradcheck", text + "\ntol = 1e-30") == 1


def test_gradcheck_zero_objective(tmp_path):
    # at u = 0 the appendix J1 is an even quadratic in u: both sides vanish
    text = 'problem = "appendix_infcompact"\nn = 6\n[gradcheck]\npoints = 1\ndirections = 3\nradius = 0.0'
    assert run(tmp_path, "gradcheck", text) == 0
    rows = read_csv(tmp_path / "out" / "gradcheck.csv")[1:]
    assert all(float(r[2]) == float(r[3]) == float(r[4]) == 0.0 for r in rows)


def test_bounds_and_miscalibrated_kappa(tmp_path, capsys):
    text = 'problem = "appendix_infcompact"\nn = 6\n[bounds]\ncases = 20'
    assert run(tmp_path, "bounds", text) == 0
    rows = read_csv(tmp_path / "out" / "bounds.csv")
    assert rows[0] == ["case", "u_norm", "intro_stateequation", "adjoint_h01", "envelope"]
    assert len(rows) == 21
    capsys.readouterr()
    assert run(tmp_path, "bounds", text + "\nkappa_min_bound = 50.0") == 1
    assert "FAIL" in capsys.readouterr().out


def test_appendix_command(tmp_path, capsys):
    base = 'problem = "appendix_infcompact"\nn = 6\n[appendix]\nsamples = 10\n'
    assert run(tmp_path, "appendix", base) == 0
    rep = json.loads((tmp_path / "out" / "appendix.json").read_text())
    assert rep["radius"] == pytest.approx(2**0.5, abs=1e-12)
    assert run(tmp_path, "appendix", base + "eps = 10.0") == 3
    assert run(tmp_path, "appendix", 'problem = "burgers"') == 3
    assert run(tmp_path, "appendix", base + "[bounds]\nkappa_min_bound = 1.0") == 0


def test_consistency_single_atom_exit_0(tmp_path, capsys):
    text = """problem = "boundary_semilinear"
n = 4
seeds = [0, 1]
n_list = [2, 8]
[model]
n_atoms = 1
"""
    assert run(tmp_path, "consistency", text) == 0
    assert "flat at zero" in capsys.readouterr().out
    summary = json.loads((tmp_path / "out" / "consistency_summary.json").read_text())
    assert summary["flat_at_zero"] and summary["n_rows"] == 4
    rows = read_csv(tmp_path / "out" / "consistency.csv")
    assert rows[0][:3] == ["N", "seed", "theta_hat"] and len(rows) == 5


def test_consistency_single_n_warns(tmp_path, capsys):
    text = 'problem = "boundary_semilinear"\nn = 4\nseeds = [0]\nn_list = [3]\n'
    assert run(tmp_path, "consistency", text) == 0
    assert "warning" in capsys.readouterr().out


def test_consistency_needs_finite_model(tmp_path):
    assert run(tmp_path, "consistency", 'problem = "boundary_semilinear"\n[model]\nsupport = "continuous"') == 3


def test_solve_outputs_and_seed_replay(tmp_path):
    text = 'problem = "boundary_semilinear"\nn = 4\n[solve]\nn = 6\n'
    assert run(tmp_path, "solve", text, "--seed", "3") == 0
    out = tmp_path / "out"
    ctrl, state = read_csv(out / "solve_control.csv"), read_csv(out / "solve_state.csv")
    assert ctrl[0] == ["dof", "x1", "x2", "u"] and state[0] == ["dof", "x1", "x2", "y", "z"]
    first = json.loads((out / "solve_summary.json").read_text())
    assert first["seed"] == 3 and first["fixpoint_residual"] <= 1e-8 and first["feasible"]
    assert run(tmp_path, "solve", text, "--seed", "3") == 0
    assert json.loads((out / "solve_summary.json").read_text())["value"] == first["value"]
    assert read_csv(out / "solve_control.csv") == ctrl


def test_solver_failure_exit_2(tmp_path):
    text = 'problem = "boundary_semilinear"\nn = 4\n[newton]\nmax_iter = 1\n[solve]\nn = 2\n'
    assert run(tmp_path, "solve", text) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "saapde.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "--config" in proc.stdout
