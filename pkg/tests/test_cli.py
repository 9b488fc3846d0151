import json
from pathlib import Path

import numpy as np
import pytest

from poamdp.cli import main
from poamdp.mdp import policy_evaluation
from poamdp.oamdp import oamdp_to_json, random_oamdp
from poamdp.maze import build_problem, parse_grid
from poamdp.problem import build_observer_model

GRIDS = Path(__file__).resolve().parent.parent / "grids"
TOY = str(GRIDS / "toy_legibility.grid")


def run(*argv):
    return main([str(a) for a in argv])


def read(path):
    return Path(path).read_bytes()


def test_solve_outputs(tmp_path, capsys):
    out = tmp_path / "solve"
    assert run("solve", TOY, "--criterion", "legibility", "--out", out) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["bounds.json", "gap_log.csv", "manifest.json", "policy.json"]
    last = read(out / "gap_log.csv").decode().strip().splitlines()[-1].split(",")
    assert float(last[1]) - float(last[2]) <= 1e-3
    manifest = json.loads(read(out / "manifest.json"))
    assert manifest["command"] == "solve"
    assert manifest["config"]["criterion"] == "legibility"
    assert manifest["timing_outputs"] == ["gap_log.csv"]
    assert "converged" in capsys.readouterr().out


def test_naive_and_combined_agree(tmp_path):
    res = {}
    for mode in ("naive", "combined"):
        assert run("solve", TOY, "--init", mode, "--out", tmp_path / mode) == 0
        res[mode] = json.loads(read(tmp_path / mode / "bounds.json"))
    for key in ("lower", "upper"):
        assert abs(res["naive"][key] - res["combined"][key]) <= 2e-3


def test_missing_file(tmp_path, capsys):
    assert run("solve", tmp_path / "nope.grid", "--out", tmp_path / "o") == 2
    assert "error" in capsys.readouterr().err


def test_parse_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.grid"
    bad.write_text("#####\n#S?1#\n#####\n")
    assert run("solve", bad, "--out", tmp_path / "o") == 2
    assert "line 2" in capsys.readouterr().err


def test_invalid_criterion_for_grid(tmp_path):
    # two goals cannot host a predictability criterion
    assert run("solve", TOY, "--criterion", "action-pred", "--out", tmp_path / "o") == 2


def test_bad_flag_value_exits_two(tmp_path):
    with pytest.raises(SystemExit) as err:
        run("solve", TOY, "--init", "clever", "--out", tmp_path / "o")
    assert err.value.code == 2


def test_timeout_exit_code(tmp_path):
    grid = GRIDS / "explicability_main.grid"
    assert run("solve", grid, "--timeout-secs", 0, "--out", tmp_path / "o") == 1
    assert json.loads(read(tmp_path / "o" / "bounds.json"))["complete"] is False


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"gamma": 0.5, "eps_hsvi": 0.01, "init": "naive"}))
    assert run("solve", TOY, "--config", cfg, "--init", "combined", "--out", tmp_path / "o") == 0
    resolved = json.loads(read(tmp_path / "o" / "manifest.json"))["config"]
    assert resolved["gamma"] == 0.5 and resolved["eps_hsvi"] == 0.01 and resolved["init"] == "combined"


def test_evaluate_pi_obs_matches_policy_evaluation(tmp_path):
    # one-goal corridor; at tau = 1e-4 every step-cost gap makes pi_obs deterministic
    grid = tmp_path / "corridor.grid"
    grid.write_text("######\n#S~.1#\n######\n")
    assert run("evaluate", grid, "--policy", "pi-obs", "--tau", 1e-4, "--n-traj", 100, "--out", tmp_path / "e") == 0
    rep = json.loads(read(tmp_path / "e" / "report.json"))
    p = build_problem(parse_grid(grid.read_text()).with_options(tau=1e-4))
    m = build_observer_model(p)
    exact = policy_evaluation(p.base, m.pi_obs, epsilon=1e-13)[p.base.initial_state]
    assert rep["std_error_observer"] == 0.0
    assert rep["mean_return_observer"] == pytest.approx(exact, abs=1e-9)


def test_evaluate_n1_reproducible(tmp_path):
    for k in (1, 2):
        assert run("evaluate", TOY, "--policy", "pi-obs", "--n-traj", 1, "--seed", 5, "--out", tmp_path / f"e{k}") == 0
    assert read(tmp_path / "e1" / "report.json") == read(tmp_path / "e2" / "report.json")


def test_hsvi_artifact_and_mismatch(tmp_path):
    sol = tmp_path / "sol"
    assert run("solve", TOY, "--out", sol) == 0
    assert run("evaluate", TOY, "--policy", "hsvi", "--artifact", sol, "--n-traj", 20, "--out", tmp_path / "h") == 0
    assert run("evaluate", TOY, "--policy", "pi-obs", "--n-traj", 20, "--out", tmp_path / "o") == 0
    h = json.loads(read(tmp_path / "h" / "report.json"))
    o = json.loads(read(tmp_path / "o" / "report.json"))
    pooled = np.hypot(h["std_error_criterion"], o["std_error_criterion"])
    assert h["mean_return_criterion"] >= o["mean_return_criterion"] - 3 * pooled
    other = GRIDS / "toy_explicability.grid"
    assert run("evaluate", other, "--policy", "hsvi", "--artifact", sol, "--out", tmp_path / "x") == 3
    assert run("evaluate", TOY, "--policy", "hsvi", "--out", tmp_path / "y") == 2
    junk = tmp_path / "junk.json"
    junk.write_text("{}")
    assert run("evaluate", TOY, "--policy", "hsvi", "--artifact", junk, "--out", tmp_path / "z") == 2


def test_simulate_determinism_and_schema(tmp_path):
    grid = GRIDS / "legibility_stochastic.grid"
    for k in (1, 2):
        assert run("simulate", grid, "--policy", "pi-obs", "--seed", 3, "--out", tmp_path / f"s{k}") == 0
    a = read(tmp_path / "s1" / "trajectory.csv")
    assert a == read(tmp_path / "s2" / "trajectory.csv")
    assert a.decode().splitlines()[0] == "t,state,action,observation,belief,target_belief,r_criterion,r_obs"
    assert run("simulate", grid, "--policy", "mdp-greedy", "--format", "json", "--out", tmp_path / "j") == 0
    assert json.loads(read(tmp_path / "j" / "trajectory.json"))["terminated"] is True


def test_convert(tmp_path):
    rng = np.random.default_rng(0)
    spec = tmp_path / "o.json"
    spec.write_text(json.dumps(oamdp_to_json(random_oamdp(rng, n_states=3, n_types=1))))
    assert run("convert", spec, "--out", tmp_path / "c") == 0
    doc = json.loads(read(tmp_path / "c" / "problem.json"))
    assert doc["n_states"] == 3 * 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"transitions": [[[0.5]]]}')
    assert run("convert", bad, "--out", tmp_path / "d") == 2
    bad.write_text("not json")
    assert run("convert", bad, "--out", tmp_path / "d") == 2
