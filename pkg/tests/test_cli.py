import csv
import json
import subprocess
import sys

import pytest

from bmdp import IncompatibleReports, ParseError, RangeError, SchemaError, SizeExceeded
from bmdp import cli
from bmdp.cli import compare, load_config, main, read_report, validate_config

BENCH = {
    "tree": {"T": 1.0, "n_steps": 4},
    "model": {"kind": "lq", "parameters": {"beta": 0.1, "B": 1.0, "sigma0": 0.3, "Q": 1.0, "R": 1.0,
                                           "G": 1.0, "x0": 0.5}},
    "action_space": {"linspace": [-1.0, 1.0, 5]},
    "regularizer": {"kind": "relative_entropy"},
    "solver": {"tau": 0.5, "lambda": 4.0, "max_iters": 30, "n_probe_pairs": 6},
}


def _config(tmp_path, name="config.json", **sections):
    cfg = json.loads(json.dumps(BENCH))
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def test_minimal_config_gets_defaults(tmp_path):
    cfg = load_config(_config(tmp_path))
    assert cfg["tree"]["d_prime"] == 1
    assert cfg["seed"] == 0
    assert cfg["outputs"]["formats"] == ["csv", "json"]
    assert cfg["solver"]["tol"] == 0.0


@pytest.mark.parametrize("mutate, key_path", [
    ({"tree": {"n_steps": 0}}, "tree.n_steps"),
    ({"solver": {"lambda": "big"}}, "solver.lambda"),
    ({"regularizer": {"kind": "wasserstein"}}, "regularizer.kind"),
    ({"outputs": {"colour": "red"}}, "outputs"),
    ({"model": {"kind": "lq", "parameters": {"gamma": 1.0}}}, "model.parameters"),
    ({"model": {"kind": "nonlinear"}}, "model.kind"),
])
def test_schema_errors_name_the_key(tmp_path, mutate, key_path):
    with pytest.raises(SchemaError) as err:
        load_config(_config(tmp_path, **mutate))
    assert err.value.key_path == key_path
    assert key_path in str(err.value)


def test_unknown_top_level_key(tmp_path):
    with pytest.raises(SchemaError):
        validate_config({**BENCH, "plotting": True})


def test_tau_above_lambda_names_both_keys(tmp_path):
    with pytest.raises(RangeError) as err:
        load_config(_config(tmp_path, solver={"tau": 5.0, "lambda": 2.0}))
    assert "solver.tau" in str(err.value) and "solver.lambda" in str(err.value)


def test_oversized_tree_rejected_before_allocation(tmp_path):
    with pytest.raises(SizeExceeded):
        load_config(_config(tmp_path, tree={"n_steps": 11, "d_prime": 2}))


def test_unparseable_config(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{tree: ")
    with pytest.raises(ParseError):
        load_config(path)
    assert main(["solve", str(path), "--quiet"]) == 1
    assert main(["solve", str(tmp_path / "missing.json"), "--quiet"]) == 1


def _read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_solve_writes_all_outputs(tmp_path):
    out = tmp_path / "out"
    assert main(["solve", str(_config(tmp_path)), "--out-dir", str(out), "--quiet"]) == 0
    assert {p.name for p in out.iterdir()} == {"report.json", "probes.json", "iterates.csv", "rates.csv"}
    rows = _read_csv(out / "iterates.csv")
    assert rows[0] == ["n", "J_tau", "gap", "step_divergence", "bound_value"]
    assert len(rows) == 1 + 31
    assert rows[-1][3] == ""  # no step after the last iterate
    rates = _read_csv(out / "rates.csv")
    assert rates[0] == ["fitted_rate", "theoretical_rate", "intercept", "r2", "lambda", "tau"]
    assert float(rates[1][1]) == 1 - 0.5 / 4.0
    probes = json.loads((out / "probes.json").read_text())
    assert probes["convexity_violations"] == 0 and probes["pairs"] == 6


def test_report_round_trip(tmp_path):
    out = tmp_path / "out"
    cfg = load_config(_config(tmp_path))
    assert cli.run(cfg, out_dir=out, quiet=True) == 0
    report = read_report(out / "report.json")
    assert cli.dumps(report.to_dict()) == (out / "report.json").read_text()
    assert report.gap is not None and report.oracle_certified


def test_repeated_runs_are_byte_identical(tmp_path):
    path = _config(tmp_path)
    for name in ("a", "b"):
        assert main(["solve", str(path), "--out-dir", str(tmp_path / name), "--quiet"]) == 0
    for f in ("report.json", "probes.json", "iterates.csv", "rates.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_concave_terminal_cost_violates_probes(tmp_path):
    path = _config(tmp_path, model={"kind": "lq_concave_terminal"},
                   solver={"tau": 0.0, "lambda": 4.0, "max_iters": 5, "n_probe_pairs": 6})
    out = tmp_path / "out"
    assert main(["probe", str(path), "--out-dir", str(out), "--quiet"]) == 2
    assert json.loads((out / "probes.json").read_text())["convexity_violations"] > 0
    assert main(["solve", str(path), "--out-dir", str(tmp_path / "s"), "--quiet"]) == 2


def test_solver_failure_exit_code(tmp_path):
    path = _config(tmp_path, model={"parameters": {"beta": 1e308, "x0": 10.0}},
                   outputs={"emit_probe_report": False}, solver={"oracle": "none"})
    assert main(["solve", str(path), "--out-dir", str(tmp_path / "out"), "--quiet"]) == 3


def test_entropic_ot_cost_from_file(tmp_path):
    (tmp_path / "cost.csv").write_text("\n".join(",".join(str(abs(i - j)) for j in range(5)) for i in range(5)))
    path = _config(tmp_path, regularizer={"kind": "entropic_ot", "kappa": 0.5, "cost": {"path": "cost.csv"}},
                   solver={"max_iters": 3, "oracle": "none"}, outputs={"emit_probe_report": False})
    assert main(["solve", str(path), "--out-dir", str(tmp_path / "out"), "--quiet"]) == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["config"]["regularizer"]["kind"] == "entropic_ot"


def _solve(tmp_path, name, **solver):
    path = _config(tmp_path, name=f"{name}.json", solver=solver, outputs={"emit_probe_report": False})
    assert main(["solve", str(path), "--out-dir", str(tmp_path / name), "--quiet"]) == 0
    return tmp_path / name / "report.json"


def test_compare(tmp_path, capsys):
    a = _solve(tmp_path, "a")
    b = _solve(tmp_path, "b")
    same = compare(read_report(a), read_report(b))
    assert same["J0_difference"] == 0.0 and same["bias_estimate"] == [0.0, 0.0]
    small = _solve(tmp_path, "small", tau=0.05, max_iters=60)
    summary = compare(read_report(a), read_report(small))
    # the weaker regulariser lands closer to the unregularised optimum
    assert summary["J0_final"][1] < summary["J0_final"][0]
    assert summary["bias_estimate"][1] == 0.0 < summary["bias_estimate"][0]
    assert main(["compare", str(a), str(small)]) == 0
    assert "bias_estimate" in capsys.readouterr().out


def test_compare_rejects_different_trees(tmp_path):
    a = _solve(tmp_path, "a")
    path = _config(tmp_path, name="c.json", tree={"n_steps": 3}, outputs={"emit_probe_report": False})
    assert main(["solve", str(path), "--out-dir", str(tmp_path / "c"), "--quiet"]) == 0
    with pytest.raises(IncompatibleReports):
        compare(read_report(a), read_report(tmp_path / "c" / "report.json"))
    assert main(["compare", str(a), str(tmp_path / "c" / "report.json")]) == 1


def test_thread_cap_from_environment(tmp_path, monkeypatch):
    seen = []
    real = cli.threadpool_limits

    def spy(limits=None):
        seen.append(limits)
        return real(limits=limits)

    monkeypatch.setattr(cli, "threadpool_limits", spy)
    monkeypatch.setenv("BMDP_THREADS", "2")
    path = _config(tmp_path, solver={"max_iters": 2, "oracle": "none"}, outputs={"emit_probe_report": False})
    assert main(["solve", str(path), "--out-dir", str(tmp_path / "out"), "--quiet"]) == 0
    assert seen == [2]
    monkeypatch.setenv("BMDP_THREADS", "zero")
    assert main(["solve", str(path), "--out-dir", str(tmp_path / "out"), "--quiet"]) == 1


def test_module_entry_point(tmp_path):
    path = _config(tmp_path, solver={"max_iters": 2, "oracle": "none"}, outputs={"emit_probe_report": False})
    proc = subprocess.run([sys.executable, "-m", "bmdp", "solve", str(path), "--out-dir", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "lambda=4" in proc.stderr
