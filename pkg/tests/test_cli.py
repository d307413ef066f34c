"""Config schema, orchestration exit codes, artifact layout."""

import json
import subprocess
import sys

import pytest

import rieszgas.cli as cli
from rieszgas import __version__
from rieszgas.cli import ConfigError, EXPERIMENT_NAMES, execute, parse_config
from rieszgas.experiments import ExperimentReport


def parse(d):
    return parse_config(json.dumps(d))


def minimal(**over):
    d = {"model": {"N": 8}}
    d.update(over)
    return d


# ---------------------------------------------------------------------------
# schema


def test_parse_minimal_defaults():
    cfg, warnings = parse(minimal())
    assert warnings == []
    assert cfg.experiment is None
    assert cfg.model.N == 8
    assert cfg.model.alpha == 1.0
    assert cfg.model.lam == 1.0
    assert cfg.model.sigma_rule == "one_over_N"
    assert cfg.replicas == 8
    assert cfg.seed == 0
    assert cfg.output_dir == "runs"
    assert cfg.test_functions == ["tanh"]
    assert cfg.scheme.to_scheme().h_max == 1e-3


def test_parse_lambda_alias_and_scheme_override():
    cfg, _ = parse({"model": {"N": 4, "lambda": 2.5},
                    "scheme": {"h_max": 5e-4, "depth_limit_policy": "freeze"}})
    assert cfg.model.lam == 2.5
    s = cfg.scheme.to_scheme()
    assert s.h_max == 5e-4
    assert s.depth_limit_policy == "freeze"


def test_parse_sigma_value_resolution():
    cfg, _ = parse({"model": {"N": 10, "sigma_rule": "constant",
                              "sigma": 0.05}})
    assert cfg.model.sigma_value(10) == 0.05
    assert cfg.model.params().sigma == 0.05
    cfg2, _ = parse({"model": {"N": 10}})
    assert cfg2.model.sigma_value(10) == 0.1
    cfg3, _ = parse({"model": {"N": 10, "sigma_rule": "zero"}})
    assert cfg3.model.sigma_value(10) == 0.0


@pytest.mark.parametrize("doc,msg", [
    ("{not json", "config must be valid JSON"),
    ("[1, 2]", "config must be a JSON object"),
    (minimal(bogus=1), "unknown key 'bogus' in the top level"),
    ({"model": {"N": 4, "gamma": 2}}, "unknown key 'gamma' in model"),
    ({"model": {"N": 0}}, "N must be >= 1"),
    ({"model": {"N": 4, "alpha": 0.5}}, "alpha must be >= 1"),
    ({"model": {"N": 4, "lambda": 0.0}}, "lambda must be > 0"),
    ({"model": {"N": 4, "sigma_rule": "half"}}, "sigma_rule must be one of"),
    ({"model": {"N": 4, "sigma_rule": "constant"}},
     "sigma_rule 'constant' needs sigma"),
    ({"model": {"N": 4, "sigma": 0.2}}, "only meaningful with"),
    (minimal(experiment="warp"), "experiment must be one of"),
    (minimal(sizes=[8, 4]), "sizes must be strictly increasing"),
    (minimal(sizes=[]), "sizes must be positive integers"),
    (minimal(times=[0.5, 0.25]), "times must be increasing"),
    (minimal(times=[-1.0]), "times must be >= 0"),
    (minimal(replicas=0), "replicas must be >= 1"),
])
def test_parse_errors(doc, msg):
    text = doc if isinstance(doc, str) else json.dumps(doc)
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)


def test_constant_sigma_warning_conditions():
    def warns(model):
        return parse({"model": model})[1]

    big = {"N": 4, "sigma_rule": "constant", "sigma": 0.5}
    w = warns(big)
    assert len(w) == 1 and "sigma_N <= 1/N" in w[0]
    assert warns({"N": 4, "sigma_rule": "constant", "sigma": 0.25}) == []
    assert warns({"N": 4, "alpha": 1.5, "sigma_rule": "constant",
                  "sigma": 0.5}) == []
    assert warns({"N": 4}) == []


# ---------------------------------------------------------------------------
# execute(): exit codes and artifacts


def cfg_for(tmp_path, **over):
    d = minimal(output_dir=str(tmp_path / "out"))
    d.update(over)
    return parse(d)[0]


def fake_report(name, passed):
    return ExperimentReport(
        name=name, params_echo={"tolerances": {}}, time_grid=[0.0],
        observed={}, stderr={}, theoretical_bound={}, fitted={},
        passed=passed, replica_count=1, seed=0)


def test_execute_requires_experiment_name(tmp_path):
    with pytest.raises(ConfigError, match="no experiment named"):
        execute(cfg_for(tmp_path))


def test_execute_name_mismatch(tmp_path):
    cfg = cfg_for(tmp_path, experiment="moments")
    with pytest.raises(ConfigError, match="names experiment 'moments'"):
        execute(cfg, experiment="cauchy")


def test_execute_exit_codes_follow_pass_flags(tmp_path, monkeypatch, capsys):
    cfg = cfg_for(tmp_path)

    monkeypatch.setattr(cli, "_dispatch",
                        lambda *a: fake_report("moments", {"a": True}))
    assert execute(cfg, experiment="moments") == 0
    assert "PASS moments.a" in capsys.readouterr().out

    monkeypatch.setattr(
        cli, "_dispatch",
        lambda *a: fake_report("moments", {"a": True, "b": False}))
    assert execute(cfg, experiment="moments") == 1
    out = capsys.readouterr().out
    assert "PASS moments.a" in out and "FAIL moments.b" in out

    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["pass"] == {"a": True, "b": False}
    assert report["params_echo"]["config"]["model"]["N"] == 8
    assert "lambda" in report["params_echo"]["config"]["model"]


def test_execute_failure_writes_marker(tmp_path, monkeypatch, capsys):
    cfg = cfg_for(tmp_path)

    def boom(*a):
        raise RuntimeError("all 8 replicas failed; last error: pinched")

    monkeypatch.setattr(cli, "_dispatch", boom)
    assert execute(cfg, experiment="contraction") == 2
    marker = (tmp_path / "out" / "FAILED").read_text()
    assert "pinched" in marker
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert "pinched" in report["failure"]
    assert report["pass"] == {}
    assert "FAIL contraction:" in capsys.readouterr().err


def test_execute_real_failure_path(tmp_path):
    # a genuinely unresolvable run: near-collision under a huge gap floor
    cfg = cfg_for(tmp_path, experiment="contraction",
                  model={"N": 2, "sigma_rule": "zero"},
                  scheme={"gap_floor": 0.5}, times=[0.01], replicas=1)
    code = execute(cfg)
    assert code == 2
    assert (tmp_path / "out" / "FAILED").exists()


def test_execute_writes_manifest(tmp_path, monkeypatch):
    cfg = cfg_for(tmp_path, seed=3)
    monkeypatch.setattr(cli, "_dispatch",
                        lambda *a: fake_report("moments", {}))
    execute(cfg, experiment="moments", warnings=["w1"], echo=False)
    m = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert list(m) == ["config", "seed", "version", "warnings", "wall_time_s"]
    assert m["seed"] == 3
    assert m["version"] == __version__
    assert m["warnings"] == ["w1"]
    assert m["config"]["model"]["N"] == 8


# ---------------------------------------------------------------------------
# dispatch plumbing


def test_sizes_requirement(tmp_path, capsys):
    cfg = cfg_for(tmp_path, experiment="cauchy")
    code = cli.run_from_cli("cauchy", write_cfg(tmp_path, cfg), None, None,
                            None, 1)
    assert code == 2
    assert "needs sizes with at least 2" in capsys.readouterr().err


def write_cfg(tmp_path, cfg_or_dict, name="cfg.json"):
    p = tmp_path / name
    if isinstance(cfg_or_dict, dict):
        p.write_text(json.dumps(cfg_or_dict))
    else:
        p.write_text(json.dumps(cfg_or_dict.model_dump(by_alias=True)))
    return str(p)


def test_bad_scheme_value_exits_two(tmp_path, capsys):
    doc = minimal(experiment="simulate", output_dir=str(tmp_path / "o"),
                  scheme={"theta_diff": 1.5}, times=[0.01])
    code = cli.run_from_cli("simulate", write_cfg(tmp_path, doc), None, None,
                            None, 1)
    assert code == 2
    assert "theta_diff" in capsys.readouterr().err


def test_config_error_message_to_stderr(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{broken")
    assert cli.run_from_cli("moments", str(p), None, None, None, 1) == 2
    assert capsys.readouterr().err.startswith("error: ")


# ---------------------------------------------------------------------------
# run_from_cli integration (real runs, small)


def test_simulate_run_and_artifacts(tmp_path, capsys):
    doc = {"experiment": "simulate", "model": {"N": 6},
           "scheme": {"max_rejections": 1000000, "max_depth": 14,
                      "depth_limit_policy": "freeze"},
           "times": [0.05, 0.1], "output_dir": str(tmp_path / "sim")}
    code = cli.run_from_cli("simulate", write_cfg(tmp_path, doc), None, None,
                            None, 1)
    assert code == 0
    out = tmp_path / "sim"
    for f in ("report.json", "manifest.json", "trajectory.csv",
              "diagnostics.csv", "Hcal.csv", "m2.csv"):
        assert (out / f).exists(), f
    report = json.loads((out / "report.json").read_text())
    assert report["name"] == "simulate"
    assert report["time_grid"] == [0.05, 0.1]
    assert report["fitted"]["accepted_pieces"] >= 100.0
    lines = (out / "trajectory.csv").read_text().splitlines()
    assert lines[0] == "time,particle_index,position"
    assert len(lines) == 1 + 2 * 6


def test_overrides_apply(tmp_path):
    doc = {"experiment": "simulate", "model": {"N": 4}, "times": [0.01],
           "output_dir": str(tmp_path / "ignored")}
    other = tmp_path / "actual"
    code = cli.run_from_cli("simulate", write_cfg(tmp_path, doc), 5, None,
                            str(other), 1)
    assert code == 0
    assert not (tmp_path / "ignored").exists()
    m = json.loads((other / "manifest.json").read_text())
    assert m["seed"] == 5
    assert m["config"]["seed"] == 5
    assert m["config"]["output_dir"] == str(other)


def contraction_doc(tmp_path, sub):
    return {"experiment": "contraction",
            "model": {"N": 4},
            "scheme": {"max_rejections": 1000000, "max_depth": 14,
                       "depth_limit_policy": "freeze"},
            "times": [0.025, 0.05], "replicas": 3,
            "output_dir": str(tmp_path / sub)}


def test_thread_count_never_changes_reports(tmp_path):
    c1 = write_cfg(tmp_path, contraction_doc(tmp_path, "t1"), "c1.json")
    c3 = write_cfg(tmp_path, contraction_doc(tmp_path, "t3"), "c3.json")
    assert cli.run_from_cli("contraction", c1, None, None, None, 1) == 0
    assert cli.run_from_cli("contraction", c3, None, None, None, 3) == 0
    r1 = json.loads((tmp_path / "t1" / "report.json").read_text())
    r3 = json.loads((tmp_path / "t3" / "report.json").read_text())
    r1.pop("wall_time_s")
    r3.pop("wall_time_s")
    # output_dir differs by construction; everything numeric must not
    r1["params_echo"]["config"].pop("output_dir")
    r3["params_echo"]["config"].pop("output_dir")
    assert r1 == r3


def test_rerun_reproduces_report_bytes(tmp_path):
    doc = contraction_doc(tmp_path, "rep")
    p = write_cfg(tmp_path, doc)
    assert cli.run_from_cli("contraction", p, None, None, None, 1) == 0
    first = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert cli.run_from_cli("contraction", p, None, None, None, 1) == 0
    second = json.loads((tmp_path / "rep" / "report.json").read_text())
    first.pop("wall_time_s")
    second.pop("wall_time_s")
    assert first == second


def test_warning_lands_in_manifest_and_stderr(tmp_path, capsys):
    doc = {"experiment": "moments",
           "model": {"N": 4, "sigma_rule": "constant", "sigma": 0.5},
           "scheme": {"max_rejections": 1000000, "max_depth": 14,
                      "depth_limit_policy": "freeze"},
           "times": [0.25, 0.5], "replicas": 2,
           "output_dir": str(tmp_path / "warn")}
    code = cli.run_from_cli("moments", write_cfg(tmp_path, doc), None, None,
                            None, 1)
    assert code in (0, 1)
    assert "warning: " in capsys.readouterr().err
    m = json.loads((tmp_path / "warn" / "manifest.json").read_text())
    assert len(m["warnings"]) == 1
    report = json.loads((tmp_path / "warn" / "report.json").read_text())
    # constant sigma at alpha 1 activates the fixed-reference monitor
    assert "w2_to_reference" in report["observed"]
    assert report["params_echo"]["fixed_sigma_reference"] is True


# ---------------------------------------------------------------------------
# console entry point


def test_cli_subprocess_version():
    out = subprocess.run([sys.executable, "-m", "rieszgas.cli", "--version"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert __version__ in out.stdout


def test_cli_subprocess_contraction(tmp_path):
    doc = contraction_doc(tmp_path, "sub")
    p = write_cfg(tmp_path, doc)
    out = subprocess.run(
        [sys.executable, "-m", "rieszgas.cli", "contraction",
         "--config", p],
        capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert "PASS contraction.contraction" in out.stdout
    assert (tmp_path / "sub" / "report.json").exists()


def test_cli_lists_all_experiments():
    out = subprocess.run([sys.executable, "-m", "rieszgas.cli", "--help"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    for name in EXPERIMENT_NAMES:
        assert name in out.stdout
