import json

import numpy as np
import pytest

from backaction.cli import main
from backaction.noisebudget import build_budget


def run(*argv):
    return main([str(a) for a in argv])


def test_budget_default(tmp_path, capsys, ref):
    out = tmp_path / "b"
    assert run("budget", "--out", out) == 0
    line = capsys.readouterr().out
    ratio = float(line.split("=")[1])
    assert 1.0 <= ratio <= 2.0
    assert {p.name for p in out.iterdir()} == {"budget.csv", "budget.json", "budget.png", "manifest.json"}
    manifest = json.loads((out / "manifest.json").read_text())
    listed = {o["path"] for o in manifest["outputs"]}
    assert listed == {"budget.csv", "budget.json", "budget.png"}
    assert manifest["config"]["mechanics"]["quality_factor"] == 3.2e5


def test_budget_zero_power_has_zero_qba(tmp_path):
    out = tmp_path / "b"
    assert run("budget", "--out", out, "--no-plots", "--set", "laser.input_power_w=0", "--grid", "10:1000:50") == 0
    data = np.genfromtxt(out / "budget.csv", delimiter=",", names=True)
    assert np.all(data["asd_qba"] == 0)
    assert data.size == 50


def test_budget_json_format(tmp_path):
    out = tmp_path / "b"
    assert run("budget", "--out", out, "--no-plots", "--format", "json") == 0
    rep = json.loads((out / "budget.json").read_text())
    assert len(rep["spectrum"]["asd_total"]) == 400
    assert not (out / "budget.csv").exists()


def test_malformed_config_leaves_nothing(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("cavity:\n  kappa_hz: fast\nmechanics: {}\n")
    out = tmp_path / "out"
    assert run("budget", "--config", cfg, "--out", out) == 2
    err = capsys.readouterr().err
    assert "cavity.kappa_hz" in err or "mechanics." in err
    assert not out.exists()


def test_config_error_reports_unit_hint(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("cavity: {kappa_hz: 1.0e6}\nmechanics: {wire_length_m: 0.05, wire_radius_m: 1.0e-6, "
                   "quality_factor: 1.0e5}\n")
    assert run("budget", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "mechanics.mirror_mass_kg" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    assert run("nonsense") == 2
    assert run("budget", "--grid", "a:b", "--out", tmp_path / "o") == 2
    assert run("budget", "--set", "novalue", "--out", tmp_path / "o") == 2
    assert run("simulate", "--jobs", "0", "--out", tmp_path / "o") == 2


def test_unknown_source(tmp_path, capsys):
    assert run("simulate", "--sources", "thermal,wind", "--out", tmp_path / "s") == 2
    err = capsys.readouterr().err
    assert "wind" in err and "qba" in err and "thermal" in err
    assert not (tmp_path / "s").exists()


def test_duration_shorter_than_segment(tmp_path):
    assert run("simulate", "--duration", "0.1", "--segment", "0.4", "--out", tmp_path / "s") == 2


def test_numerical_failure_exit_3(tmp_path, capsys):
    out = tmp_path / "o"
    code = run("budget", "--out", out, "--set", "laser.input_power_w=7.6e-3",
               "--set", "cavity.detuning_over_kappa=-1.1")
    assert code == 3
    assert "phase" in capsys.readouterr().err
    assert not out.exists()


def test_simulate_deterministic_and_consistent(tmp_path, ref):
    args = ["simulate", "--sources", "thermal,qba,sensing", "--duration", "40", "--fs", "1024", "--seed", "5",
            "--set", "laser.input_power_w=5e-3"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(*args, "--out", a) == 0
    assert run(*args, "--out", b) == 0
    for name in ("thermal.csv", "qba.csv", "sensing.csv", "sum.csv", "sum_spectrum.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    spec = np.genfromtxt(a / "sum_spectrum.csv", delimiter=",", names=True)
    f = spec["frequency_hz"]
    sel = (f > 20) & (f < 500)
    bud = build_budget(ref.with_input_power(5e-3), f[sel])
    model = 2 * (bud.per_source["thermal"] + bud.per_source["qba"] + bud.per_source["sensing"])
    n_seg = spec["n_segments"][0]
    ratio = spec["psd"][sel] / model
    assert abs(np.mean(ratio) - 1) < 3 / np.sqrt(n_seg * sel.sum())
    assert np.all(np.abs(ratio - 1) < 6 / np.sqrt(n_seg))


def test_simulate_binary_and_analyze(tmp_path, capsys):
    sim = tmp_path / "s"
    assert run("simulate", "--sources", "thermal", "--duration", "20", "--format", "bin", "--out", sim) == 0
    assert (sim / "thermal.bin").exists()
    ana = tmp_path / "a"
    code = run("analyze", sim / "thermal.bin", "--out", ana, "--slope-band", "40", "140",
               "--rayleigh-at", "75")
    assert code == 0
    rep = json.loads((ana / "analysis.json").read_text())
    assert rep["enbw_hz"] == pytest.approx(2.5, rel=1e-3)
    assert "slope" in rep and 0 <= rep["rayleigh"]["p_value"] <= 1
    assert run("analyze", tmp_path / "missing.csv", "--out", ana) == 2


def test_reproduce_pass_and_fail(tmp_path, capsys):
    out = tmp_path / "r"
    assert run("reproduce", "stability", "--out", out) == 0
    verdict = json.loads((out / "stability_verdict.json").read_text())
    assert verdict["verdict"] == "PASS"
    assert {c["name"] for c in verdict["checks"]} >= {"power_margin", "dilution", "violin_f1_hz"}
    bad = tmp_path / "bad"
    assert run("reproduce", "ratio325", "--out", bad, "--no-plots", "--set", "reproduce.ratio325.accept=[2.5, 3.0]") == 1
    assert json.loads((bad / "ratio325_verdict.json").read_text())["verdict"] == "FAIL"


def test_reproduce_missing_settings_is_config_error(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("cavity: {kappa_hz: 1.0e6}\nmechanics: {mirror_mass_kg: 5.0e-6, wire_length_m: 0.05, "
                   "wire_radius_m: 1.5e-6, quality_factor: 1.0e5}\n")
    assert run("reproduce", "linewidth", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "reproduce.linewidth" in capsys.readouterr().err


def test_rerun_matches(tmp_path, capsys):
    a = tmp_path / "a"
    assert run("reproduce", "optical_spring", "--out", a, "--seed", "3") == 0
    assert run("rerun", a / "manifest.json", "--out", tmp_path / "b") == 0
    assert "DIFFERS" not in capsys.readouterr().out
    assert run("rerun", tmp_path / "nope.json", "--out", tmp_path / "c") == 2


def test_outputs_stay_inside_out_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run("reproduce", "ratio325", "--out", "inner/out") == 0
    assert [p.name for p in tmp_path.iterdir()] == ["inner"]
    assert not any(p.name.startswith(".staging") for p in (tmp_path / "inner/out").iterdir())
