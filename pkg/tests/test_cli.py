from pemsim.cli import main

from conftest import SCENARIOS


def test_validate(capsys):
    assert main(["validate", "--scenario", str(SCENARIOS / "reconstruction.yaml")]) == 0
    assert "ok: reconstruction (20 devices" in capsys.readouterr().out


def test_limits_and_baseline(tmp_path, capsys):
    path = str(SCENARIOS / "ekf_agc.yaml")
    assert main(["limits", "--scenario", path, "--out", str(tmp_path)]) == 0
    assert main(["baseline", "--scenario", path, "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "soc_upper" in out and "beta_charge" in out
    assert (tmp_path / "limits.csv").exists() and (tmp_path / "baseline.csv").exists()


def test_run_then_report(tmp_path, capsys):
    scenario = tmp_path / "short.yaml"
    text = (SCENARIOS / "reconstruction.yaml").read_text().replace("duration: 7200", "duration: 900")
    scenario.write_text(text)
    out = tmp_path / "run"
    assert main(["run", "--scenario", str(scenario), "--out", str(out), "--seed", "2"]) == 0
    for name in ("trace.csv", "summary.csv"):
        assert (out / name).exists()
    assert main(["report", "--out", str(out), "--scenario", str(scenario)]) == 0
    assert (out / "report.csv").exists()
    assert "rms_kw" in capsys.readouterr().out


def test_errors_exit_with_code_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: x\nduration: -1\n")
    assert main(["validate", "--scenario", str(bad)]) == 2
    assert main(["report", "--out", str(tmp_path / "missing")]) == 2
    assert "error:" in capsys.readouterr().err
