import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ccmpc.cli import main
from ccmpc.metric import constant_certificate, dumps, load, save

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
LV = str(CONFIGS / "lotka_volterra.yaml")


@pytest.fixture(autouse=True)
def output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("CCMPC_OUTPUT_DIR", str(tmp_path))
    return tmp_path


@pytest.fixture(scope="module")
def lv_cert_file(tmp_path_factory, lv_cert):
    path = tmp_path_factory.mktemp("cert") / "lv.cert"
    save(lv_cert, path)
    return path


def test_synth_writes_certificate(output_dir, capsys):
    assert main(["synth", "--config", LV]) == 0
    out = capsys.readouterr().out
    cert = load(output_dir / "lotka_volterra.cert")
    assert cert.margin >= 1e-6
    assert "margin" in out


def test_synth_infeasible_exit_code(capsys):
    assert main(["synth", "--config", str(CONFIGS / "scalar_unstable.yaml")]) == 2
    assert "synthesis failed" in capsys.readouterr().err


def test_verify_exit_codes(lv_cert_file, tmp_path, capsys):
    assert main(["verify-lmi", "--config", LV, "--cert", str(lv_cert_file)]) == 0
    flipped = load(lv_cert_file)
    flipped = flipped.with_l(-flipped.l_coeffs)
    bad = tmp_path / "flipped.cert"
    save(flipped, bad)
    assert main(["verify-lmi", "--config", LV, "--cert", str(bad)]) == 1
    assert "margin -" in capsys.readouterr().out


def test_corrupted_certificate_is_a_data_error(lv_cert_file, tmp_path):
    text = lv_cert_file.read_text().replace("beta 0.1", "beta 0.3", 1)
    bad = tmp_path / "bad.cert"
    bad.write_text(text)
    assert main(["verify-lmi", "--config", LV, "--cert", str(bad)]) == 65


def test_usage_errors(lv_cert_file, tmp_path):
    assert main([]) == 64
    assert main(["frobnicate"]) == 64
    assert main(["simulate", "--config", LV, "--cert", str(lv_cert_file), "--seed", "-3"]) == 64
    assert main(["simulate", "--config", LV, "--cert", str(lv_cert_file), "--steps", "0"]) == 64
    assert main(["verify-lmi", "--config", str(tmp_path / "missing.yaml")]) == 64
    broken = tmp_path / "broken.yaml"
    broken.write_text("model: {unknown_key: 1}\n")
    assert main(["synth", "--config", str(broken)]) == 64
    assert main(["verify-lmi", "--config", LV, "--cert", str(tmp_path / "none.cert")]) == 64
    assert main(["geodesic", "--cert", str(lv_cert_file), "--x", "1", "--x-star", "1", "1"]) == 64


def test_simulate_summary_and_trace(lv_cert_file, output_dir, capsys):
    code = main(["simulate", "--config", LV, "--cert", str(lv_cert_file), "--mode", "ccm", "--steps", "20"])
    assert code == 0
    out = capsys.readouterr().out
    for key in ("final_tracking_error", "mean_stage_cost", "fallback_rate", "empirical_l2_gain"):
        assert key in out
    lines = (output_dir / "lotka_volterra_trace.csv").read_text().splitlines()
    assert sum(1 for line in lines if line[:1].isdigit()) == 20
    assert "# controller ccm" in lines


def test_simulate_default_length_is_400(lv_cert_file, output_dir):
    assert main(["simulate", "--config", LV, "--cert", str(lv_cert_file), "--mode", "ccm"]) == 0
    lines = (output_dir / "lotka_volterra_trace.csv").read_text().splitlines()
    assert sum(1 for line in lines if line[:1].isdigit()) == 400


def test_geodesic_output(lv_cert_file, capsys):
    assert main(["geodesic", "--cert", str(lv_cert_file), "--x", "1.2", "0.8", "--x-star", "0.99", "0.99"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows[0] == "node,x1,x2,length"
    assert len(rows) == 18
    first, last = rows[1].split(","), rows[-1].split(",")
    assert [float(v) for v in first[1:3]] == [1.2, 0.8]
    assert [float(v) for v in last[1:3]] == [0.99, 0.99]


def test_geodesic_coincident_points(lv_cert_file, capsys):
    assert main(["geodesic", "--cert", str(lv_cert_file), "--x", "1", "1", "--x-star", "1", "1"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows == ["node,x1,x2,length", "0,1,1,0"]


def test_geodesic_constant_metric_is_straight(tmp_path, capsys):
    path = tmp_path / "eye.cert"
    save(constant_certificate(np.eye(2), [[0.0, 0.0]], 0.1), path)
    assert main(["geodesic", "--cert", str(path), "--x", "0", "0", "--x-star", "3", "4", "--segments", "4"]) == 0
    rows = [r.split(",") for r in capsys.readouterr().out.strip().splitlines()[1:]]
    nodes = np.array([[float(r[1]), float(r[2])] for r in rows])
    np.testing.assert_allclose(nodes, np.linspace([0, 0], [3, 4], 5), atol=1e-8)
    assert float(rows[0][3]) == pytest.approx(5.0)


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "ccmpc.cli", "geodesic", "--cert", str(tmp_path / "missing"), "--x", "1", "--x-star", "1"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 64


def test_same_certificate_text_for_repeated_saves(lv_cert, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    save(lv_cert, a)
    save(load(a), b)
    assert a.read_bytes() == b.read_bytes() and a.read_text() == dumps(lv_cert)
