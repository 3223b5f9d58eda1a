import json

import numpy as np
import pytest

from pptac import cli
from pptac import config as cfg
from pptac import report
from pptac import sensor as sn
from pptac import synthesis as sy


SAMPLE_ROWS = [
    {"terrain": "plane", "sheet": "1-layer", "seed": 0, "success": 1, "slip_count": 0, "frames": 40},
    {"terrain": "plane", "sheet": "1-layer", "seed": 1, "success": 1, "slip_count": 1, "frames": 44},
    {"terrain": "random", "sheet": "1-layer", "seed": 0, "success": 0, "slip_count": 7, "frames": 100},
    {"terrain": "random", "sheet": "3-layer", "seed": 0, "success": 0, "slip_count": 12, "frames": 100},
]


# -- config hashing and manifests ---------------------------------------------------


def test_config_hash_stable_and_order_free():
    a = cfg.config_hash({"b": 1, "a": [1, 2]})
    b = cfg.config_hash({"a": [1, 2], "b": 1})
    assert a == b
    assert a != cfg.config_hash({"a": [1, 2], "b": 2})


def test_manifest_contents(tmp_path):
    path = cfg.write_manifest(tmp_path, "synth", "abc123", 7, {"n": 3})
    manifest = json.loads(path.read_text())
    assert manifest["command"] == "synth"
    assert manifest["config_hash"] == "abc123"
    assert manifest["seed"] == 7
    assert "numpy" in manifest["versions"]


def test_data_dir_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv(cfg.ENV_DATA_DIR, str(tmp_path / "envdir"))
    out = cfg.data_dir(None)
    assert out == tmp_path / "envdir"
    assert out.exists()


def test_apply_overrides_rejects_unknown():
    config = sy.SynthesisConfig()
    with pytest.raises(cfg.ConfigError):
        cfg.apply_overrides(config, {"no_such_key": 1}, "synthesis")


def test_bad_config_file_reports_path(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(cfg.ConfigError):
        cfg.load_config_file(bad)


# -- report files -----------------------------------------------------------------------


def test_report_csv_round_trip(tmp_path):
    path = tmp_path / "report.csv"
    report.write_report_csv(path, SAMPLE_ROWS, config_hash="cafe42")
    rows, chash = report.read_report_csv(path)
    assert chash == "cafe42"
    assert rows == SAMPLE_ROWS


def test_report_schema_row_count(tmp_path):
    path = tmp_path / "report.csv"
    report.write_report_csv(path, SAMPLE_ROWS)
    rows, _ = report.read_report_csv(path)
    cells = {(r["terrain"], r["sheet"]) for r in rows}
    assert len(rows) == len(SAMPLE_ROWS)
    assert cells == {("plane", "1-layer"), ("random", "1-layer"), ("random", "3-layer")}


def test_charts_render_svg(tmp_path):
    chart = tmp_path / "report.svg"
    report.render_success_chart(chart, SAMPLE_ROWS)
    assert chart.exists() and chart.read_bytes()[:5] == b"<?xml"
    sweep = [{"layers": 1, "success_rate": 0.9, "mean_slips": 0.2},
             {"layers": 3, "success_rate": 0.6, "mean_slips": 3.0}]
    chart2 = tmp_path / "stiffness.svg"
    report.render_stiffness_chart(chart2, sweep)
    assert chart2.exists() and chart2.read_bytes()[:5] == b"<?xml"


def test_training_curve_chart(tmp_path):
    history = {"step": [0, 10], "loss": [1.0, 0.1],
               "reconstruction": [0.9, 0.09], "consistency": [0.1, 0.01]}
    path = tmp_path / "curve.svg"
    report.render_training_curve(path, history)
    assert path.exists()


# -- CLI ----------------------------------------------------------------------------------


def test_check_command_passes(capsys):
    rc = cli.main(["check"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "10/10 checks passed" in out
    assert "FAIL" not in out


def test_synth_command_deterministic(tmp_path, capsys):
    rc1 = cli.main(["synth", "--n", "2", "--seed", "7",
                    "--out", str(tmp_path / "a")])
    rc2 = cli.main(["synth", "--n", "2", "--seed", "7",
                    "--out", str(tmp_path / "b")])
    assert rc1 == rc2 == 0
    ha = sy.file_digest(tmp_path / "a" / "dataset.ndjson")
    hb = sy.file_digest(tmp_path / "b" / "dataset.ndjson")
    assert ha == hb
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["accepted"] == 2


def test_evaluate_requires_existing_model(tmp_path):
    with pytest.raises(SystemExit):
        cli.main(["evaluate", "--model", str(tmp_path / "missing.ptck"),
                  "--out", str(tmp_path)])


def test_calibrate_command(tmp_path, capsys):
    rc = cli.main(["calibrate", "--out", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "camera.json").exists()
    model = sn.CameraModel.load(tmp_path / "camera.json")
    assert model.depth_mapping is not None
    payload = json.loads((tmp_path / "camera.json").read_text())
    assert payload["config_hash"]


def test_render_command(tmp_path):
    rc = cli.main(["render", "--out", str(tmp_path), "--presses", "2", "--seed", "3"])
    assert rc == 0
    img = sn.read_pgm(tmp_path / "press_00.pgm")
    assert img.shape == (sn.IMAGE_HEIGHT, sn.IMAGE_WIDTH)
    depth = sn.read_depth_map(tmp_path / "press_00.depth")
    assert depth.shape == img.shape
    assert depth.max() > 0
