import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from camforge.cli import main, read_matrix_cells
from camforge.config import ConfigError

from .corpus import run_pipeline, snapshot

DATA = Path(__file__).parent / "data"


def test_pipeline_outputs(tmp_path):
    out = run_pipeline(tmp_path, jobs=1)
    for stage in ("simulate", "variants", "eval"):
        assert (out / stage / "run.log").exists() and (out / stage / "resolved.cfg").exists()
    log = (out / "simulate" / "run.log").read_text()
    assert "numpy = " in log and "wall_time_s = " in log and "seed = 11" in log
    assert sorted(p.name for p in (out / "variants").iterdir() if p.is_dir()) == [
        "bit_depth=10", "bit_depth=12", "bit_depth=8"]
    ap = (out / "eval" / "ap.txt").read_text()
    assert ap.startswith("class=car ap=")
    rows = (out / "eval" / "ap_by_distance.csv").read_text().splitlines()
    assert rows[0] == "class,bin_lo_m,bin_hi_m,ap,num_gt,num_det" and rows[-1].startswith("car,unassignable")


def test_rerun_is_byte_identical(tmp_path):
    out = run_pipeline(tmp_path, jobs=1)
    first = snapshot(out)
    shutil.rmtree(out)
    shutil.rmtree(tmp_path / "dets")
    run_pipeline(tmp_path, jobs=3)
    assert snapshot(out) == first


def test_eval_against_oracle_golden(tmp_path):
    g = DATA / "eval_golden"
    cfg = tmp_path / "ev.cfg"
    cfg.write_text(f"eval.labels = {g / 'labels'}\neval.detections = {g / 'detections'}\n"
                   f"output.directory = {tmp_path / 'out'}\n")
    assert main(["eval", "--config", str(cfg)]) == 0
    got = {}
    for line in (tmp_path / "out" / "eval" / "ap.txt").read_text().splitlines():
        fields = dict(kv.split("=") for kv in line.split())
        got[fields["class"]] = float(fields["ap"])
    expected = {}
    for line in (g / "expected_ap.csv").read_text().splitlines()[1:]:
        cls, ap = line.split(",")
        expected[cls] = float(ap)
    assert got == expected


def test_errors_are_one_json_line(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("sensor.colour = red\n")
    assert main(["simulate", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    payload = json.loads(err[0])
    assert payload["error"] == "ConfigError" and "bad.cfg:1" in payload["message"]

    cfg.write_text(f"input.manifest = {tmp_path / 'nope.txt'}\noutput.directory = {tmp_path / 'o'}\n")
    assert main(["simulate", "--config", str(cfg)]) != 0
    assert json.loads(capsys.readouterr().err)["error"] in ("FileNotFoundError", "ManifestError")


def test_missing_required_key(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path)]) == 2
    assert "input.manifest" in json.loads(capsys.readouterr().err)["message"]


def test_matrix_command(tmp_path, capsys):
    assert main(["matrix", str(DATA / "generalization_cells.csv"), "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "asymmetry BDD->KITTI=0.6700 KITTI->BDD=0.2500 gap=+0.4200" in text
    csv_rows = (tmp_path / "matrix" / "matrix.csv").read_text().splitlines()
    assert csv_rows[0] == "eval,KITTI,BDD,CITYSCAPE,ISETAuto"
    assert csv_rows[1] == "KITTI,,0.67,0.65,0.62"
    bad = tmp_path / "bad.csv"
    bad.write_text("train,eval,ap\nA,B,high\n")
    with pytest.raises(ConfigError, match="bad.csv:2"):
        read_matrix_cells(bad)


def test_kid_command(tmp_path, capsys):
    rng = np.random.default_rng(0)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    np.savetxt(a, rng.normal(size=(50, 4)), delimiter=",")
    np.savetxt(b, rng.normal(size=(50, 4)), delimiter=",")
    assert main(["kid", str(a), str(b), "--block-size", "10", "--seed", "3"]) == 0
    ab = capsys.readouterr().out
    assert main(["kid", str(b), str(a), "--block-size", "10", "--seed", "3"]) == 0
    assert capsys.readouterr().out == ab and "blocks=5" in ab


def test_census_command(tmp_path):
    out = run_pipeline(tmp_path, jobs=1)
    cfg = tmp_path / "census.cfg"
    cfg.write_text(f"input.manifest = {out / 'variants' / 'bit_depth=12' / 'manifest.txt'}\n"
                   f"output.directory = {out}\n")
    assert main(["census", "--config", str(cfg)]) == 0
    rows = (out / "census" / "census.csv").read_text().splitlines()
    assert rows[0] == "scene_id,bit_depth,fraction,distinct_dark_levels"
    assert len(rows) == 5 and all(r.split(",")[1] == "12" for r in rows[1:])


def test_census_rejects_scene_bundles(tmp_path, base_manifest, capsys):
    cfg = tmp_path / "census.cfg"
    cfg.write_text(f"input.manifest = {base_manifest}\noutput.directory = {tmp_path / 'out'}\n")
    assert main(["census", "--config", str(cfg)]) == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert "rendered manifest" in err["message"]
