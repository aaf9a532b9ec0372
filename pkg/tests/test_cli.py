import json
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from proxycam.cli import main
from proxycam.designs import PHONE_SENSOR, toy_tolerances, toy_triplet
from proxycam.prescription import write_prescription

SIM = ["--grid", "2x2", "--pupil-samples", "12", "--psf-oversample", "2", "--psf-pixels", "25"]


@pytest.fixture(scope="module")
def presc(tmp_path_factory):
    d = tmp_path_factory.mktemp("presc")
    sensor = replace(PHONE_SENSOR, resolution=(60, 80))
    path = d / "toy.json"
    write_prescription(path, toy_triplet(sensor), toy_tolerances())
    return path


def test_usage_errors_exit_2(tmp_path, presc, capsys):
    assert main([]) == 2
    assert main(["bogus"]) == 2
    assert main(["trace", "--prescription", str(tmp_path / "no.json"), "--out", str(tmp_path)]) == 2
    assert main(["psf", "--prescription", str(presc), "--out", str(tmp_path), "--grid", "2by2"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": 1, "surfaces": [{"c": "x"}]}')
    assert main(["trace", "--prescription", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "surfaces[0].c" in capsys.readouterr().err


def test_compute_failure_exits_1(tmp_path, presc):
    args = ["psf", "--prescription", str(presc), "--out", str(tmp_path), "--grid", "1x1",
            "--psf-pixels", "1", "--psf-oversample", "1", "--pupil-samples", "12"]
    assert main(args) == 1


def test_trace_writes_rays_and_provenance(tmp_path, presc):
    out = tmp_path / "t"
    assert main(["trace", "--prescription", str(presc), "--out", str(out), "--pupil-samples", "8"]) == 0
    lines = (out / "rays.csv").read_text().splitlines()
    chash = lines[0].split("=", 1)[1]
    assert json.loads((out / "MANIFEST.json").read_text())["config_hash"] == chash
    assert lines[1] == "ray,status,x_mm,y_mm,opl_mm,terminated_at"
    assert main(["verify", "--out", str(out)]) == 0
    (out / "rays.csv").write_text("tampered\n")
    assert main(["verify", "--out", str(out)]) == 1


def test_edge_sfr_optimize_pipeline(tmp_path, presc):
    assert main(["edge", "--prescription", str(presc), "--out", str(tmp_path / "e"), *SIM]) == 0
    tiles = [[np.load(tmp_path / "e" / f"edge_{i:02d}_{j:02d}.npy") for j in range(2)] for i in range(2)]
    np.save(tmp_path / "chart.npy", np.block(tiles))
    assert main(["sfr", "--image", str(tmp_path / "chart.npy"), "--grid", "2x2",
                 "--out", str(tmp_path / "s"), "--curves"]) == 0
    rows = (tmp_path / "s" / "sfr.csv").read_text().splitlines()
    assert rows[1] == "fov_x,fov_y,sfra,angle,quality" and len(rows) == 6
    assert (tmp_path / "s" / "sfr_curves.csv").exists()
    # the chart was rendered by the ideal lens, so optimization starts at the optimum
    rc = main(["optimize", "--prescription", str(presc), "--targets", str(tmp_path / "s" / "sfr.csv"),
               "--out", str(tmp_path / "proxy.json"), "--report", str(tmp_path / "report.csv"),
               "--max-iter", "2", *SIM])
    assert rc == 0
    report = (tmp_path / "report.csv").read_text().splitlines()
    assert report[1] == "iter,merit,ftf,grad_norm,eps_summary,accepted"
    ftf0 = float(report[2].split(",")[2])
    assert ftf0 < 1e-4
    doc = json.loads((tmp_path / "proxy.json").read_text())
    assert [p["name"] for p in doc["parameters"]] == ["c", "thickness", "tilt_beta", "decenter_x"]


def test_optimize_rejects_targets_outside_grid(tmp_path, presc):
    (tmp_path / "t.csv").write_text("fov_x,fov_y,sfra\n7,0,0.2\n")
    assert main(["optimize", "--prescription", str(presc), "--targets", str(tmp_path / "t.csv"),
                 "--out", str(tmp_path / "p.json"), "--report", str(tmp_path / "r.csv"), *SIM]) == 2


def test_sample_and_degrade_are_reproducible(tmp_path, presc):
    lat = tmp_path / "lat"
    lat.mkdir()
    rng = np.random.default_rng(0)
    for i in range(2):
        np.save(lat / f"l{i}.npy", rng.random((30, 40)))
    runs = []
    for k in range(2):
        out = tmp_path / f"d{k}"
        assert main(["degrade", "--prescription", str(presc), "--latents", str(lat), "--count", "2",
                     "--seed", "5", "--read-noise", "1", "--out", str(out), *SIM]) == 0
        runs.append(json.loads((out / "MANIFEST.json").read_text()))
    assert runs[0] == runs[1]
    assert len([f for f in runs[0]["files"] if f.endswith("_input.npy")]) == 4
    assert main(["sample", "--prescription", str(presc), "--count", "3", "--seed", "5",
                 "--out", str(tmp_path / "s")]) == 0
    assert len((tmp_path / "s" / "cameras.csv").read_text().splitlines()) == 5


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "proxycam", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
