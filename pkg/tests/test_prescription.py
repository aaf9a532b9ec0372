import json
import math

import numpy as np
import pytest

from proxycam.designs import toy_injection, toy_tolerances, toy_triplet
from proxycam.io import config_hash, verify, write_config, write_csv, write_manifest
from proxycam.optics import Surface
from proxycam.perturbation import (Parameter, PerturbationVector, apply_perturbation,
                                   parameters_from_tolerances)
from proxycam.prescription import (SchemaError, loads_prescription, parse_prescription,
                                   prescription_dict, read_targets, write_prescription,
                                   write_targets)


# --------------------------------------------------------------------------
# perturbations
# --------------------------------------------------------------------------

def test_parameter_validation_and_labels():
    p = Parameter((5, 6), "decenter_x", 0.02)
    assert p.label == "decenter_x@5+6"
    assert p.fd_step == pytest.approx(2e-6)
    assert Parameter(3, "A4", 1e-3).surfaces == (3,)
    for bad in ("A3", "radius", "A0"):
        with pytest.raises(ValueError):
            Parameter((1,), bad, 1.0)
    with pytest.raises(ValueError):
        Parameter((1,), "c", -1.0)


def test_zero_perturbation_is_identity():
    ideal = toy_triplet()
    assert apply_perturbation(ideal, toy_tolerances(extra=True)) == ideal


def test_apply_perturbation_each_kind():
    ideal = toy_triplet()
    rows = [((1,), "c", 1.0), ((1,), "k", 1.0), ((2,), "A4", 1.0), ((3,), "tilt_gamma", 1.0),
            ((3,), "decenter_y", 1.0), ((2,), "thickness", 1.0), ((3,), "nd", 1.0), ((3,), "vd", 1.0)]
    pv = PerturbationVector(parameters_from_tolerances(rows),
                            [1e-3, -0.5, 2e-4, 0.01, 0.003, 0.02, 0.01, -2.0])
    s = apply_perturbation(ideal, pv).surfaces
    assert s[1].curvature == pytest.approx(ideal.surfaces[1].curvature + 1e-3)
    assert s[1].conic == -0.5
    assert s[2].aspheric == (0.0, 2e-4)
    assert s[3].tilt == (0.0, 0.0, 0.01) and s[3].decenter == (0.0, 0.003)
    assert s[2].thickness == pytest.approx(0.24)
    assert s[3].material.nd == pytest.approx(1.63) and s[3].material.vd == pytest.approx(34.4)
    with pytest.raises(ValueError):
        apply_perturbation(ideal, PerturbationVector((Parameter((2,), "nd", 0.1),), [0.01]))


def test_normalized_view_roundtrip():
    pv = toy_injection()
    x = pv.free_normalized()
    np.testing.assert_allclose(x, [0.5, 0.5, 0.5, 0.5])
    np.testing.assert_allclose(pv.zero().with_free_normalized(x).values, pv.values)
    frozen = PerturbationVector(tuple(Parameter(p.surfaces, p.name, p.tolerance, free=(i != 1))
                                      for i, p in enumerate(pv.parameters)), pv.values)
    assert frozen.free_normalized().size == 3
    moved = frozen.with_free_normalized(np.zeros(3))
    assert moved.values[1] == pv.values[1] and moved.values[0] == 0
    assert pv.within_bounds() and not pv.with_values(pv.values * 3).within_bounds()


# --------------------------------------------------------------------------
# prescription files
# --------------------------------------------------------------------------

def test_prescription_roundtrip(tmp_path):
    system = apply_perturbation(toy_triplet(), toy_injection())
    params = toy_injection()
    write_prescription(tmp_path / "p.json", system, params)
    back, bp = parse_prescription(tmp_path / "p.json")
    assert back == system
    assert bp.labels == params.labels
    np.testing.assert_array_equal(bp.values, params.values)
    assert prescription_dict(back, bp) == prescription_dict(system, params)


def minimal(**extra):
    doc = {"format": 1, "surfaces": [
        {"c": 0.02, "semi_aperture": 5, "thickness": 2, "material": {"nd": 1.5, "vd": 60}},
        {"c": 0.0, "semi_aperture": 5, "thickness": 40}]}
    doc.update(extra)
    return doc


def test_minimal_prescription_defaults():
    system, params = loads_prescription(json.dumps(minimal()))
    assert params is None and system.sensor is None and system.object_distance is None
    assert system.surfaces[1].material.is_air


def test_overlay_applies_on_load():
    doc = minimal(perturbation=[{"surface": 0, "dc": 0.001, "tilt": [0, 0.01, 0],
                                 "decenter": [0.1, 0], "dthickness": 0.05}])
    s = loads_prescription(json.dumps(doc))[0].surfaces[0]
    assert s.curvature == pytest.approx(0.021)
    assert s.tilt == (0.0, 0.01, 0.0) and s.decenter == (0.1, 0.0)
    assert s.thickness == pytest.approx(2.05)


@pytest.mark.parametrize("mutate, field", [
    (lambda d: d.update(format=2), "format"),
    (lambda d: d.update(surfaces=[]), "surfaces"),
    (lambda d: d["surfaces"][0].update(semi_aperture=-1), "semi_aperture"),
    (lambda d: d["surfaces"][0].update(material={"nd": 5.0, "vd": 30}), "material"),
    (lambda d: d["surfaces"][0].update(c=0.5, semi_aperture=5), "surfaces[0]"),
    (lambda d: d.update(stop_index=9), "stop_index"),
    (lambda d: d.update(perturbation=[{"surface": 7, "dc": 0.1}]), "perturbation"),
    (lambda d: d.update(parameters=[{"surfaces": [0], "name": "bogus", "tolerance": 1}]), "parameters"),
    (lambda d: d["surfaces"][0].update(colour="red"), "colour"),
])
def test_schema_errors_name_the_field(mutate, field):
    doc = minimal()
    mutate(doc)
    with pytest.raises(SchemaError) as exc:
        loads_prescription(json.dumps(doc))
    assert field in str(exc.value)


def test_lenient_mode_warns_on_unknown_keys():
    doc = minimal()
    doc["surfaces"][0]["colour"] = "red"
    with pytest.warns(UserWarning):
        loads_prescription(json.dumps(doc), strict=False)


def test_invalid_json_is_schema_error():
    with pytest.raises(SchemaError):
        loads_prescription("{not json")


# --------------------------------------------------------------------------
# targets
# --------------------------------------------------------------------------

def test_targets_roundtrip_and_absent_rows(tmp_path):
    vals = {(0, 0): 0.21, (0, 1): 0.2, (2, 3): 0.15}
    write_targets(tmp_path / "t.csv", vals, {(0, 1): "ok"}, header="config_hash=abc")
    with open(tmp_path / "t.csv", "a") as fh:
        fh.write("5,5,,absent: no edge\n")
    assert read_targets(tmp_path / "t.csv") == vals
    text = (tmp_path / "t.csv").read_text().splitlines()
    # fov_x is the column, fov_y the row
    assert text[-2].startswith("3,2,")


@pytest.mark.parametrize("body", [
    "fov_x,fov_y,sfra\n0,0,0.2\n0,0,0.3\n",
    "fov_x,fov_y,sfra\n0,0,-0.2\n",
    "fov_x,fov_y,sfra\n0,a,0.2\n",
    "fov_x,sfra\n0,0.2\n",
])
def test_targets_errors(tmp_path, body):
    (tmp_path / "t.csv").write_text(body)
    with pytest.raises(SchemaError):
        read_targets(tmp_path / "t.csv")


# --------------------------------------------------------------------------
# provenance
# --------------------------------------------------------------------------

def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_manifest_verify_detects_tampering(tmp_path):
    chash = write_config(tmp_path, {"seed": 1})
    write_csv(tmp_path / "x.csv", ["a"], [[1], [2]], chash)
    assert (tmp_path / "x.csv").read_text().startswith(f"# config_hash={chash}\n")
    write_manifest(tmp_path, chash)
    assert verify(tmp_path) == []
    (tmp_path / "x.csv").write_text("# config_hash=zzz\na\n3\n")
    problems = verify(tmp_path)
    assert any("hash mismatch" in p for p in problems)
    assert any("config hash differs" in p for p in problems)
    write_manifest(tmp_path, chash, complete=False)
    assert "run marked incomplete" in verify(tmp_path)
    assert verify(tmp_path / "nowhere") == ["MANIFEST.json missing"]
