"""Lens prescription files (JSON, ``format: 1``) and SFRA target tables.

Prescription layout::

    {
      "format": 1,
      "stop_index": 0,
      "object_distance": null,                 # mm, null = infinity
      "sensor": {"pixel_pitch_um": 1.4, "resolution": [1200, 1600],
                 "wavelengths_um": [0.55], "response": {"G": [1.0]}, "bit_depth": 10},
      "surfaces": [
        {"c": 0.5, "k": 0.0, "A": [], "semi_aperture": 1.0, "thickness": 0.5,
         "material": {"nd": 1.5891, "vd": 61.2},          # null = air
         "tilt": [0, 0, 0], "decenter": [0, 0], "thickness_dir": [0, 0, 1]}
      ],
      "perturbation": [                                  # optional overlay
        {"surface": 1, "dc": 0.0, "dk": 0.0, "dA": [], "tilt": [0, 0, 0],
         "decenter": [0, 0], "dthickness": 0.0, "dnd": 0.0, "dvd": 0.0}
      ],
      "parameters": [                                    # optional, for optimize/sample
        {"surfaces": [5, 6], "name": "decenter_x", "tolerance": 0.02,
         "free": true, "step": null, "value": 0.0}
      ]
    }

Only ``surfaces`` is required. Unknown keys are errors in strict mode and
warnings otherwise.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .optics import AIR, LensSystem, MaterialSpec, SagDomainError, Surface
from .perturbation import Parameter, PerturbationVector
from .sensor import SensorModel

FORMAT_VERSION = 1

_TOP = {"format", "name", "stop_index", "object_distance", "sensor", "surfaces",
        "perturbation", "parameters"}
_SURF = {"c", "k", "A", "semi_aperture", "thickness", "material", "tilt", "decenter",
         "thickness_dir", "comment"}
_MAT = {"nd", "vd"}
_SENSOR = {"pixel_pitch_um", "resolution", "wavelengths_um", "response", "bit_depth"}
_OVERLAY = {"surface", "dc", "dk", "dA", "tilt", "decenter", "dthickness", "dnd", "dvd"}
_PARAM = {"surfaces", "surface", "name", "tolerance", "free", "step", "value"}


class SchemaError(ValueError):
    """Invalid prescription; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class _Reader:
    def __init__(self, strict: bool):
        self.strict = strict

    def keys(self, obj: Any, allowed: set, where: str) -> dict:
        if not isinstance(obj, dict):
            raise SchemaError(where, "expected an object")
        extra = sorted(set(obj) - allowed)
        if extra:
            msg = f"unknown field(s) {', '.join(extra)}"
            if self.strict:
                raise SchemaError(f"{where}.{extra[0]}" if where else extra[0], msg)
            warnings.warn(f"{where or 'file'}: {msg}", stacklevel=3)
        return obj

    @staticmethod
    def number(obj: dict, key: str, where: str, default=None, positive=False,
               nonneg=False) -> float:
        val = obj.get(key, default)
        name = f"{where}.{key}"
        if val is None:
            raise SchemaError(name, "required")
        if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
            raise SchemaError(name, "must be a finite number")
        if positive and not val > 0:
            raise SchemaError(name, "must be positive")
        if nonneg and val < 0:
            raise SchemaError(name, "must be non-negative")
        return float(val)

    @staticmethod
    def vector(obj: dict, key: str, where: str, n: int | None, default) -> tuple[float, ...]:
        val = obj.get(key, default)
        name = f"{where}.{key}"
        if not isinstance(val, (list, tuple)) or (n is not None and len(val) != n):
            raise SchemaError(name, f"must be a list of {n if n is not None else 'any number of'} numbers")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
                   for v in val):
            raise SchemaError(name, "entries must be finite numbers")
        return tuple(float(v) for v in val)


def _material(r: _Reader, obj, where: str) -> MaterialSpec:
    if obj is None:
        return AIR
    r.keys(obj, _MAT, where)
    nd = r.number(obj, "nd", where)
    vd = obj.get("vd")
    if vd is None and nd == 1.0:
        vd = math.inf
    if vd is None:
        raise SchemaError(f"{where}.vd", "required for glass")
    try:
        return MaterialSpec(nd, float(vd))
    except ValueError as exc:
        raise SchemaError(where, str(exc)) from None


def _surface(r: _Reader, obj, where: str) -> Surface:
    r.keys(obj, _SURF, where)
    try:
        return Surface(
            curvature=r.number(obj, "c", where, 0.0),
            conic=r.number(obj, "k", where, 0.0),
            aspheric=r.vector(obj, "A", where, None, []),
            semi_aperture=r.number(obj, "semi_aperture", where, positive=True),
            thickness=r.number(obj, "thickness", where, 0.0),
            material=_material(r, obj.get("material"), f"{where}.material"),
            tilt=r.vector(obj, "tilt", where, 3, [0, 0, 0]),
            decenter=r.vector(obj, "decenter", where, 2, [0, 0]),
            thickness_dir=r.vector(obj, "thickness_dir", where, 3, [0, 0, 1]),
        )
    except SagDomainError as exc:
        raise SchemaError(f"{where}.semi_aperture", str(exc)) from None
    except SchemaError:
        raise
    except ValueError as exc:
        raise SchemaError(where, str(exc)) from None


def _sensor(r: _Reader, obj, where="sensor") -> SensorModel | None:
    if obj is None:
        return None
    r.keys(obj, _SENSOR, where)
    wl = r.vector(obj, "wavelengths_um", where, None, [0.55])
    resp = obj.get("response", {"G": [1.0] * len(wl)})
    if not isinstance(resp, dict):
        raise SchemaError(f"{where}.response", "expected an object of channel weights")
    res = obj.get("resolution", [1200, 1600])
    if not (isinstance(res, list) and len(res) == 2 and all(isinstance(v, int) for v in res)):
        raise SchemaError(f"{where}.resolution", "must be [H, W] integers")
    try:
        return SensorModel(pixel_pitch=r.number(obj, "pixel_pitch_um", where, 1.4, positive=True),
                           resolution=tuple(res), wavelengths=wl,
                           response={k: tuple(v) for k, v in resp.items()},
                           bit_depth=int(obj.get("bit_depth", 10)))
    except (TypeError, ValueError) as exc:
        raise SchemaError(where, str(exc)) from None


def _apply_overlay(r: _Reader, surfaces: list[Surface], items, where="perturbation") -> None:
    if not isinstance(items, list):
        raise SchemaError(where, "expected a list")
    for n, obj in enumerate(items):
        w = f"{where}[{n}]"
        r.keys(obj, _OVERLAY, w)
        i = obj.get("surface")
        if not isinstance(i, int) or not 0 <= i < len(surfaces):
            raise SchemaError(f"{w}.surface", "must index an existing surface")
        s = surfaces[i]
        dA = r.vector(obj, "dA", w, None, [])
        asph = list(s.aspheric) + [0.0] * max(0, len(dA) - len(s.aspheric))
        for j, v in enumerate(dA):
            asph[j] += v
        tilt = r.vector(obj, "tilt", w, 3, [0, 0, 0])
        dec = r.vector(obj, "decenter", w, 2, [0, 0])
        mat = s.material
        dnd, dvd = r.number(obj, "dnd", w, 0.0), r.number(obj, "dvd", w, 0.0)
        if (dnd or dvd) and mat.is_air:
            raise SchemaError(f"{w}.dnd", "air gaps have no material to perturb")
        try:
            if dnd or dvd:
                mat = MaterialSpec(mat.nd + dnd, mat.vd + dvd)
            surfaces[i] = s.replace(
                curvature=s.curvature + r.number(obj, "dc", w, 0.0),
                conic=s.conic + r.number(obj, "dk", w, 0.0),
                aspheric=tuple(asph),
                tilt=tuple(a + b for a, b in zip(s.tilt, tilt)),
                decenter=tuple(a + b for a, b in zip(s.decenter, dec)),
                thickness=s.thickness + r.number(obj, "dthickness", w, 0.0),
                material=mat,
            )
        except ValueError as exc:
            raise SchemaError(w, str(exc)) from None


def _parameters(r: _Reader, items, n_surf: int, where="parameters") -> PerturbationVector | None:
    if items is None:
        return None
    if not isinstance(items, list):
        raise SchemaError(where, "expected a list")
    params, values = [], []
    for n, obj in enumerate(items):
        w = f"{where}[{n}]"
        r.keys(obj, _PARAM, w)
        surf = obj.get("surfaces", obj.get("surface"))
        surf = [surf] if isinstance(surf, int) else surf
        if not isinstance(surf, list) or not surf or not all(
                isinstance(i, int) and 0 <= i < n_surf for i in surf):
            raise SchemaError(f"{w}.surfaces", "must list existing surface indices")
        step = obj.get("step")
        try:
            params.append(Parameter(tuple(surf), str(obj.get("name")),
                                    r.number(obj, "tolerance", w, nonneg=True),
                                    bool(obj.get("free", True)),
                                    None if step is None else r.number(obj, "step", w, positive=True)))
        except ValueError as exc:
            raise SchemaError(w, str(exc)) from None
        values.append(r.number(obj, "value", w, 0.0))
    return PerturbationVector(tuple(params), np.array(values))


def loads_prescription(text: str, strict: bool = True) -> tuple[LensSystem, PerturbationVector | None]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"line {exc.lineno}", exc.msg) from None
    r = _Reader(strict)
    r.keys(doc, _TOP, "")
    fmt = doc.get("format")
    if fmt != FORMAT_VERSION:
        raise SchemaError("format", f"unsupported format version {fmt!r}")
    items = doc.get("surfaces")
    if not isinstance(items, list) or not items:
        raise SchemaError("surfaces", "at least one surface is required")
    surfaces = [_surface(r, s, f"surfaces[{i}]") for i, s in enumerate(items)]
    if "perturbation" in doc:
        _apply_overlay(r, surfaces, doc["perturbation"])
    stop = doc.get("stop_index", 0)
    if not isinstance(stop, int) or not 0 <= stop < len(surfaces):
        raise SchemaError("stop_index", "must index an existing surface")
    obj = doc.get("object_distance")
    if obj is not None:
        obj = r.number(doc, "object_distance", "", positive=True)
    try:
        system = LensSystem(tuple(surfaces), stop, _sensor(r, doc.get("sensor")), obj)
    except ValueError as exc:
        raise SchemaError("surfaces", str(exc)) from None
    return system, _parameters(r, doc.get("parameters"), len(surfaces))


def parse_prescription(path, strict: bool = True) -> tuple[LensSystem, PerturbationVector | None]:
    """Read and validate a prescription; returns the system and the parameter
    template (``None`` when the file lists no parameters)."""
    return loads_prescription(Path(path).read_text(), strict)


def _num(v: float):
    return None if math.isinf(v) else v


def prescription_dict(system: LensSystem, params: PerturbationVector | None = None) -> dict:
    surfaces = []
    for s in system.surfaces:
        d = {"c": s.curvature, "k": s.conic, "A": list(s.aspheric),
             "semi_aperture": s.semi_aperture, "thickness": s.thickness,
             "material": None if s.material.is_air else {"nd": s.material.nd,
                                                         "vd": _num(s.material.vd)}}
        if any(s.tilt):
            d["tilt"] = list(s.tilt)
        if any(s.decenter):
            d["decenter"] = list(s.decenter)
        if s.thickness_dir != (0.0, 0.0, 1.0):
            d["thickness_dir"] = list(s.thickness_dir)
        surfaces.append(d)
    doc: dict = {"format": FORMAT_VERSION, "stop_index": system.stop_index,
                 "object_distance": system.object_distance, "surfaces": surfaces}
    if system.sensor is not None:
        doc["sensor"] = system.sensor.to_dict()
    if params is not None:
        doc["parameters"] = [
            {"surfaces": list(p.surfaces), "name": p.name, "tolerance": p.tolerance,
             "free": p.free, "step": p.step, "value": float(v)}
            for p, v in zip(params.parameters, params.values)]
    return doc


def write_prescription(path, system: LensSystem, params: PerturbationVector | None = None) -> None:
    Path(path).write_text(json.dumps(prescription_dict(system, params), indent=2) + "\n")


# --------------------------------------------------------------------------
# SFRA targets
# --------------------------------------------------------------------------

def read_targets(path) -> dict[tuple[int, int], float]:
    """``{(row, col): sfra}`` from a CSV with columns fov_x, fov_y, sfra, quality.

    ``fov_x`` is the grid column and ``fov_y`` the grid row. Lines starting
    with ``#`` are comments; rows whose quality starts with ``absent`` are skipped.
    """
    out: dict[tuple[int, int], float] = {}
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        missing = {"fov_x", "fov_y", "sfra"} - set(rows.fieldnames or ())
        if missing:
            raise SchemaError("header", f"missing column(s) {', '.join(sorted(missing))}")
        for n, row in enumerate(rows, start=2):
            quality = (row.get("quality") or "ok").strip()
            if quality.startswith("absent"):
                continue
            try:
                key = (int(row["fov_y"]), int(row["fov_x"]))
                val = float(row["sfra"])
            except (TypeError, ValueError):
                raise SchemaError(f"row {n}", "fov_x/fov_y must be integers and sfra a number") from None
            if key in out:
                raise SchemaError(f"row {n}", f"duplicate FoV {key}")
            if not val > 0:
                raise SchemaError(f"row {n}.sfra", "must be positive")
            out[key] = val
    return out


def write_targets(path, values: Mapping[tuple[int, int], float], quality: Mapping | None = None,
                  header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["fov_x", "fov_y", "sfra", "quality"])
        for (i, j) in sorted(values):
            w.writerow([j, i, repr(float(values[(i, j)])), (quality or {}).get((i, j), "ok")])
