"""System parameters that can deviate from the design, and how they are applied."""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .optics import LensSystem, MaterialSpec, Surface

_ASPH = re.compile(r"^A(\d+)$")
NAMES = ("c", "k", "tilt_alpha", "tilt_beta", "tilt_gamma", "decenter_x", "decenter_y",
         "thickness", "nd", "vd")


def _check_name(name: str) -> None:
    m = _ASPH.match(name)
    if name not in NAMES and not (m and int(m.group(1)) >= 2 and int(m.group(1)) % 2 == 0):
        raise ValueError(f"unknown parameter name {name!r}")


@dataclass(frozen=True)
class Parameter:
    """One perturbable quantity.

    ``surfaces`` lists every surface the value is applied to (an element
    decenter moves both of its faces). Values are offsets from the design in
    native units: 1/mm, mm^(1-2j), rad, mm or index.
    """

    surfaces: tuple[int, ...]
    name: str
    tolerance: float
    free: bool = True
    step: float | None = None

    def __post_init__(self):
        s = (self.surfaces,) if isinstance(self.surfaces, int) else tuple(self.surfaces)
        object.__setattr__(self, "surfaces", tuple(int(i) for i in s))
        _check_name(self.name)
        if not self.surfaces:
            raise ValueError("parameter needs at least one surface")
        if not np.isfinite(self.tolerance) or self.tolerance < 0:
            raise ValueError(f"tolerance of {self.label} must be finite and >= 0")
        if self.step is not None and not self.step > 0:
            raise ValueError(f"step of {self.label} must be positive")

    @property
    def label(self) -> str:
        return f"{self.name}@{'+'.join(map(str, self.surfaces))}"

    @property
    def fd_step(self) -> float:
        """Forward-difference step in native units."""
        return self.step if self.step is not None else max(1e-4 * self.tolerance, 1e-7)


@dataclass(frozen=True)
class PerturbationVector:
    """Ordered parameters with current offsets. Frozen parameters keep their
    value; only free ones are exposed to the optimizer."""

    parameters: tuple[Parameter, ...]
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        params = tuple(self.parameters)
        vals = np.zeros(len(params)) if self.values is None else np.asarray(self.values, float)
        if vals.shape != (len(params),):
            raise ValueError("values do not match the parameter list")
        object.__setattr__(self, "parameters", params)
        object.__setattr__(self, "values", vals.copy())

    def __len__(self):
        return len(self.parameters)

    @property
    def free_mask(self) -> np.ndarray:
        return np.array([p.free for p in self.parameters], dtype=bool)

    @property
    def tolerances(self) -> np.ndarray:
        return np.array([p.tolerance for p in self.parameters])

    @property
    def labels(self) -> list[str]:
        return [p.label for p in self.parameters]

    def with_values(self, values) -> "PerturbationVector":
        return replace(self, values=np.asarray(values, dtype=float))

    # normalized view of the free parameters: value / tolerance
    def scale(self) -> np.ndarray:
        tol = self.tolerances[self.free_mask]
        return np.where(tol > 0, tol, 1.0)

    def free_normalized(self) -> np.ndarray:
        return self.values[self.free_mask] / self.scale()

    def with_free_normalized(self, x) -> "PerturbationVector":
        vals = self.values.copy()
        vals[self.free_mask] = np.asarray(x, dtype=float) * self.scale()
        return self.with_values(vals)

    def normalized_steps(self) -> np.ndarray:
        steps = np.array([p.fd_step for p in self.parameters])[self.free_mask]
        return steps / self.scale()

    def within_bounds(self, slack: float = 1e-12) -> bool:
        return bool(np.all(np.abs(self.values) <= self.tolerances * (1 + slack) + slack))

    def zero(self) -> "PerturbationVector":
        return self.with_values(np.zeros(len(self)))


def _apply_one(surf: Surface, name: str, delta: float) -> Surface:
    if delta == 0.0:
        return surf
    if name == "c":
        return surf.replace(curvature=surf.curvature + delta)
    if name == "k":
        return surf.replace(conic=surf.conic + delta)
    if name.startswith("tilt_"):
        i = ("tilt_alpha", "tilt_beta", "tilt_gamma").index(name)
        tilt = list(surf.tilt)
        tilt[i] += delta
        return surf.replace(tilt=tuple(tilt))
    if name.startswith("decenter_"):
        dec = list(surf.decenter)
        dec[0 if name.endswith("x") else 1] += delta
        return surf.replace(decenter=tuple(dec))
    if name == "thickness":
        return surf.replace(thickness=surf.thickness + delta)
    if name in ("nd", "vd"):
        if surf.material.is_air:
            raise ValueError("cannot perturb the material of an air gap")
        m = surf.material
        new = MaterialSpec(m.nd + delta, m.vd) if name == "nd" else MaterialSpec(m.nd, m.vd + delta)
        return surf.replace(material=new)
    j = int(_ASPH.match(name).group(1)) // 2       # A2 -> aspheric[0]
    coeffs = list(surf.aspheric) + [0.0] * max(0, j - len(surf.aspheric))
    coeffs[j - 1] += delta
    return surf.replace(aspheric=tuple(coeffs))


def apply_perturbation(ideal: LensSystem, pv: PerturbationVector) -> LensSystem:
    """Return ``ideal`` with every parameter offset applied; zero offsets give
    back the identical surfaces."""
    surfaces = list(ideal.surfaces)
    for p, v in zip(pv.parameters, pv.values):
        for i in p.surfaces:
            if not 0 <= i < len(surfaces):
                raise IndexError(f"{p.label}: surface index out of range")
            surfaces[i] = _apply_one(surfaces[i], p.name, float(v))
    return ideal.replace(surfaces=tuple(surfaces))


def sample_values(pv: PerturbationVector, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw within +-tolerance for every parameter."""
    tol = pv.tolerances
    return rng.uniform(-1.0, 1.0, size=len(tol)) * tol


def parameters_from_tolerances(rows: Sequence[tuple]) -> tuple[Parameter, ...]:
    """Shorthand: ``(surfaces, name, tolerance[, free])`` tuples."""
    return tuple(Parameter(*r) for r in rows)
