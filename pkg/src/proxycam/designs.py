"""Small documented lens systems used by the tests, demos and acceptance runs."""
from __future__ import annotations

import math

import numpy as np
from scipy.optimize import brentq

from .optics import AIR, LensSystem, MaterialSpec, Surface, sag
from .sensor import SensorModel


def ideal_focuser(f_number: float = 2.0, wavelength: float = 0.55, radius: float = 10.0,
                  nd: float = 1.5, vd: float = 1e6, sensor: SensorModel | None = None) -> LensSystem:
    """Aberration-free focusing system for collimated on-axis light.

    An ellipsoid with conic -1/n^2 refracts a collimated beam into glass with a
    perfect focus; a second surface concentric with that focus lets the beam
    leave into air undeviated. The stop sits on the first surface and is sized
    so that the marginal ray reaches the focus at NA = 1 / (2 f_number).
    """
    glass = MaterialSpec(nd, vd)
    n = glass.index(wavelength)
    c = 1.0 / radius
    conic = -1.0 / n ** 2
    focus = n * radius / (n - 1.0)
    t = 0.2 * focus
    na = 1.0 / (2.0 * f_number)
    probe = Surface(curvature=c, conic=conic, semi_aperture=1e-6)

    def sin_u(h):
        z = sag(probe, h)
        return h / math.hypot(h, focus - z) - na

    h_max = 0.999 / (abs(c) * math.sqrt(1 + conic))
    h = brentq(sin_u, 1e-9, h_max)
    first = Surface(curvature=c, conic=conic, semi_aperture=h, thickness=t, material=glass)
    second = Surface(curvature=1.0 / (focus - t), semi_aperture=2 * h, thickness=focus - t)
    return LensSystem((first, second), stop_index=0, sensor=sensor)


def singlet(radius: float = 50.0, nd: float = 1.5, thickness: float = 2.0,
            back: float = 200.0, semi_aperture: float = 10.0) -> LensSystem:
    """Plano-convex singlet, curved side first; f = R / (n - 1)."""
    glass = MaterialSpec(nd, 64.0)
    return LensSystem((
        Surface(curvature=1.0 / radius, semi_aperture=semi_aperture, thickness=thickness,
                material=glass),
        Surface(semi_aperture=semi_aperture, thickness=back),
    ))


PHONE_SENSOR = SensorModel(pixel_pitch=1.4, resolution=(1200, 1600), wavelengths=(0.55,),
                           response={"G": (1.0,)}, bit_depth=10)


def toy_triplet(sensor: SensorModel | None = None) -> LensSystem:
    """Front-stop three-element lens at phone scale (f = 4.00 mm, f/3.3).

    Surface 0 is a flat stop in air so that lens decenters never clip the
    pupil; surfaces 1-6 form a positive/negative/positive triplet whose
    radii were balanced for spot size out to a 20 degree half field. The
    last thickness places the sensor at paraxial focus for 0.55 um.
    """
    crown = MaterialSpec(1.5891, 61.2)
    flint = MaterialSpec(1.6200, 36.4)
    surfaces = (
        Surface(semi_aperture=0.60, thickness=0.06),                                    # stop
        Surface(curvature=1 / 1.2799, semi_aperture=0.85, thickness=0.45, material=crown),
        Surface(curvature=-1 / 6.8006, semi_aperture=0.85, thickness=0.22),
        Surface(curvature=-1 / 2.0510, semi_aperture=0.80, thickness=0.16, material=flint),
        Surface(curvature=1 / 1.3145, semi_aperture=0.80, thickness=0.30),
        Surface(curvature=1 / 6.0947, semi_aperture=0.95, thickness=0.45, material=crown),
        Surface(curvature=-1 / 2.0097, semi_aperture=1.00, thickness=2.8823),
    )
    return LensSystem(surfaces, stop_index=0, sensor=sensor or PHONE_SENSOR)


def toy_tolerances(free: bool = True, extra: bool = False) -> "PerturbationVector":
    """Tolerance box for :func:`toy_triplet` used by the round-trip demos.

    The rear element (surfaces 5-6) may tilt and decenter as a unit; the
    surface 5 curvature and the first air gap may deviate. ``extra`` appends
    four more degrees of freedom (second air gap, the orthogonal tilt and
    decenter, first-surface curvature) that the injection leaves at zero.
    """
    from .perturbation import Parameter, PerturbationVector

    c5 = 1 / 6.0947
    params = [
        Parameter((5,), "c", 0.01 * c5, free),
        Parameter((2,), "thickness", 0.010, free),
        Parameter((5, 6), "tilt_beta", math.radians(0.1), free),
        Parameter((5, 6), "decenter_x", 0.020, free),
    ]
    if extra:
        params += [
            Parameter((4,), "thickness", 0.010, free),
            Parameter((5, 6), "tilt_alpha", math.radians(0.1), free),
            Parameter((5, 6), "decenter_y", 0.020, free),
            Parameter((1,), "c", 0.001 / 1.2799, free),
        ]
    return PerturbationVector(tuple(params))


def toy_injection(extra: bool = False) -> "PerturbationVector":
    """Known deviations: curvature +0.5 %, tilt 0.05 deg, decenter 10 um, thickness 5 um."""
    pv = toy_tolerances(extra=extra)
    vals = np.zeros(len(pv))
    vals[:4] = [0.005 / 6.0947, 0.005, math.radians(0.05), 0.010]
    return pv.with_values(vals)
