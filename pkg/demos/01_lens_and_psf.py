"""Trace the toy triplet, then look at its PSF across the field.

Run from the repo root:  python3 demos/01_lens_and_psf.py
"""
from pathlib import Path

import numpy as np

from proxycam.designs import PHONE_SENSOR, ideal_focuser
from proxycam.diffraction import SensorWindow, huygens_psf, pupil_from_trace
from proxycam.optics import Field, PupilGrid, trace_bundle
from proxycam.prescription import parse_prescription
from proxycam.simulation import SimulationConfig, field_psfs, fov_samples

DATA = Path(__file__).parent / "data"

lens, tolerances = parse_prescription(DATA / "toy_triplet.json")
sensor = lens.sensor or PHONE_SENSOR
print(f"toy triplet: {len(lens.surfaces)} surfaces, EFL {lens.efl(0.55):.3f} mm")
print(f"free parameters: {[p.name + str(p.surfaces) for p in tolerances.parameters]}")

# A perfect f/2 lens first, as a sanity check: the PSF should be an Airy pattern
# whose first dark ring sits at 1.22 * lambda * N = 1.342 um.
ref = ideal_focuser(f_number=2.0)
bundle = trace_bundle(ref, Field(), PupilGrid(64), 0.55)
win = SensorWindow((0.0, 0.0), (81, 81), 0.05)
psf = huygens_psf(pupil_from_trace(bundle, ref), win)
row = psf.intensity[40, 40:]
print(f"ideal f/2: first minimum near {np.argmin(row[:40]) * 0.05:.2f} um")

# Now the triplet. The spot grows toward the corners of the sensor.
cfg = SimulationConfig(grid=(3, 3), pupil_samples=16, psf_pixels=25, psf_oversample=2)
for fov in fov_samples(lens, sensor, cfg.grid):
    if fov.index[0] != 1:
        continue
    psfs = field_psfs(lens, fov.field, sensor, cfg)
    g = next(iter(psfs.values()))
    yy, xx = np.mgrid[0:g.shape[0], 0:g.shape[1]]
    cy, cx = (g.intensity * yy).sum(), (g.intensity * xx).sum()
    rms = np.sqrt((g.intensity * ((yy - cy) ** 2 + (xx - cx) ** 2)).sum()) * g.pitch
    print(f"field {fov.field.x:+6.2f} deg: RMS spot radius {rms:.2f} um, peak {g.intensity.max():.4f}")
