"""Build a proxy camera for a lens whose manufacturing errors we pretend not to know.

A "real" lens is made by perturbing the toy triplet. Its noisy slanted-edge
SFRAs across the field become the targets, and the optimizer recovers a
prescription whose simulated SFRs match them. Takes a few minutes on one core.

Run from the repo root:  python3 demos/03_proxy_round_trip.py
"""
from dataclasses import replace
from pathlib import Path

import numpy as np

from proxycam.designs import PHONE_SENSOR, toy_injection
from proxycam.optimizer import OptimizerConfig, construct_proxy, metric_value, sfr_mse
from proxycam.perturbation import apply_perturbation
from proxycam.prescription import parse_prescription
from proxycam.sensor import NoiseModel
from proxycam.simulation import SimulationConfig, fov_samples, simulate_sfr

ideal, tolerances = parse_prescription(Path(__file__).parent / "data" / "toy_triplet.json")
sensor = ideal.sensor or PHONE_SENSOR
sim = SimulationConfig(grid=(2, 3), pupil_samples=16, psf_pixels=25, psf_oversample=2)
fovs = fov_samples(ideal, sensor, sim.grid)

hidden = toy_injection()
real = apply_perturbation(ideal, hidden)
measured = simulate_sfr(real, fovs, sensor, replace(sim, noise=NoiseModel(2.0, 8.0, seed=1)))

cfg = OptimizerConfig(max_iter=20)
targets = {k: metric_value(c, cfg) for k, c in measured.items()}
print("target SFRA per field:", {k: round(v, 4) for k, v in targets.items()})

res = construct_proxy(ideal, tolerances, fovs, targets, sensor, sim, cfg)
for h in res.history:
    mark = "" if h.accepted else "  (rejected)"
    print(f"iter {h.iteration:2d}  f'f = {h.ftf:.3e}{mark}")

before = sfr_mse(simulate_sfr(ideal, fovs, sensor, sim.merit_mode()), measured)
after = sfr_mse(simulate_sfr(res.system, fovs, sensor, sim.merit_mode()), measured)
print(f"SFR MSE vs measurement: ideal lens {before:.2e}, proxy {after:.2e}")
print("hidden perturbation (in tolerance units):", np.round(hidden.values / tolerances.tolerances, 2))
print("recovered                              :", np.round(res.perturbation.free_normalized(), 2))
