"""Edge-imaging simulation per field of view: trace, PSF, slanted edge, SFR."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .diffraction import PsfGrid, SensorWindow, huygens_psf, polychromatic_psf, pupil_from_trace
from .imaging import FovPsfSet, synth_edge
from .optics import Field, LensSystem, PupilGrid, trace_bundle
from .sensor import NoiseModel, SensorModel
from .sfr import EdgeFit, SfrCurve, build_esf, estimate_edge, sfr_from_esf

FovIndex = tuple[int, int]


@dataclass(frozen=True)
class SimulationConfig:
    grid: tuple[int, int] = (15, 20)
    pupil_samples: int = 32
    psf_oversample: int = 4         # PSF samples per pixel pitch
    psf_pixels: int = 21            # PSF window width in pixels (odd keeps kernels centred)
    patch: tuple[int, int] = (64, 64)
    angle: float = 10.0             # degrees
    contrast: tuple[float, float] = (0.2, 0.8)   # fractions of full scale
    noise: NoiseModel | None = None
    quantize: bool = True
    known_geometry: bool = False    # project with the synthetic edge line instead of a fit
    channel: str | None = None      # channel used for edges; first sensor channel by default
    workers: int = 1

    def __post_init__(self):
        if self.psf_oversample < 1 or self.psf_pixels < 1 or self.pupil_samples < 1:
            raise ValueError("sampling parameters must be positive")
        if min(self.grid) < 1:
            raise ValueError("grid must be at least 1x1")

    def merit_mode(self) -> "SimulationConfig":
        """Noise-free, unquantized, fixed-geometry variant for finite differences."""
        return replace(self, noise=None, quantize=False, known_geometry=True)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("grid", "pupil_samples", "psf_oversample",
                                           "psf_pixels", "patch", "angle", "contrast",
                                           "quantize", "known_geometry", "channel")}
        d["noise"] = None if self.noise is None else {
            "read_sigma": self.noise.read_sigma, "gain": self.noise.gain, "seed": self.noise.seed}
        return d


@dataclass(frozen=True)
class FovSample:
    index: FovIndex
    position: tuple[float, float]   # mm on the sensor, origin at the centre
    field: Field


def fov_positions(sensor: SensorModel, grid: tuple[int, int]) -> list[tuple[FovIndex, tuple[float, float]]]:
    """Centres of an even ``grid`` division of the sensor in mm (x right, y down)."""
    h, w = sensor.resolution
    gy, gx = grid
    ye = np.linspace(0, h, gy + 1)
    xe = np.linspace(0, w, gx + 1)
    p = sensor.pixel_pitch * 1e-3
    out = []
    for i in range(gy):
        yc = ((ye[i] + ye[i + 1]) / 2 - h / 2) * p
        for j in range(gx):
            xc = ((xe[j] + xe[j + 1]) / 2 - w / 2) * p
            out.append(((i, j), (float(xc), float(yc))))
    return out


def fov_samples(ideal: LensSystem, sensor: SensorModel, grid: tuple[int, int],
                wavelength: float = 0.55) -> list[FovSample]:
    """Object-space fields aimed at each cell centre through the *ideal* lens.
    Perturbed systems reuse these fields, as a real test chart stays put."""
    return [FovSample(idx, pos, ideal.image_field(pos[0], pos[1], wavelength))
            for idx, pos in fov_positions(sensor, grid)]


def field_psfs(system: LensSystem, fld: Field, sensor: SensorModel, config: SimulationConfig,
               fov_index: FovIndex | None = None) -> dict[str, PsfGrid]:
    """Per-channel PSFs on a window centred at the geometric spot centroid."""
    grid = PupilGrid(config.pupil_samples)
    bundles = [trace_bundle(system, fld, grid, lam) for lam in sensor.wavelengths]
    weights = np.mean([sensor.response[c] for c in sensor.channels], axis=0)
    cents = np.array([b.centroid() for b in bundles])
    centre = tuple(float(v) for v in (weights[:, None] * cents).sum(0) / weights.sum())
    n = config.psf_pixels * config.psf_oversample
    window = SensorWindow(centre, (n, n), sensor.pixel_pitch / config.psf_oversample)
    mono = [huygens_psf(pupil_from_trace(b, system), window) for b in bundles]
    out = {}
    for ch in sensor.channels:
        psf = polychromatic_psf(mono, sensor.response[ch], sensor.wavelengths)
        out[ch] = replace(psf, fov_index=fov_index)
    return out


def edge_fit_for(config: SimulationConfig) -> EdgeFit:
    """The line the synthetic edge was drawn on, in patch pixel indices."""
    h, w = config.patch
    slope = math.tan(math.radians(config.angle))
    return EdgeFit(config.angle, slope, (w - 1) / 2, 0.0)


def simulate_edge(system: LensSystem, fld: Field, sensor: SensorModel, config: SimulationConfig,
                  seed: int | None = None, fov_index: FovIndex | None = None) -> np.ndarray:
    ch = config.channel or sensor.channels[0]
    psf = field_psfs(system, fld, sensor, config, fov_index)[ch]
    fs = sensor.full_scale
    return synth_edge(psf, config.angle, sensor, config.noise,
                      (config.contrast[0] * fs, config.contrast[1] * fs), config.patch,
                      quantize=config.quantize, seed=seed)


def measure_edge(patch: np.ndarray, config: SimulationConfig) -> SfrCurve:
    fit = edge_fit_for(config) if config.known_geometry else estimate_edge(patch)
    return sfr_from_esf(build_esf(patch, fit))


def _seed_for(config: SimulationConfig, k: int) -> int | None:
    if config.noise is None:
        return None
    return int(np.random.SeedSequence([config.noise.seed, k]).generate_state(1)[0])


def simulate_sfr(system: LensSystem, fovs: Sequence[FovSample], sensor: SensorModel,
                 config: SimulationConfig) -> dict[FovIndex, SfrCurve | Exception]:
    """SFR per FoV; failures are returned as the exception instead of a curve."""
    def one(k_fov):
        k, fov = k_fov
        try:
            patch = simulate_edge(system, fov.field, sensor, config, _seed_for(config, k), fov.index)
            return fov.index, measure_edge(patch, config)
        except Exception as exc:        # dead bundle, window or edge failure
            return fov.index, exc

    items = list(enumerate(fovs))
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]
    return dict(results)


def compute_fov_psfs(system: LensSystem, sensor: SensorModel, config: SimulationConfig,
                     ideal: LensSystem | None = None) -> FovPsfSet:
    """Pixel-pitch kernels for every grid cell (fields aimed through ``ideal``)."""
    fovs = fov_samples(ideal or system, sensor, config.grid, sensor.wavelengths[len(sensor.wavelengths) // 2])
    gy, gx = config.grid
    k = config.psf_pixels
    kernels = {ch: np.zeros((gy, gx, k, k)) for ch in sensor.channels}
    for fov in fovs:
        psfs = field_psfs(system, fov.field, sensor, config, fov.index)
        for ch, psf in psfs.items():
            kern = psf.binned(config.psf_oversample).intensity
            kernels[ch][fov.index] = kern / kern.sum()
    return FovPsfSet((gy, gx), kernels)
