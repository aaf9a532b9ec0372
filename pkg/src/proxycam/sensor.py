"""Sensor and noise descriptions shared by the imaging and optics modules."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


@dataclass(frozen=True)
class SensorModel:
    """Pixel grid plus per-channel spectral response.

    ``response`` maps a channel name to weights aligned with ``wavelengths``
    (micrometers). Weights are normalized to unit sum on construction.
    """

    pixel_pitch: float = 1.4                      # um
    resolution: tuple[int, int] = (1200, 1600)    # (H, W) pixels
    wavelengths: tuple[float, ...] = (0.55,)
    response: Mapping[str, tuple[float, ...]] = field(
        default_factory=lambda: {"G": (1.0,)})
    bit_depth: int = 10

    def __post_init__(self):
        if self.pixel_pitch <= 0:
            raise ValueError("pixel_pitch must be positive")
        h, w = self.resolution
        if h <= 0 or w <= 0:
            raise ValueError("resolution must be positive")
        if not self.wavelengths:
            raise ValueError("at least one wavelength is required")
        if not 1 <= self.bit_depth <= 32:
            raise ValueError("bit_depth out of range")
        normalized = {}
        for name, weights in self.response.items():
            w_arr = np.asarray(weights, dtype=float)
            if w_arr.shape != (len(self.wavelengths),):
                raise ValueError(f"response {name!r} does not match wavelength list")
            if np.any(w_arr < 0) or w_arr.sum() <= 0:
                raise ValueError(f"response {name!r} must be non-negative with positive sum")
            normalized[name] = tuple(float(v) for v in w_arr / w_arr.sum())
        if not normalized:
            raise ValueError("sensor needs at least one channel")
        object.__setattr__(self, "resolution", (int(h), int(w)))
        object.__setattr__(self, "wavelengths", tuple(float(v) for v in self.wavelengths))
        object.__setattr__(self, "response", normalized)

    @property
    def channels(self) -> tuple[str, ...]:
        return tuple(self.response)

    @property
    def full_scale(self) -> float:
        return float(2 ** self.bit_depth - 1)

    @property
    def size_mm(self) -> tuple[float, float]:
        h, w = self.resolution
        return h * self.pixel_pitch * 1e-3, w * self.pixel_pitch * 1e-3

    def to_dict(self) -> dict:
        return {
            "pixel_pitch_um": self.pixel_pitch,
            "resolution": list(self.resolution),
            "wavelengths_um": list(self.wavelengths),
            "response": {k: list(v) for k, v in self.response.items()},
            "bit_depth": self.bit_depth,
        }


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian read noise plus signal-dependent shot noise.

    Shot noise is the Gaussian approximation of Poisson statistics:
    variance in DN^2 is ``signal / gain`` with ``gain`` in electrons per DN.
    ``gain=inf`` disables shot noise.
    """

    read_sigma: float = 0.0     # DN
    gain: float = float("inf")  # e-/DN
    seed: int = 0

    def __post_init__(self):
        if self.read_sigma < 0:
            raise ValueError("read_sigma must be >= 0")
        if self.gain <= 0:
            raise ValueError("gain must be positive")

    def apply(self, image: np.ndarray, seed: int | None = None) -> np.ndarray:
        rng = np.random.default_rng(self.seed if seed is None else seed)
        signal = np.clip(image, 0.0, None)
        var = self.read_sigma ** 2 + (0.0 if np.isinf(self.gain) else signal / self.gain)
        return image + rng.standard_normal(image.shape) * np.sqrt(var)
