import math

import numpy as np
import pytest

from proxycam.diffraction import PsfGrid
from proxycam.sensor import SensorModel


def gaussian_psf(sigma_px: float, oversample: int = 4, pitch: float = 1.4) -> PsfGrid:
    """Separable Gaussian sampled at pitch/oversample, sigma in pixels."""
    n = int(math.ceil(6 * sigma_px * oversample)) * 2 + 1
    u = (np.arange(n) - (n - 1) / 2) / oversample
    g = np.exp(-u ** 2 / (2 * sigma_px ** 2))
    k = np.outer(g, g)
    return PsfGrid(k / k.sum(), pitch / oversample)


def gaussian_edge_sfr(f, sigma_px, angle_deg, bin_width=0.25):
    """Gaussian MTF times the pixel aperture seen along the edge normal and
    the ESF bin aperture."""
    th = math.radians(angle_deg)
    return (np.exp(-2 * np.pi ** 2 * sigma_px ** 2 * f ** 2)
            * np.abs(np.sinc(f * math.cos(th)) * np.sinc(f * math.sin(th)))
            * np.abs(np.sinc(bin_width * f)))


@pytest.fixture
def small_sensor():
    return SensorModel(pixel_pitch=1.4, resolution=(100, 100), bit_depth=10)


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion after the run
# --------------------------------------------------------------------------

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records a verdict; assertion is left to the test."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
