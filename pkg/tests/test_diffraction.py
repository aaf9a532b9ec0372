import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import j1

from proxycam.designs import ideal_focuser
from proxycam.diffraction import (PsfGrid, PupilField, SensorWindow, WindowTooSmallError,
                                  huygens_psf, obliquity, polychromatic_psf, pupil_from_trace,
                                  read_psf, trapezoid_weights, write_psf, write_psf_preview)
from proxycam.optics import Field, PupilGrid, trace_bundle


@pytest.fixture(scope="module")
def focuser_field():
    lens = ideal_focuser(f_number=2.0)
    b = trace_bundle(lens, Field(), PupilGrid(48), 0.55)
    return pupil_from_trace(b, lens)


def airy(r_um, lam=0.55, N=2.0):
    x = np.pi * r_um / (lam * N)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (2 * j1(x) / x) ** 2
    return np.where(x == 0, 1.0, out)


def test_obliquity_limits():
    n = np.array([0, 0, 1.0])
    # reversed ray direction (towards object) and forward observation direction
    assert obliquity([0, 0, -1], [0, 0, 1], n) == pytest.approx(1.0)
    assert obliquity([0, 0, 1], [0, 0, 1], n) == pytest.approx(0.0)


def test_psf_unit_sum_and_nonnegative(focuser_field):
    psf = huygens_psf(focuser_field, SensorWindow((0.0, 0.0), (31, 31), 0.1))
    assert psf.intensity.sum() == pytest.approx(1.0, abs=1e-12)
    assert psf.intensity.min() >= 0


def test_psf_matches_airy_profile(focuser_field):
    win = SensorWindow((0.0, 0.0), (1, 81), 0.05)
    psf = huygens_psf(focuser_field, win, check_window=False)
    xs, _ = win.coords()
    prof = psf.intensity[0] / psf.intensity[0].max()
    ref = airy(np.abs(xs) * 1e3)
    # coarse pupil sampling: profile agrees to a few percent of the peak
    assert np.max(np.abs(prof - ref)) < 0.03
    inner = np.abs(xs * 1e3) < 1.2
    assert xs[inner][np.argmax(prof[inner])] == pytest.approx(0.0, abs=1e-12)


def test_psf_shift_equivariance(focuser_field):
    win = SensorWindow((0.0, 0.0), (21, 21), 0.1)
    a = huygens_psf(focuser_field, win)
    dx, dy = 0.0013, -0.0007
    moved = huygens_psf(focuser_field.shifted(dx, dy),
                        SensorWindow((dx, dy), (21, 21), 0.1))
    np.testing.assert_allclose(moved.intensity, a.intensity, atol=1e-12)


def test_psf_amplitude_invariance_and_chunking(focuser_field):
    from dataclasses import replace

    win = SensorWindow((0.0, 0.0), (15, 15), 0.1)
    a = huygens_psf(focuser_field, win)
    b = huygens_psf(replace(focuser_field, amplitude=7.5), win)
    c = huygens_psf(focuser_field, win, chunk=5000)
    np.testing.assert_allclose(b.intensity, a.intensity, rtol=1e-12)
    np.testing.assert_allclose(c.intensity, a.intensity, rtol=1e-10, atol=1e-16)


def test_single_point_source_gives_spherical_wave_intensity():
    pt = np.array([[0.0, 0.0, -5.0]])
    f = PupilField(points=pt, opl=np.array([0.0]), directions=np.array([[0, 0, -1.0]]),
                   wavelength=0.55)
    win = SensorWindow((0.0, 0.0), (9, 9), 200.0)
    psf = huygens_psf(f, win)
    xs, ys = win.coords()
    gx, gy = np.meshgrid(xs, ys)
    r = np.sqrt(gx ** 2 + gy ** 2 + 25.0)
    k = 0.5 * (5.0 / r + 1.0)
    ref = (k / r) ** 2
    np.testing.assert_allclose(psf.intensity, ref / ref.sum(), rtol=1e-10)


def test_window_too_small_raises(focuser_field):
    shifted = focuser_field.shifted(0.05, 0.0)
    with pytest.raises(WindowTooSmallError):
        huygens_psf(shifted, SensorWindow((0.0, 0.0), (11, 11), 0.1))


def test_trapezoid_weights():
    np.testing.assert_allclose(trapezoid_weights([0.4, 0.5, 0.7]), [0.05, 0.15, 0.1])
    np.testing.assert_allclose(trapezoid_weights([0.55]), [1.0])
    with pytest.raises(ValueError):
        trapezoid_weights([0.5, 0.4])


def test_polychromatic_matches_dense_quadrature():
    # analytic PSF family whose width grows with wavelength; response is a ramp
    x = np.linspace(-3, 3, 25)
    gx, gy = np.meshgrid(x, x)

    def mono(lam):
        s = 2.0 * lam
        return np.exp(-(gx ** 2 + gy ** 2) / (2 * s * s))

    def resp(lam):
        return 1.0 + 2.0 * (lam - 0.4)

    lams = np.linspace(0.4, 0.7, 301)
    psfs = [PsfGrid(mono(l) / mono(l).sum(), 0.1, wavelength=l) for l in lams]
    poly = polychromatic_psf(psfs, [resp(l) for l in lams], lams)
    i, j = 12, 16
    num = quad(lambda l: resp(l) * mono(l)[i, j] / mono(l).sum(), 0.4, 0.7, epsabs=1e-14)[0]
    den = quad(lambda l: resp(l), 0.4, 0.7)[0]
    # unit-sum PSFs integrate to the response integral, which the output renormalizes
    assert poly.intensity[i, j] == pytest.approx(num / den, rel=1e-5)
    assert poly.intensity.sum() == pytest.approx(1.0)
    assert poly.wavelength is None


def test_polychromatic_rejects_misregistered():
    a = PsfGrid(np.ones((3, 3)), 0.1, wavelength=0.5)
    b = PsfGrid(np.ones((3, 3)), 0.2, wavelength=0.6)
    with pytest.raises(ValueError):
        polychromatic_psf([a, b], [1, 1])


def test_psf_file_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    psf = PsfGrid(rng.random((5, 7)), 0.35, (0.1, -0.2), wavelength=0.55)
    write_psf(tmp_path / "a.psf", psf)
    back = read_psf(tmp_path / "a.psf")
    np.testing.assert_array_equal(back.intensity, psf.intensity)
    assert back.pitch == 0.35 and back.center == (0.1, -0.2) and back.wavelength == 0.55
    (tmp_path / "bad.psf").write_bytes(b"nope" * 20)
    with pytest.raises(ValueError):
        read_psf(tmp_path / "bad.psf")
    write_psf_preview(tmp_path / "a.png", psf)
    from PIL import Image

    with Image.open(tmp_path / "a.png") as im:
        assert np.asarray(im).max() == 65535


def test_binning_conserves_energy():
    rng = np.random.default_rng(1)
    psf = PsfGrid(rng.random((8, 12)), 0.35).normalized()
    b = psf.binned(4)
    assert b.shape == (2, 3) and b.pitch == pytest.approx(1.4)
    assert b.intensity.sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        psf.binned(5)
