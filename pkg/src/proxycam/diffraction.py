"""Diffraction PSFs from traced ray bundles by Huygens wavelet superposition."""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .optics import EmptyBundleError, LensSystem, TraceBundle


class WindowTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class PupilField:
    """Secondary sources on the exit-pupil plane.

    ``directions`` are the *reversed* ray directions (pointing from the pupil
    back towards object space), which is what the obliquity factor expects.
    Coordinates are in the sensor frame (sensor plane at z = 0).
    """

    points: np.ndarray          # (N, 3) mm
    opl: np.ndarray             # (N,) mm, from the source wavefront to the pupil point
    directions: np.ndarray      # (N, 3)
    wavelength: float           # um
    normal: np.ndarray = None   # pupil-plane unit normal, +z by default
    amplitude: float = 1.0
    image_index: float = 1.0
    point_source: bool = False  # finite conjugate: include the 1/l spreading term
    sensor_hits: np.ndarray | None = None  # (N, 2) geometric hits for window checks

    def __post_init__(self):
        if self.normal is None:
            object.__setattr__(self, "normal", np.array([0.0, 0.0, 1.0]))
        if len(self.points) == 0:
            raise EmptyBundleError("pupil field has no points")

    def shifted(self, dx: float, dy: float) -> "PupilField":
        off = np.array([dx, dy, 0.0])
        hits = None if self.sensor_hits is None else self.sensor_hits + off[:2]
        return replace(self, points=self.points + off, sensor_hits=hits)


@dataclass(frozen=True)
class SensorWindow:
    center: tuple[float, float]     # mm, sensor frame
    shape: tuple[int, int]          # (ny, nx) samples
    pitch: float                    # um

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        ny, nx = self.shape
        step = self.pitch * 1e-3
        xs = self.center[0] + (np.arange(nx) - (nx - 1) / 2) * step
        ys = self.center[1] + (np.arange(ny) - (ny - 1) / 2) * step
        return xs, ys

    def contains(self, xy: np.ndarray) -> np.ndarray:
        ny, nx = self.shape
        half_x = nx * self.pitch * 1e-3 / 2
        half_y = ny * self.pitch * 1e-3 / 2
        return ((np.abs(xy[:, 0] - self.center[0]) <= half_x)
                & (np.abs(xy[:, 1] - self.center[1]) <= half_y))


@dataclass(frozen=True)
class PsfGrid:
    """Sampled intensity on the sensor plane (row index = y, column = x)."""

    intensity: np.ndarray
    pitch: float                        # um
    center: tuple[float, float] = (0.0, 0.0)
    fov_index: tuple[int, int] | None = None
    wavelength: float | None = None     # None: polychromatic

    def __post_init__(self):
        arr = np.asarray(self.intensity, dtype=float)
        if arr.ndim != 2:
            raise ValueError("PSF intensity must be 2-D")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("PSF intensity must be finite and non-negative")
        object.__setattr__(self, "intensity", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.intensity.shape

    def normalized(self) -> "PsfGrid":
        return replace(self, intensity=self.intensity / self.intensity.sum())

    def same_geometry(self, other: "PsfGrid") -> bool:
        return (self.shape == other.shape and np.isclose(self.pitch, other.pitch)
                and np.allclose(self.center, other.center, atol=1e-12))

    def binned(self, factor: int) -> "PsfGrid":
        """Integrate ``factor x factor`` blocks (e.g. down to pixel pitch)."""
        ny, nx = self.shape
        if ny % factor or nx % factor:
            raise ValueError("PSF shape not divisible by binning factor")
        arr = self.intensity.reshape(ny // factor, factor, nx // factor, factor).sum(axis=(1, 3))
        return replace(self, intensity=arr, pitch=self.pitch * factor)


def pupil_from_trace(bundle: TraceBundle, system: LensSystem | None = None) -> PupilField:
    """Back-propagate surviving rays from the sensor to the exit-pupil plane."""
    alive = bundle.alive
    if not alive.any():
        raise EmptyBundleError("no surviving rays")
    z_xp = bundle.exit_pupil_z if system is None else system.exit_pupil(bundle.wavelength).z
    n_img = bundle.image_index
    pos = bundle.sensor[alive]
    d = bundle.directions[alive]
    t = z_xp / d[:, 2]                      # negative: the segment is walked backwards
    return PupilField(
        points=pos + t[:, None] * d,
        opl=bundle.opl[alive] + n_img * t,
        directions=-d,
        wavelength=bundle.wavelength,
        image_index=n_img,
        point_source=bool(bundle.field is not None and bundle.field.finite),
        sensor_hits=pos[:, :2].copy(),
    )


def _cos(a, b):
    return np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def obliquity(D, r, n) -> np.ndarray:
    """K = (cos<n, r> - cos<n, D>) / 2."""
    D = np.asarray(D, dtype=float)
    r = np.asarray(r, dtype=float)
    n = np.asarray(n, dtype=float)
    return 0.5 * (_cos(n, r) - _cos(n, D))


def huygens_psf(field: PupilField, window: SensorWindow, chunk: int = 1 << 21,
                check_window: bool = True) -> PsfGrid:
    """Coherent sum of spherical wavelets from the pupil points.

    Each sample accumulates ``a0 exp(ik l)/l * exp(ik r)/r * K`` (the 1/l term
    only for point sources); the intensity is ``E E*`` normalized to unit sum.
    """
    if check_window and field.sensor_hits is not None:
        outside = ~window.contains(field.sensor_hits)
        if outside.mean() >= 0.01:
            raise WindowTooSmallError(
                f"{outside.mean():.1%} of geometric rays fall outside the PSF window")
    xs, ys = window.coords()
    gx, gy = np.meshgrid(xs, ys)
    samples = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])

    k = 2.0 * np.pi / (field.wavelength * 1e-3)
    pts = field.points
    normal = field.normal / np.linalg.norm(field.normal)
    cos_nd = field.directions @ normal / np.linalg.norm(field.directions, axis=1)
    src = field.amplitude / field.opl if field.point_source else np.full(len(pts), field.amplitude)
    # common phase offset keeps k*(l + r) small; it cancels in E E*
    centre = np.array([window.center[0], window.center[1], 0.0])
    ref = np.mean(field.opl + field.image_index * np.linalg.norm(pts - centre, axis=1))

    total = np.empty(len(samples), dtype=complex)
    step = max(1, chunk // max(len(pts), 1))
    for start in range(0, len(samples), step):
        sl = slice(start, start + step)
        vec = samples[sl, None, :] - pts[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", vec, vec))
        cos_nr = vec @ normal / dist
        kfac = 0.5 * (cos_nr - cos_nd[None, :])
        phase = k * (field.opl[None, :] + field.image_index * dist - ref)
        # np.sum reduces pairwise, so the result does not depend on chunking
        total[sl] = np.sum(src[None, :] * kfac / dist * np.exp(1j * phase), axis=1)
    intensity = (total * total.conj()).real.reshape(window.shape)
    s = intensity.sum()
    if not s > 0:
        raise EmptyBundleError("zero PSF energy")
    return PsfGrid(intensity / s, window.pitch, tuple(window.center), wavelength=field.wavelength)


def trapezoid_weights(wavelengths: Sequence[float]) -> np.ndarray:
    lam = np.asarray(wavelengths, dtype=float)
    if lam.size == 1:
        return np.ones(1)
    if np.any(np.diff(lam) <= 0):
        raise ValueError("wavelengths must be strictly increasing")
    w = np.zeros_like(lam)
    dl = np.diff(lam)
    w[:-1] += dl / 2
    w[1:] += dl / 2
    return w


def polychromatic_psf(psfs: Sequence[PsfGrid], response: Sequence[float],
                      wavelengths: Sequence[float] | None = None) -> PsfGrid:
    """Trapezoid quadrature of response(lambda) * I(lambda), renormalized."""
    if not psfs:
        raise ValueError("no PSFs given")
    if len(response) != len(psfs):
        raise ValueError("response weights do not match PSF list")
    first = psfs[0]
    for p in psfs[1:]:
        if not first.same_geometry(p):
            raise ValueError("PSF grids are not co-registered")
    if wavelengths is None:
        wavelengths = [p.wavelength for p in psfs]
    if len(psfs) > 1 and any(w is None for w in wavelengths):
        raise ValueError("wavelengths are required for quadrature")
    quad = trapezoid_weights(wavelengths) * np.asarray(response, dtype=float)
    acc = np.zeros_like(first.intensity)
    for q, p in zip(quad, psfs):
        acc += q * p.intensity
    if not acc.sum() > 0:
        raise ValueError("response has no weight on the sampled wavelengths")
    single = len(psfs) == 1
    return PsfGrid(acc / acc.sum(), first.pitch, first.center, first.fov_index,
                   first.wavelength if single else None)


# --------------------------------------------------------------------------
# PSF file format
# --------------------------------------------------------------------------
# little-endian: magic b"PXPSF001" | uint32 ny | uint32 nx | float64 pitch_um
#                | float64 center_x_mm | float64 center_y_mm
#                | float64 wavelength_um (0 = polychromatic) | ny*nx float64 row-major

PSF_MAGIC = b"PXPSF001"
_HEADER = struct.Struct("<8sIIdddd")


def write_psf(path, psf: PsfGrid) -> None:
    ny, nx = psf.shape
    header = _HEADER.pack(PSF_MAGIC, ny, nx, psf.pitch, psf.center[0], psf.center[1],
                          psf.wavelength or 0.0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(psf.intensity, dtype="<f8").tobytes())


def read_psf(path) -> PsfGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated PSF file")
    magic, ny, nx, pitch, cx, cy, wl = _HEADER.unpack_from(raw)
    if magic != PSF_MAGIC:
        raise ValueError("not a PSF file")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if data.size != ny * nx:
        raise ValueError("PSF payload size mismatch")
    return PsfGrid(data.reshape(ny, nx).copy(), pitch, (cx, cy), wavelength=wl or None)


def write_psf_preview(path, psf: PsfGrid) -> None:
    """16-bit grayscale PNG scaled to the PSF peak."""
    from PIL import Image

    arr = psf.intensity / psf.intensity.max()
    Image.fromarray(np.round(arr * 65535).astype(np.uint16)).save(path)
