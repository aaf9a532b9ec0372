"""What the sensor records: slanted edges, spatially varying blur, companding,
and virtual cameras sampled inside the tolerance box."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .diffraction import PsfGrid
from .optics import LensSystem
from .perturbation import PerturbationVector, apply_perturbation, sample_values
from .sensor import NoiseModel, SensorModel

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# slanted edge
# --------------------------------------------------------------------------

def _clip_integral(u, w):
    """Antiderivative of clip(u, 0, w)."""
    return np.where(u <= 0, 0.0, np.where(u >= w, w * u - 0.5 * w * w, 0.5 * u * u))


def edge_coverage(shape, slope: float, intercept: float, cell: float = 1.0,
                  origin=(0.0, 0.0)) -> np.ndarray:
    """Exact area fraction of each square cell lying in ``x > slope*y + intercept``.

    Cell ``(r, c)`` spans ``[x0 + c*cell, x0 + (c+1)*cell]`` and likewise in y,
    with ``origin = (x0, y0)``.
    """
    ny, nx = shape
    x0 = origin[0] + np.arange(nx) * cell
    y0 = origin[1] + np.arange(ny) * cell
    # u(y) = x0 + cell - slope*y - intercept: length of the cell row beyond the line
    u_top = x0[None, :] + cell - intercept - slope * y0[:, None]
    if abs(slope) < 1e-15:
        return np.clip(u_top, 0.0, cell) / cell
    u_bot = u_top - slope * cell
    area = (_clip_integral(u_top, cell) - _clip_integral(u_bot, cell)) / slope
    return np.clip(area / (cell * cell), 0.0, 1.0)


def synth_edge(psf: PsfGrid, angle: float, sensor: SensorModel, noise: NoiseModel | None = None,
               contrast: tuple[float, float] | None = None, shape: tuple[int, int] = (64, 64),
               offset: float = 0.0, quantize: bool = True, seed: int | None = None) -> np.ndarray:
    """Slanted step edge seen through ``psf`` and integrated over pixels.

    The edge passes ``offset`` pixels right of the patch centre at the middle
    row, tilted ``angle`` degrees from vertical; the bright side is on the right.
    The PSF pitch must divide the pixel pitch.
    """
    if not 5.0 <= abs(angle) <= 15.0:
        raise ValueError("edge angle must lie within 5 to 15 degrees")
    q_f = sensor.pixel_pitch / psf.pitch
    q = int(round(q_f))
    if q < 1 or abs(q_f - q) > 1e-9:
        raise ValueError("pixel pitch must be an integer multiple of the PSF pitch")
    ky, kx = psf.shape
    h, w = shape
    if max(ky, kx) / q > min(h, w) / 2:
        raise ValueError("patch too small for the PSF support")
    low, high = contrast if contrast is not None else (0.2 * sensor.full_scale, 0.8 * sensor.full_scale)

    slope = math.tan(math.radians(angle))
    intercept = (w - 1) / 2 + offset - slope * (h - 1) / 2
    # 'valid' convolution reads sub[i + K-1-c] through kernel centre c
    py, px = (ky - 1) // 2, (kx - 1) // 2
    pad_lo = (ky - 1 - py, kx - 1 - px)
    pad_hi = (py, px)
    cell = 1.0 / q
    sub = edge_coverage((h * q + pad_lo[0] + pad_hi[0], w * q + pad_lo[1] + pad_hi[1]),
                        slope, intercept, cell,
                        origin=(-0.5 - pad_lo[1] * cell, -0.5 - pad_lo[0] * cell))
    kernel = psf.intensity / psf.intensity.sum()
    blurred = fftconvolve(sub, kernel, mode="valid")
    frac = blurred.reshape(h, q, w, q).mean(axis=(1, 3))
    img = low + (high - low) * frac
    if noise is not None:
        img = noise.apply(img, seed)
    if quantize:
        img = np.clip(np.round(img), 0, sensor.full_scale)
    return img


# --------------------------------------------------------------------------
# spatially varying degradation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FovPsfSet:
    """Per-cell, per-channel kernels at pixel pitch over an even grid.

    ``kernels[channel]`` has shape ``(gy, gx, k, k)``; each kernel sums to 1
    and is centred on sample ``(k - 1) / 2``.
    """

    grid: tuple[int, int]
    kernels: Mapping[str, np.ndarray]

    def __post_init__(self):
        for name, k in self.kernels.items():
            if k.ndim != 4 or k.shape[:2] != tuple(self.grid):
                raise ValueError(f"kernels for {name!r} do not match grid {self.grid}")
            if not np.all(np.isfinite(k)):
                raise ValueError("kernels must be finite")

    @property
    def channels(self) -> tuple[str, ...]:
        return tuple(self.kernels)

    @classmethod
    def delta(cls, grid=(1, 1), channels=("G",), size: int = 1) -> "FovPsfSet":
        k = np.zeros((grid[0], grid[1], size, size))
        k[:, :, size // 2, size // 2] = 1.0
        return cls(tuple(grid), {c: k.copy() for c in channels})

    def save(self, path) -> None:
        np.savez(path, grid=np.array(self.grid), channels=np.array(self.channels),
                 **{f"k_{c}": self.kernels[c] for c in self.channels})

    @classmethod
    def load(cls, path) -> "FovPsfSet":
        z = np.load(path)
        return cls(tuple(int(v) for v in z["grid"]),
                   {str(c): z[f"k_{c}"] for c in z["channels"]})


def _cell_centres(n: int, size: int) -> np.ndarray:
    edges = np.linspace(0, size, n + 1)
    return (edges[:-1] + edges[1:]) / 2 - 0.5


def _tent_weights(n: int, size: int) -> np.ndarray:
    """(n, size) bilinear weights that sum to 1 at every pixel, constant
    beyond the outermost cell centres."""
    centres = _cell_centres(n, size)
    x = np.arange(size, dtype=float)
    w = np.zeros((n, size))
    if n == 1:
        w[0] = 1.0
        return w
    xc = np.clip(x, centres[0], centres[-1])
    j = np.clip(np.searchsorted(centres, xc, side="right") - 1, 0, n - 2)
    t = (xc - centres[j]) / (centres[j + 1] - centres[j])
    w[j, np.arange(size)] = 1.0 - t
    w[j + 1, np.arange(size)] += t
    return w


def _mirror_pad(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    ky, kx = shape
    py, px = (ky - 1) // 2, (kx - 1) // 2
    return np.pad(img, ((ky - 1 - py, py), (kx - 1 - px, px)), mode="symmetric")


def convolve_symmetric(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size convolution with mirror (half-sample symmetric) boundaries."""
    return fftconvolve(_mirror_pad(img, kernel.shape), kernel, mode="valid")


def _degrade_plane(plane: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    gy, gx = kernels.shape[:2]
    h, w = plane.shape
    wy, wx = _tent_weights(gy, h), _tent_weights(gx, w)
    ky, kx = kernels.shape[2:]
    padded = _mirror_pad(plane, (ky, kx))
    out = np.zeros((h, w))
    for i in range(gy):
        rows = np.nonzero(wy[i])[0]
        r0, r1 = rows[0], rows[-1] + 1
        for j in range(gx):
            cols = np.nonzero(wx[j])[0]
            c0, c1 = cols[0], cols[-1] + 1
            # only the support of this cell's blending weight is convolved
            region = padded[r0:r1 + ky - 1, c0:c1 + kx - 1]
            part = fftconvolve(region, kernels[i, j], mode="valid")
            out[r0:r1, c0:c1] += wy[i, r0:r1, None] * wx[j, None, c0:c1] * part
    return out


def degrade_image(latent: np.ndarray, psfs: FovPsfSet, sensor: SensorModel | None = None,
                  noise: NoiseModel | None = None, seed: int | None = None) -> np.ndarray:
    """Spatially varying blur of a linear image, per channel, plus noise.

    ``latent`` is ``(H, W)`` for a single channel or ``(H, W, C)`` with channels
    in ``psfs.channels`` order. Each FoV cell's result is blended with
    bilinear weights centred on the cell centres. With a ``sensor`` the image
    is taken as a fraction of full scale and noise parameters are in DN.
    """
    img = np.asarray(latent, dtype=float)
    single = img.ndim == 2
    planes = img[..., None] if single else img
    if planes.shape[-1] != len(psfs.channels):
        raise ValueError("latent channels do not match the PSF set")
    if sensor is not None and planes.shape[:2] != sensor.resolution:
        raise ValueError("latent resolution does not match the sensor")
    gy, gx = psfs.grid
    if gy > planes.shape[0] or gx > planes.shape[1]:
        raise ValueError("PSF grid finer than the image")
    out = np.stack([_degrade_plane(planes[..., c], psfs.kernels[name])
                    for c, name in enumerate(psfs.channels)], axis=-1)
    if noise is not None:
        fs = sensor.full_scale if sensor is not None else 1.0
        out = noise.apply(out * fs, seed) / fs
    return out[..., 0] if single else out


# --------------------------------------------------------------------------
# companding
# --------------------------------------------------------------------------

_A, _GAMMA, _TOE = 0.055, 2.4, 0.0031308


def compand(image, direction: str = "compress") -> np.ndarray:
    """sRGB-style piecewise power curve (linear toe, exponent 1/2.4)."""
    x = np.asarray(image, dtype=float)
    if np.any(x < 0) or np.any(x > 1) or not np.all(np.isfinite(x)):
        raise ValueError("compand expects values in [0, 1]")
    if direction == "compress":
        return np.where(x <= _TOE, 12.92 * x, (1 + _A) * np.power(x, 1 / _GAMMA) - _A)
    if direction == "decompress":
        return np.where(x <= 12.92 * _TOE, x / 12.92, np.power((x + _A) / (1 + _A), _GAMMA))
    raise ValueError("direction must be 'compress' or 'decompress'")


# --------------------------------------------------------------------------
# virtual cameras and data pairs
# --------------------------------------------------------------------------

def sample_virtual_cameras(ideal: LensSystem, tolerances: PerturbationVector, count: int,
                           seed: int = 0) -> list[tuple[LensSystem, np.ndarray]]:
    """``count`` systems with every parameter uniform in +-tolerance.

    Returns ``(system, offsets)`` pairs; offsets follow ``tolerances.parameters``.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        vals = sample_values(tolerances, rng)
        out.append((apply_perturbation(ideal, tolerances.with_values(vals)), vals))
    return out


def resize_to(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Area-preserving bilinear resize of a linear image."""
    from scipy.ndimage import zoom

    if img.shape[:2] == tuple(shape):
        return img.astype(float)
    factors = (shape[0] / img.shape[0], shape[1] / img.shape[1]) + (1,) * (img.ndim - 2)
    out = zoom(img.astype(float), factors, order=1, grid_mode=True, mode="grid-mirror")
    return out[: shape[0], : shape[1]]


def load_latent(path, channels: int = 1) -> np.ndarray:
    """Linear image from ``.npy`` or an 8/16-bit image file, scaled to [0, 1]."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path).astype(float)
    else:
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im).astype(float)
        arr /= 65535.0 if arr.max() > 255 else 255.0
    if arr.ndim == 3 and channels == 1:
        arr = arr[..., :3].mean(axis=-1)
    elif arr.ndim == 2 and channels > 1:
        arr = np.repeat(arr[..., None], channels, axis=-1)
    return arr


def make_pairs(latents: Sequence, cameras: Sequence[tuple[str, FovPsfSet]], out, sensor: SensorModel,
               noise: NoiseModel | None = None, seed: int = 0) -> list[dict]:
    """Write degraded/clean pairs for every (latent, camera) combination.

    ``latents`` are arrays or paths; ``cameras`` are ``(camera_id, psf_set)``.
    Inputs are raw-like linear planes with noise, targets the clean resized
    latent. Returns the manifest records, also written to ``manifest.jsonl``.
    Failures are logged and skipped.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    n_ch = len(sensor.channels)
    seeds = np.random.SeedSequence(seed).spawn(len(latents) * len(cameras))
    records = []
    k = 0
    for li, lat in enumerate(latents):
        for cam_id, psfs in cameras:
            item_seed = int(seeds[k].generate_state(1)[0])
            k += 1
            name = f"{li:04d}_{cam_id}"
            try:
                img = load_latent(lat, n_ch) if isinstance(lat, (str, Path)) else np.asarray(lat, float)
                target = resize_to(img, sensor.resolution)
                degraded = degrade_image(target, psfs, sensor, noise, seed=item_seed)
                np.save(out / f"{name}_input.npy", degraded)
                np.save(out / f"{name}_target.npy", target)
                meta = {"camera_id": cam_id, "latent": li, "seed": item_seed,
                        "fov_grid": list(psfs.grid), "channels": list(psfs.channels)}
                (out / f"{name}_meta.json").write_text(json.dumps(meta, indent=1))
            except Exception as exc:        # one bad item must not stop the batch
                log.warning("pair %s failed: %s", name, exc)
                continue
            records.append({"input_path": f"{name}_input.npy", "target_path": f"{name}_target.npy",
                            "camera_id": cam_id, "seed": item_seed})
    with open(out / "manifest.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    return records
