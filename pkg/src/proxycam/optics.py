"""Sequential ray tracing through perturbed lens systems.

Geometry conventions
--------------------
Every surface owns a *reference frame*: origin at its nominal vertex, z along
the optical axis. A ray in the reference frame of surface ``i`` is moved into
the surface's *local* frame with :func:`to_local` (decenter offset, then the
Euler-angle rotation), intersected and refracted there, moved back with
:func:`from_local` and finally propagated along the surface's thickness vector
with :func:`transfer`, which lands it in the reference frame of surface
``i + 1``. After the last surface the reference frame is the sensor plane.

Lengths are millimeters, wavelengths micrometers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Iterator, Sequence

import numpy as np

from .sensor import SensorModel

LAMBDA_D = 0.5876
LAMBDA_F = 0.4861
LAMBDA_C = 0.6563

NEWTON_TOL = 1e-10      # mm
NEWTON_MAX_ITER = 64
_PARALLEL_EPS = 1e-12


class RayStatus(IntEnum):
    ALIVE = 0
    VIGNETTED = 1
    TIR = 2
    MISSED = 3      # Newton failed or left the sag domain
    PARALLEL = 4    # cannot reach the next vertex plane


class SagDomainError(ValueError):
    pass


class EmptyBundleError(RuntimeError):
    pass


class TraceError(RuntimeError):
    def __init__(self, status: RayStatus, surface: int | None = None):
        self.status = RayStatus(status)
        self.surface = surface
        super().__init__(f"ray terminated ({self.status.name}) at surface {surface}")


# --------------------------------------------------------------------------
# materials and surfaces
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MaterialSpec:
    """Glass described by d-line index and Abbe number.

    The dispersion model is linear in 1/lambda^2 and passes through ``nd`` at
    the d line with ``n_F - n_C = (nd - 1) / vd``.
    """

    nd: float = 1.0
    vd: float = math.inf

    def __post_init__(self):
        if self.nd == 1.0:
            return
        if not 1.3 <= self.nd <= 2.2:
            raise ValueError(f"refractive index {self.nd} outside [1.3, 2.2]")
        if not self.vd > 0:
            raise ValueError("Abbe number must be positive for glass")

    @property
    def is_air(self) -> bool:
        return self.nd == 1.0

    def index(self, wavelength: float) -> float:
        if self.is_air:
            return 1.0
        slope = ((self.nd - 1.0) / self.vd) / (LAMBDA_F ** -2 - LAMBDA_C ** -2)
        return self.nd + slope * (wavelength ** -2 - LAMBDA_D ** -2)


AIR = MaterialSpec()


@dataclass(frozen=True)
class Surface:
    """Rotationally symmetric asphere with its full perturbation state.

    ``aspheric[j - 1]`` multiplies rho^(2j). ``material`` is the medium
    *after* the surface. ``thickness`` is the norm of the thickness vector and
    ``thickness_dir`` its direction cosines.
    """

    curvature: float = 0.0
    conic: float = 0.0
    aspheric: tuple[float, ...] = ()
    semi_aperture: float = 10.0
    thickness: float = 0.0
    material: MaterialSpec = AIR
    tilt: tuple[float, float, float] = (0.0, 0.0, 0.0)
    decenter: tuple[float, float] = (0.0, 0.0)
    thickness_dir: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "aspheric", tuple(float(a) for a in self.aspheric))
        object.__setattr__(self, "tilt", tuple(float(a) for a in self.tilt))
        object.__setattr__(self, "decenter", tuple(float(a) for a in self.decenter))
        object.__setattr__(self, "thickness_dir", tuple(float(a) for a in self.thickness_dir))
        if len(self.tilt) != 3 or len(self.decenter) != 2 or len(self.thickness_dir) != 3:
            raise ValueError("tilt needs 3, decenter 2 and thickness_dir 3 components")
        if not self.semi_aperture > 0:
            raise ValueError("semi_aperture must be positive")
        if abs(math.sqrt(sum(v * v for v in self.thickness_dir)) - 1.0) > 1e-12:
            raise ValueError("thickness_dir must be a unit vector")
        if (1.0 + self.conic) * self.curvature ** 2 * self.semi_aperture ** 2 >= 1.0:
            raise SagDomainError("sag undefined inside the semi-aperture")

    @property
    def rotation(self) -> np.ndarray:
        return euler_rotation(*self.tilt)

    @property
    def origin(self) -> np.ndarray:
        return np.array([self.decenter[0], self.decenter[1], 0.0])

    @property
    def is_tilted(self) -> bool:
        return any(self.tilt)

    def replace(self, **changes) -> "Surface":
        return replace(self, **changes)


def _sag_terms(surface: Surface, rho2):
    """Return (z, g, ok) with dz/drho = rho * g."""
    c, k = surface.curvature, surface.conic
    arg = 1.0 - (1.0 + k) * c * c * rho2
    ok = arg > 0
    root = np.sqrt(np.where(ok, arg, 1.0))
    z = c * rho2 / (1.0 + root)
    g = c / root
    power = np.ones_like(rho2)
    for j, a in enumerate(surface.aspheric, start=1):
        if a:
            g = g + 2 * j * a * power
            z = z + a * power * rho2
        power = power * rho2
    return z, g, ok


def sag(surface: Surface, rho):
    """Surface height z at radial distance ``rho`` (mm)."""
    rho2 = np.square(np.asarray(rho, dtype=float))
    z, _, ok = _sag_terms(surface, rho2)
    if not np.all(ok):
        raise SagDomainError("(1+k) c^2 rho^2 >= 1: sag undefined")
    return float(z) if np.ndim(z) == 0 else z


def surface_function(surface: Surface, points) -> np.ndarray:
    """F(x, y, z) = z - sag(rho); zero on the surface."""
    p = np.asarray(points, dtype=float)
    z, _, ok = _sag_terms(surface, p[..., 0] ** 2 + p[..., 1] ** 2)
    return np.where(ok, p[..., 2] - z, np.nan)


def surface_normal(surface: Surface, points) -> np.ndarray:
    """Unit gradient of F; points towards +z."""
    p = np.asarray(points, dtype=float)
    _, g, _ = _sag_terms(surface, p[..., 0] ** 2 + p[..., 1] ** 2)
    grad = np.stack([-p[..., 0] * g, -p[..., 1] * g, np.ones_like(g)], axis=-1)
    return grad / np.linalg.norm(grad, axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# elementary operations (vectorized over leading axes)
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Intersection:
    point: np.ndarray
    s: np.ndarray
    normal: np.ndarray
    status: np.ndarray


def intersect(origins, directions, surface: Surface, s0=None,
              tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER,
              check_aperture: bool = True) -> Intersection:
    """Newton-Raphson ray/surface intersection in the surface's local frame.

    The default seed is the intercept with the vertex tangent plane. Rays that
    do not converge within ``max_iter`` iterations, or leave the sag domain,
    are marked MISSED; hits outside the semi-aperture are VIGNETTED.
    """
    o = np.asarray(origins, dtype=float)
    d = np.asarray(directions, dtype=float)
    scalar = o.ndim == 1
    o = np.atleast_2d(o)
    d = np.atleast_2d(d)
    n = o.shape[0]
    m = d[:, 2]
    status = np.zeros(n, dtype=np.int8)
    if s0 is None:
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(np.abs(m) > _PARALLEL_EPS, -o[:, 2] / m, 0.0)
    else:
        s = np.broadcast_to(np.asarray(s0, dtype=float), (n,)).copy()

    active = np.ones(n, dtype=bool)
    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        p = o[idx] + s[idx, None] * d[idx]
        z, g, ok = _sag_terms(surface, p[:, 0] ** 2 + p[:, 1] ** 2)
        f_val = p[:, 2] - z
        f_der = -p[:, 0] * g * d[idx, 0] - p[:, 1] * g * d[idx, 1] + d[idx, 2]
        bad = ~ok | (f_der == 0) | ~np.isfinite(f_val)
        with np.errstate(divide="ignore", invalid="ignore"):
            ds = np.where(bad, 0.0, f_val / f_der)
        s[idx] = s[idx] - ds
        status[idx[bad]] = RayStatus.MISSED
        done = bad | (np.abs(ds) < tol)
        active[idx[done]] = False
    status[active] = RayStatus.MISSED

    point = o + s[:, None] * d
    rho2 = point[:, 0] ** 2 + point[:, 1] ** 2
    _, g, ok = _sag_terms(surface, rho2)
    status[(status == 0) & ~ok] = RayStatus.MISSED
    grad = np.stack([-point[:, 0] * g, -point[:, 1] * g, np.ones(n)], axis=-1)
    normal = grad / np.linalg.norm(grad, axis=-1, keepdims=True)
    if check_aperture:
        status[(status == 0) & (rho2 > surface.semi_aperture ** 2)] = RayStatus.VIGNETTED
    if scalar:
        return Intersection(point[0], s[0], normal[0], status[0])
    return Intersection(point, s, normal, status)


def refract(directions, normals, n1, n2):
    """Vector Snell refraction D' = mu D + Gamma r.

    Gamma solves Gamma^2 + 2 a Gamma + b = 0. The transmitted root is the one
    for which D'.r keeps the sign of D.r. Returns ``(D', tir_mask)``; rays
    with total internal reflection keep their incident direction.
    """
    d = np.asarray(directions, dtype=float)
    r = np.asarray(normals, dtype=float)
    mu = np.asarray(n1, dtype=float) / np.asarray(n2, dtype=float)
    rr = np.sum(r * r, axis=-1)
    dr = np.sum(d * r, axis=-1)
    a = mu * dr / rr
    b = (mu * mu - 1.0) / rr
    disc = a * a - b
    tir = disc < 0
    root = np.sqrt(np.where(tir, 0.0, disc))
    sign = np.where(a < 0, -1.0, 1.0)
    denom = a + sign * root
    # small root written as b / (large root) to avoid cancellation
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.where(denom != 0, -b / np.where(denom != 0, denom, 1.0), -a + sign * root)
    gamma = np.where(tir, 0.0, gamma)
    out = mu[..., None] * d + gamma[..., None] * r
    out = np.where(tir[..., None], d, out)
    return out, tir


def euler_rotation(alpha: float, beta: float, gamma: float) -> np.ndarray:
    """R = Rz(gamma) . Rx(beta) . Ry(alpha) with the sign layout used for tilts."""
    ca, sa = math.cos(alpha), math.sin(alpha)
    cb, sb = math.cos(beta), math.sin(beta)
    cg, sg = math.cos(gamma), math.sin(gamma)
    rz = np.array([[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cb, -sb], [0.0, sb, cb]])
    ry = np.array([[ca, 0.0, -sa], [0.0, 1.0, 0.0], [sa, 0.0, ca]])
    return rz @ rx @ ry


def _to_local(p, d, rot, origin):
    return (p - origin) @ rot.T, d @ rot.T


def _from_local(p, d, rot, origin):
    return p @ rot + origin, d @ rot


def _transfer(p, d, opl, surface: Surface, index: float):
    dx, dy, dz = surface.thickness_dir
    length = surface.thickness
    m = d[:, 2]
    parallel = np.abs(m) < _PARALLEL_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(parallel, 0.0, (length * dz - p[:, 2]) / np.where(parallel, 1.0, m))
    out = np.empty_like(p)
    out[:, 0] = p[:, 0] + d[:, 0] * s - length * dx
    out[:, 1] = p[:, 1] + d[:, 1] * s - length * dy
    out[:, 2] = 0.0
    return out, opl + index * s, parallel


# --------------------------------------------------------------------------
# single-ray API
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    wavelength: float = LAMBDA_D
    opl: float = 0.0
    alive: bool = True

    def __post_init__(self):
        o = np.array(self.origin, dtype=float).reshape(3)
        d = np.array(self.direction, dtype=float).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ValueError("ray direction must be a unit vector")
        o.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    @classmethod
    def toward(cls, origin, direction, **kwargs) -> "Ray":
        d = np.asarray(direction, dtype=float)
        return cls(origin, d / np.linalg.norm(d), **kwargs)


def to_local(ray: Ray, surface: Surface, origin=None) -> Ray:
    """Position R(p - origin), direction R D; origin defaults to the decenter."""
    o = surface.origin if origin is None else np.asarray(origin, dtype=float)
    p, d = _to_local(ray.origin, ray.direction, surface.rotation, o)
    return replace(ray, origin=p, direction=d)


def from_local(ray: Ray, surface: Surface, origin=None) -> Ray:
    o = surface.origin if origin is None else np.asarray(origin, dtype=float)
    p, d = _from_local(ray.origin, ray.direction, surface.rotation, o)
    return replace(ray, origin=p, direction=d)


def transfer(ray: Ray, surface: Surface, index: float = 1.0) -> Ray:
    """Propagate along the surface's thickness vector into the next vertex frame."""
    p, opl, parallel = _transfer(ray.origin[None], ray.direction[None],
                                 np.array([ray.opl]), surface, index)
    if parallel[0]:
        return replace(ray, alive=False)
    return replace(ray, origin=p[0], opl=float(opl[0]))


# --------------------------------------------------------------------------
# systems
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Pupil:
    z: float        # plane position; entrance pupil: frame of surface 0, exit: sensor frame
    radius: float


@dataclass(frozen=True)
class LensSystem:
    """Ordered surfaces, aperture stop and sensor.

    The last surface's thickness is the distance to the sensor plane.
    ``object_distance`` of ``None`` means an object at infinity.
    """

    surfaces: tuple[Surface, ...]
    stop_index: int = 0
    sensor: SensorModel | None = None
    object_distance: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        if not self.surfaces:
            raise ValueError("a lens system needs at least one surface")
        if not 0 <= self.stop_index < len(self.surfaces):
            raise ValueError("stop_index out of range")
        last = self.surfaces[-1]
        if last.thickness * last.thickness_dir[2] <= 0:
            raise ValueError("sensor plane must lie after the last surface")
        if self.object_distance is not None and self.object_distance <= 0:
            raise ValueError("object_distance must be positive")

    def __len__(self):
        return len(self.surfaces)

    def replace(self, **changes) -> "LensSystem":
        return replace(self, **changes)

    def with_surface(self, index: int, **changes) -> "LensSystem":
        surfaces = list(self.surfaces)
        surfaces[index] = replace(surfaces[index], **changes)
        return replace(self, surfaces=tuple(surfaces))

    def indices(self, wavelength: float) -> np.ndarray:
        """Refractive index of the medium *after* each surface (index 0 is object space)."""
        return np.array([1.0] + [s.material.index(wavelength) for s in self.surfaces])

    # paraxial helpers ------------------------------------------------------
    def _paraxial(self, start: int, stop: int, wavelength: float,
                  refract_last: bool) -> np.ndarray:
        """Ray transfer matrix on (y, n u) from vertex ``start`` (before
        refraction) to vertex ``stop``; refraction at ``stop`` is included
        when ``refract_last``."""
        n = self.indices(wavelength)
        mat = np.eye(2)
        for i in range(start, stop + 1):
            if i == stop and not refract_last:
                break
            s = self.surfaces[i]
            power = s.curvature * (n[i + 1] - n[i])
            mat = np.array([[1.0, 0.0], [-power, 1.0]]) @ mat
            if i < stop:
                t = s.thickness * s.thickness_dir[2]
                mat = np.array([[1.0, t / n[i + 1]], [0.0, 1.0]]) @ mat
        return mat

    def efl(self, wavelength: float = LAMBDA_D) -> float:
        mat = self._paraxial(0, len(self.surfaces) - 1, wavelength, True)
        if mat[1, 0] == 0:
            raise ValueError("afocal system")
        return -1.0 / mat[1, 0]

    def entrance_pupil(self, wavelength: float = LAMBDA_D) -> Pupil:
        stop = self.surfaces[self.stop_index]
        if self.stop_index == 0:
            return Pupil(0.0, stop.semi_aperture)
        mat = self._paraxial(0, self.stop_index, wavelength, False)
        a, b = mat[0]
        return Pupil(float(b / a), float(abs(stop.semi_aperture / a)))

    def exit_pupil(self, wavelength: float = LAMBDA_D) -> Pupil:
        stop = self.surfaces[self.stop_index]
        last = len(self.surfaces) - 1
        mat = self._paraxial(self.stop_index, last, wavelength, True)
        n_img = self.indices(wavelength)[-1]
        (a, b), (c, d) = mat
        if d == 0:
            raise ValueError("exit pupil at infinity")
        z = -n_img * b / d
        mag = a + z / n_img * c
        back = self.surfaces[-1].thickness * self.surfaces[-1].thickness_dir[2]
        return Pupil(float(z - back), float(abs(mag * stop.semi_aperture)))

    def image_field(self, x_mm: float, y_mm: float, wavelength: float = LAMBDA_D) -> "Field":
        """Object-space field that images near sensor point (x, y) paraxially."""
        f = self.efl(wavelength)
        if self.object_distance is None:
            return Field(math.degrees(math.atan(x_mm / f)), math.degrees(math.atan(y_mm / f)))
        # thin-lens conjugate approximation for finite objects
        d_obj = self.object_distance
        mag = -f / (d_obj - f)
        return Field(x_mm / mag, y_mm / mag, finite=True)


# --------------------------------------------------------------------------
# tracing
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Field:
    """Object-space field point.

    Infinite conjugate (``finite=False``): ``x``/``y`` are field angles in
    degrees. Finite conjugate: object heights in mm.
    """

    x: float = 0.0
    y: float = 0.0
    finite: bool = False


@dataclass(frozen=True)
class PupilGrid:
    """Cell-centred square grid of ray positions over a pupil disc.

    With ``plane="exit"`` (default) rays are aimed so that they cross the
    exit-pupil plane on a uniform grid; the disc is enlarged by ``overfill``
    and the stop clips the real footprint, so roughly ``n`` samples span the
    aperture. ``plane="entrance"`` places the grid on the paraxial entrance
    pupil without aiming.
    """

    n: int = 128
    plane: str = "exit"
    overfill: float = 1.25
    fill: float = 1.0

    def __post_init__(self):
        if self.n < 1 or not 0 < self.fill <= 1 or self.overfill < 1:
            raise ValueError("pupil grid needs n >= 1, 0 < fill <= 1, overfill >= 1")
        if self.plane not in ("exit", "entrance"):
            raise ValueError("plane must be 'exit' or 'entrance'")

    def coords(self) -> np.ndarray:
        """Normalized sample positions; the unit circle is the nominal pupil."""
        scale = self.overfill if self.plane == "exit" and self.n > 1 else 1.0
        n = max(1, int(math.ceil(self.n * scale))) if scale > 1 else self.n
        u = (np.arange(n) + 0.5) / n * 2.0 - 1.0
        uu, vv = np.meshgrid(u, u)
        keep = uu ** 2 + vv ** 2 <= 1.0
        return np.stack([uu[keep], vv[keep]], axis=-1) * self.fill * scale


@dataclass(frozen=True)
class TraceRecord:
    points: np.ndarray                 # (S, 3) local-frame intersection points
    sensor_hit: np.ndarray             # (2,) mm
    direction: np.ndarray              # final direction in the sensor frame
    exit_pupil_point: np.ndarray       # (3,) sensor frame
    opl: float
    terminated_at: int | None
    status: RayStatus

    @property
    def alive(self) -> bool:
        return self.terminated_at is None


@dataclass(frozen=True)
class TraceBundle:
    """Array-backed collection of traced rays sharing wavelength and field."""

    points: np.ndarray          # (N, S, 3)
    sensor: np.ndarray          # (N, 3) sensor-frame positions (z = 0)
    directions: np.ndarray      # (N, 3)
    opl: np.ndarray             # (N,)
    status: np.ndarray          # (N,)
    terminated_at: np.ndarray   # (N,), -1 for survivors
    launch: np.ndarray          # (N, 3) launch positions, frame of surface 0
    launch_directions: np.ndarray
    pupil_coords: np.ndarray    # (N, 2) normalized entrance pupil coordinates
    wavelength: float
    field: Field | None = None
    exit_pupil_z: float = 0.0
    image_index: float = 1.0

    def __len__(self):
        return len(self.opl)

    @property
    def alive(self) -> np.ndarray:
        return self.terminated_at < 0

    @property
    def survival_fraction(self) -> float:
        return float(self.alive.mean()) if len(self) else 0.0

    def exit_pupil_points(self) -> np.ndarray:
        t = self.exit_pupil_z / self.directions[:, 2]
        return self.sensor + t[:, None] * self.directions

    def __getitem__(self, i: int) -> TraceRecord:
        term = int(self.terminated_at[i])
        return TraceRecord(
            points=self.points[i], sensor_hit=self.sensor[i, :2].copy(),
            direction=self.directions[i], exit_pupil_point=self.exit_pupil_points()[i],
            opl=float(self.opl[i]), terminated_at=None if term < 0 else term,
            status=RayStatus(int(self.status[i])))

    def __iter__(self) -> Iterator[TraceRecord]:
        for i in range(len(self)):
            yield self[i]

    def centroid(self) -> np.ndarray:
        alive = self.alive
        if not alive.any():
            raise EmptyBundleError("no surviving rays")
        return self.sensor[alive, :2].mean(axis=0)


def _trace_arrays(system: LensSystem, p, d, opl, wavelength: float, apertures: bool = True):
    n_rays = p.shape[0]
    n_surf = len(system.surfaces)
    n_idx = system.indices(wavelength)
    points = np.full((n_rays, n_surf, 3), np.nan)
    status = np.zeros(n_rays, dtype=np.int8)
    term = np.full(n_rays, -1, dtype=np.int32)
    p = p.copy()
    d = d.copy()
    opl = opl.copy()

    for i, surf in enumerate(system.surfaces):
        live = np.nonzero(term < 0)[0]
        if live.size == 0:
            break
        rot, org = surf.rotation, surf.origin
        pl, dl = _to_local(p[live], d[live], rot, org)
        hit = intersect(pl, dl, surf, check_aperture=apertures)
        new_d, tir = refract(dl, hit.normal, n_idx[i], n_idx[i + 1])
        new_opl = opl[live] + n_idx[i] * hit.s
        pg, dg = _from_local(hit.point, new_d, rot, org)
        pt, opl_t, parallel = _transfer(pg, dg, new_opl, surf, n_idx[i + 1])
        st = hit.status.copy()
        st[(st == 0) & tir] = RayStatus.TIR
        st[(st == 0) & parallel] = RayStatus.PARALLEL
        dead = st != 0
        points[live, i] = hit.point
        ok = live[~dead]
        p[ok], d[ok], opl[ok] = pt[~dead], dg[~dead], opl_t[~dead]
        status[live[dead]] = st[dead]
        term[live[dead]] = i
    return points, p, d, opl, status, term


def _launch(system: LensSystem, field: Field, ep_xy: np.ndarray, wavelength: float):
    """Rays through entrance-pupil plane points ``ep_xy`` (mm), frame of surface 0.

    Infinite-conjugate rays share a plane wavefront through the entrance pupil
    centre, so their starting OPL is the projection onto the propagation
    direction.
    """
    ep = system.entrance_pupil(wavelength)
    pupil = np.column_stack([ep_xy, np.full(len(ep_xy), ep.z)])
    first = system.surfaces[0]
    z_launch = min(ep.z, 0.0) - abs(sag(first, first.semi_aperture)) - 1.0
    if field.finite or system.object_distance is not None:
        if system.object_distance is None:
            raise ValueError("finite field needs a system with object_distance")
        obj = np.array([field.x, field.y, -system.object_distance])
        d = pupil - obj
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.broadcast_to(obj, d.shape).copy(), d, np.zeros(len(d))
    tx, ty = math.tan(math.radians(field.x)), math.tan(math.radians(field.y))
    d0 = np.array([tx, ty, 1.0]) / math.sqrt(tx * tx + ty * ty + 1.0)
    p = pupil - d0 * ((ep.z - z_launch) / d0[2])
    centre = np.array([0.0, 0.0, ep.z]) - d0 * ((ep.z - z_launch) / d0[2])
    return p, np.broadcast_to(d0, p.shape).copy(), (p - centre) @ d0


def _exit_crossing(system, field, ep_xy, wavelength, z_xp):
    """Exit-pupil-plane crossing and stop-surface radius, apertures ignored."""
    p0, d0, opl0 = _launch(system, field, ep_xy, wavelength)
    points, p, d, _, _, term = _trace_arrays(system, p0, d0, opl0, wavelength, apertures=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = p[:, :2] + d[:, :2] * (z_xp / d[:, 2])[:, None]
    xy[term >= 0] = np.nan
    stop = points[:, system.stop_index, :2]
    return xy, np.hypot(stop[:, 0], stop[:, 1])


def aim_rays(system: LensSystem, field: Field, targets: np.ndarray, wavelength: float,
             tol: float = 1e-9, max_iter: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Find entrance-pupil points whose rays cross the exit-pupil plane at
    ``targets`` (mm, sensor frame) by per-ray Newton iteration.

    Returns ``(ep_xy, ok)``. Rays that converge outside the stop, or whose
    iteration leaves the stop well behind, are reported not ok: the stop would
    clip them anyway.
    """
    ep = system.entrance_pupil(wavelength)
    z_xp = system.exit_pupil(wavelength).z
    r_stop = system.surfaces[system.stop_index].semi_aperture
    h = 1e-6 * ep.radius
    max_step = 0.25 * ep.radius
    c, _ = _exit_crossing(system, field, np.array([[0.0, 0.0], [h, 0.0], [0.0, h]]) * 100,
                          wavelength, z_xp)
    if not np.all(np.isfinite(c)):
        raise EmptyBundleError("chief ray cannot be traced for aiming")
    jac0 = np.column_stack([(c[1] - c[0]), (c[2] - c[0])]) / (100 * h)
    uv = np.linalg.solve(jac0, (targets - c[0]).T).T
    n = len(targets)
    active = np.ones(n, dtype=bool)
    ok = np.zeros(n, dtype=bool)
    for it in range(max_iter):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        u = uv[idx]
        xy, rho = _exit_crossing(system, field, u, wavelength, z_xp)
        err = xy - targets[idx]
        finite = np.all(np.isfinite(err), axis=1)
        done = finite & (np.max(np.abs(err), axis=1) < tol)
        ok[idx[done]] = rho[done] <= r_stop * (1 + 1e-9)
        lost = ~finite | ((it >= 3) & (rho > 1.05 * r_stop))
        active[idx[done | lost]] = False
        go = ~(done | lost)
        if not go.any():
            break
        u, xy, err, idx = u[go], xy[go], err[go], idx[go]
        xa, _ = _exit_crossing(system, field, u + [h, 0.0], wavelength, z_xp)
        xb, _ = _exit_crossing(system, field, u + [0.0, h], wavelength, z_xp)
        j00, j10 = (xa[:, 0] - xy[:, 0]) / h, (xa[:, 1] - xy[:, 1]) / h
        j01, j11 = (xb[:, 0] - xy[:, 0]) / h, (xb[:, 1] - xy[:, 1]) / h
        det = j00 * j11 - j01 * j10
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.column_stack([(j11 * err[:, 0] - j01 * err[:, 1]) / det,
                                    (-j10 * err[:, 0] + j00 * err[:, 1]) / det])
        bad = ~np.all(np.isfinite(step), axis=1)
        active[idx[bad]] = False
        norm = np.hypot(step[:, 0], step[:, 1])
        step *= np.minimum(1.0, max_step / np.maximum(norm, 1e-300))[:, None]
        uv[idx[~bad]] = u[~bad] - step[~bad]
    return uv, ok


def launch_rays(system: LensSystem, field: Field, grid: PupilGrid, wavelength: float):
    """Launch positions, directions, starting OPL and normalized pupil coords."""
    uv = grid.coords()
    if grid.plane == "entrance":
        ep = system.entrance_pupil(wavelength)
        p, d, opl = _launch(system, field, uv * ep.radius, wavelength)
        return p, d, opl, uv
    xp = system.exit_pupil(wavelength)
    z_xp = xp.z
    chief = _exit_crossing(system, field, np.zeros((1, 2)), wavelength, z_xp)[0][0]
    if not np.all(np.isfinite(chief)):
        raise EmptyBundleError("chief ray cannot be traced")
    targets = chief + uv * xp.radius
    ep_xy, ok = aim_rays(system, field, targets, wavelength)
    p, d, opl = _launch(system, field, ep_xy[ok], wavelength)
    return p, d, opl, uv[ok]


def trace_bundle(system: LensSystem, field: Field = Field(), grid: PupilGrid = PupilGrid(),
                 wavelength: float = LAMBDA_D) -> TraceBundle:
    """Trace a pupil-sampled bundle for one field and wavelength."""
    p0, d0, opl0, uv = launch_rays(system, field, grid, wavelength)
    points, p, d, opl, status, term = _trace_arrays(system, p0, d0, opl0, wavelength)
    bundle = TraceBundle(points=points, sensor=p, directions=d, opl=opl, status=status,
                         terminated_at=term, launch=p0, launch_directions=d0,
                         pupil_coords=uv, wavelength=wavelength, field=field,
                         exit_pupil_z=system.exit_pupil(wavelength).z,
                         image_index=float(system.indices(wavelength)[-1]))
    if not bundle.alive.any():
        raise EmptyBundleError("every ray in the bundle was terminated")
    return bundle


def trace_system(system: LensSystem, ray: Ray) -> TraceRecord:
    """Trace one ray given in the reference frame of surface 0."""
    points, p, d, opl, status, term = _trace_arrays(
        system, ray.origin[None], ray.direction[None], np.array([ray.opl]), ray.wavelength)
    xp_z = system.exit_pupil(ray.wavelength).z
    with np.errstate(divide="ignore", invalid="ignore"):
        xp = p[0] + d[0] * (xp_z / d[0, 2])
    t = int(term[0])
    return TraceRecord(points=points[0], sensor_hit=p[0, :2].copy(), direction=d[0],
                       exit_pupil_point=xp, opl=float(opl[0]),
                       terminated_at=None if t < 0 else t, status=RayStatus(int(status[0])))


def retrace(system: LensSystem, positions, directions, wavelength: float,
            z_end: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Trace rays backwards from the sensor plane to the plane ``z = z_end``
    of the frame of surface 0. ``directions`` must point away from the sensor.

    Returns ``(positions, directions, status)``.
    """
    p = np.atleast_2d(np.asarray(positions, dtype=float)).copy()
    d = np.atleast_2d(np.asarray(directions, dtype=float)).copy()
    n_idx = system.indices(wavelength)
    status = np.zeros(len(p), dtype=np.int8)
    for i in range(len(system.surfaces) - 1, -1, -1):
        surf = system.surfaces[i]
        p = p + surf.thickness * np.asarray(surf.thickness_dir)
        rot, org = surf.rotation, surf.origin
        pl, dl = _to_local(p, d, rot, org)
        hit = intersect(pl, dl, surf)
        new_d, tir = refract(dl, hit.normal, n_idx[i + 1], n_idx[i])
        st = hit.status.copy()
        st[(st == 0) & tir] = RayStatus.TIR
        status = np.where(status == 0, st, status)
        p, d = _from_local(hit.point, new_d, rot, org)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (z_end - p[:, 2]) / d[:, 2]
    return p + s[:, None] * d, d, status
