import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from proxycam.designs import ideal_focuser, singlet, toy_triplet
from proxycam.optics import (AIR, Field, LensSystem, MaterialSpec, PupilGrid, Ray, RayStatus,
                             SagDomainError, Surface, euler_rotation, from_local, intersect,
                             refract, retrace, sag, to_local, trace_bundle, trace_system,
                             transfer)


def random_unit(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# --------------------------------------------------------------------------
# refraction
# --------------------------------------------------------------------------

def test_refract_normal_incidence_keeps_direction():
    d, tir = refract([0.0, 0.0, 1.0], [0.0, 0.0, 1.0], 1.0, 1.5)
    np.testing.assert_allclose(d, [0, 0, 1], atol=1e-15)
    assert not tir


def test_refract_known_angle():
    th = math.radians(30)
    d, _ = refract([math.sin(th), 0, math.cos(th)], [0, 0, 1], 1.0, 1.5)
    assert math.asin(d[0]) == pytest.approx(math.asin(math.sin(th) / 1.5), abs=1e-14)


def test_refract_unnormalized_normal_and_flipped_normal_agree():
    rng = np.random.default_rng(3)
    D = random_unit(rng, 200)
    r = random_unit(rng, 200)
    a, ta = refract(D, r, 1.0, 1.33)
    b, tb = refract(D, -3.0 * r, 1.0, 1.33)
    np.testing.assert_array_equal(ta, tb)
    np.testing.assert_allclose(a, b, atol=1e-13)


def test_refract_tir_flagged():
    th = math.radians(60)
    d, tir = refract([math.sin(th), 0, math.cos(th)], [0, 0, 1], 1.5, 1.0)
    assert tir
    # just below the critical angle: transmitted at grazing
    crit = math.asin(1 / 1.5) - 1e-6
    d, tir = refract([math.sin(crit), 0, math.cos(crit)], [0, 0, 1], 1.5, 1.0)
    assert not tir and d[0] == pytest.approx(1.0, abs=1e-2)


@settings(max_examples=300, deadline=None)
@given(st.floats(0.0, 1.4), st.floats(1.0, 2.2), st.floats(1.0, 2.2), st.floats(0, 2 * math.pi))
def test_refract_snell_property(theta, n1, n2, phi):
    D = np.array([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)])
    r = np.array([0.0, 0.0, 1.0])
    Dp, tir = refract(D, r, n1, n2)
    if n1 * math.sin(theta) > n2 * (1 + 1e-12):
        assert tir
        return
    if n1 * math.sin(theta) > n2 * (1 - 1e-9):
        return          # too close to grazing to classify robustly
    assert not tir
    assert np.linalg.norm(Dp) == pytest.approx(1.0, abs=1e-12)
    assert n1 * np.linalg.norm(np.cross(D, r)) == pytest.approx(n2 * np.linalg.norm(np.cross(Dp, r)), abs=1e-12)
    assert np.dot(np.cross(D, r), Dp) == pytest.approx(0.0, abs=1e-12)
    assert Dp[2] > 0        # transmitted, not reflected


def test_refract_vectorized_matches_scalar():
    rng = np.random.default_rng(0)
    D, r = random_unit(rng, 50), random_unit(rng, 50)
    D[:, 2] = np.abs(D[:, 2])
    n1 = rng.uniform(1, 2, 50)
    n2 = rng.uniform(1, 2, 50)
    vec, tir = refract(D, r, n1, n2)
    for i in range(50):
        s, t = refract(D[i], r[i], n1[i], n2[i])
        assert t == tir[i]
        np.testing.assert_allclose(s, vec[i], atol=1e-15)


# --------------------------------------------------------------------------
# rotations and frames
# --------------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(*(st.floats(-math.pi, math.pi) for _ in range(3)))
def test_euler_rotation_orthonormal(a, b, g):
    R = euler_rotation(a, b, g)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-14)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(*(st.floats(-1.0, 1.0) for _ in range(3)))
def test_euler_rotation_matches_scipy(a, b, g):
    # Rz(g) Rx(b) Ry(a) with the y rotation written for a positive alpha
    # turning +z towards -x
    ref = Rotation.from_euler("ZXY", [g, b, -a]).as_matrix()
    np.testing.assert_allclose(euler_rotation(a, b, g), ref, atol=1e-14)


def test_local_frame_roundtrip():
    s = Surface(tilt=(0.01, -0.02, 0.3), decenter=(0.1, -0.05))
    ray = Ray.toward([0.3, 0.2, -1.0], [0.05, -0.02, 1.0])
    back = from_local(to_local(ray, s), s)
    np.testing.assert_allclose(back.origin, ray.origin, atol=1e-15)
    np.testing.assert_allclose(back.direction, ray.direction, atol=1e-15)


def test_transfer_moves_into_next_frame():
    s = Surface(thickness=5.0)
    ray = Ray.toward([0.0, 0.0, 0.0], [0.0, 0.6, 0.8])
    out = transfer(ray, s, index=1.5)
    np.testing.assert_allclose(out.origin, [0, 3.75, 0], atol=1e-14)
    assert out.opl == pytest.approx(1.5 * 6.25)


def test_ray_rejects_non_unit_direction():
    with pytest.raises(ValueError):
        Ray([0, 0, 0], [0, 0, 2])


# --------------------------------------------------------------------------
# surfaces and intersection
# --------------------------------------------------------------------------

def test_sag_sphere_closed_form():
    R = 5.0
    s = Surface(curvature=1 / R, semi_aperture=4.0)
    rho = np.linspace(0, 4, 9)
    np.testing.assert_allclose(sag(s, rho), R - np.sqrt(R * R - rho ** 2), atol=1e-14)


def test_sag_domain_error_on_construction():
    with pytest.raises(SagDomainError):
        Surface(curvature=0.5, semi_aperture=2.5)


def test_intersect_sphere_matches_quadratic():
    rng = np.random.default_rng(1)
    R = 8.0
    s = Surface(curvature=1 / R, semi_aperture=5.0)
    o = np.column_stack([rng.uniform(-3, 3, 100), rng.uniform(-3, 3, 100), np.full(100, -2.0)])
    d = np.column_stack([rng.uniform(-0.1, 0.1, 100), rng.uniform(-0.1, 0.1, 100), np.ones(100)])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    hit = intersect(o, d, s)
    # sphere centred at (0, 0, R): |o + t d - C|^2 = R^2, smaller root
    oc = o - [0, 0, R]
    b = np.sum(oc * d, axis=1)
    c = np.sum(oc * oc, axis=1) - R * R
    t = -b - np.sqrt(b * b - c)
    np.testing.assert_allclose(hit.s, t, atol=1e-10)
    assert np.all(hit.status == 0)


def test_intersect_flags_vignetting_and_misses():
    s = Surface(curvature=0.1, semi_aperture=1.0)
    hit = intersect([[2.0, 0, -1], [0.5, 0, -1]], [[0, 0, 1], [0, 0, 1]], s)
    assert hit.status[0] == RayStatus.VIGNETTED and hit.status[1] == 0
    small = Surface(curvature=0.5, semi_aperture=1.0)
    miss = intersect([[3.0, 0, -1]], [[0, 0, 1]], small)
    assert miss.status[0] == RayStatus.MISSED


def test_material_dispersion_line_passes_nd_and_abbe():
    from proxycam.optics import LAMBDA_C, LAMBDA_D, LAMBDA_F

    m = MaterialSpec(1.5168, 64.17)
    assert m.index(LAMBDA_D) == pytest.approx(1.5168, abs=1e-14)
    assert (m.index(LAMBDA_F) - m.index(LAMBDA_C)) == pytest.approx(0.5168 / 64.17, rel=1e-12)
    assert AIR.index(0.4) == 1.0


# --------------------------------------------------------------------------
# systems
# --------------------------------------------------------------------------

def test_singlet_paraxial_focus():
    lens = singlet(radius=50.0, nd=1.5)
    ray = Ray([0.0, 0.01, -1.0], [0.0, 0.0, 1.0])
    rec = trace_system(lens, ray)
    # find where the ray crosses the axis after the last surface (sensor frame)
    z_cross = -rec.sensor_hit[1] / (rec.direction[1] / rec.direction[2])
    bfd = lens.surfaces[-1].thickness + z_cross
    # plano-convex, curved side first: back focal distance = f - t/n
    assert bfd == pytest.approx(100.0 - 2.0 / 1.5, rel=1e-6)
    assert lens.efl(0.5876) == pytest.approx(100.0, rel=1e-12)


def test_ideal_focuser_has_equal_opl():
    lens = ideal_focuser()
    b = trace_bundle(lens, Field(), PupilGrid(16), 0.55)
    assert b.survival_fraction == 1.0
    np.testing.assert_allclose(b.sensor[:, :2], 0.0, atol=1e-9)
    assert np.ptp(b.opl) < 1e-9


def test_on_axis_bundle_is_symmetric():
    lens = toy_triplet()
    b = trace_bundle(lens, Field(), PupilGrid(12, plane="entrance"), 0.55)
    uv = b.pupil_coords
    hits = b.sensor[:, :2]
    # mirror pairs (u, v) <-> (-u, v)
    for i in range(len(uv)):
        j = np.argmin(np.hypot(uv[:, 0] + uv[i, 0], uv[:, 1] - uv[i, 1]))
        np.testing.assert_allclose(hits[j], [-hits[i, 0], hits[i, 1]], atol=1e-12)


def test_meridional_ray_stays_in_plane():
    lens = toy_triplet()
    rec = trace_system(lens, Ray.toward([0.0, 0.3, -0.5], [0.0, 0.05, 1.0]))
    assert rec.alive
    np.testing.assert_allclose(rec.points[:, 0], 0.0, atol=1e-15)


def test_trace_is_reversible():
    lens = toy_triplet().with_surface(5, tilt=(0.002, -0.001, 0.0), decenter=(0.01, 0.0)) \
                        .with_surface(6, tilt=(0.002, -0.001, 0.0), decenter=(0.01, 0.0))
    b = trace_bundle(lens, Field(3.0, -5.0), PupilGrid(8), 0.55)
    alive = b.alive
    p, d, st = retrace(lens, b.sensor[alive], -b.directions[alive], 0.55, z_end=b.launch[0, 2])
    assert np.all(st == 0)
    np.testing.assert_allclose(p, b.launch[alive], atol=1e-9)
    np.testing.assert_allclose(-d, b.launch_directions[alive], atol=1e-9)


def test_exit_pupil_grid_is_uniform():
    lens = toy_triplet()
    grid = PupilGrid(16)
    b = trace_bundle(lens, Field(0.0, 10.0), grid, 0.55)
    pts = b.exit_pupil_points()[b.alive][:, :2]
    xp = lens.exit_pupil(0.55)
    chief = pts.mean(axis=0)
    # aimed crossings land on the requested cell-centred lattice
    expected = b.pupil_coords[b.alive] * xp.radius
    offset = (pts - expected).mean(axis=0)
    np.testing.assert_allclose(pts - expected, np.broadcast_to(offset, pts.shape), atol=1e-6)
    assert np.all(np.isfinite(chief))


def test_survival_and_vignetting_report():
    lens = toy_triplet()
    b = trace_bundle(lens, Field(), PupilGrid(10, plane="entrance", fill=1.0), 0.55)
    assert b.survival_fraction == 1.0
    # first lens face shrunk below the beam: outer rays are clipped there
    tight = lens.with_surface(1, semi_aperture=0.4)
    b2 = trace_bundle(tight, Field(), PupilGrid(10, plane="entrance"), 0.55)
    assert 0 < b2.survival_fraction < 1
    dead = ~b2.alive
    assert np.all(b2.terminated_at[dead] == 1)
    assert np.all(b2.status[dead] == RayStatus.VIGNETTED)
    assert b2[int(np.nonzero(dead)[0][0])].alive is False


def test_lens_system_validation():
    with pytest.raises(ValueError):
        LensSystem(())
    with pytest.raises(ValueError):
        LensSystem((Surface(thickness=1.0),), stop_index=3)
    with pytest.raises(ValueError):
        MaterialSpec(3.0, 50)
