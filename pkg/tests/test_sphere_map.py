import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynsky.sphere_map import (
    AmbiguousArcError,
    FisheyeProjection,
    InvalidPixelError,
    OutOfHemisphereError,
    angle_between,
    clamp_to_disc,
    displace_on_sphere,
    great_arc_interp,
    project,
    unproject,
)

PROJ = FisheyeProjection(256)


def hemisphere_dirs(rng, n):
    d = rng.normal(size=(n, 3))
    d[:, 2] = np.abs(d[:, 2])
    return d / np.linalg.norm(d, axis=1, keepdims=True)


class TestProjection:
    def test_zenith_maps_to_center(self):
        assert np.allclose(project([0, 0, 1], PROJ), PROJ.center)

    def test_horizon_on_rim(self):
        # Azimuth 0 points along +u, azimuth 90 deg along +v (image down).
        assert np.allclose(project([1, 0, 0], PROJ), (256, 128))
        assert np.allclose(project([0, 1, 0], PROJ), (128, 256))

    def test_equidistant_radius(self):
        theta = 0.3
        p = project([math.sin(theta), 0, math.cos(theta)], PROJ)
        assert p[0] - 128 == pytest.approx(theta / (math.pi / 2) * 128)

    def test_below_horizon(self):
        with pytest.raises(OutOfHemisphereError):
            project([0, 0, -1], PROJ)

    def test_outside_disc(self):
        with pytest.raises(InvalidPixelError):
            unproject([0.0, 0.0], PROJ)

    def test_round_trip_pixels(self, rng):
        r = rng.random(1000) * 128
        a = rng.random(1000) * 2 * math.pi
        p = np.stack([128 + r * np.cos(a), 128 + r * np.sin(a)], axis=-1)
        assert np.max(np.abs(project(unproject(p, PROJ), PROJ) - p)) < 1e-9

    def test_unproject_unit_vectors(self, rng):
        p = 128 + (rng.random((500, 2)) - 0.5) * 180
        d = unproject(p, PROJ)
        assert np.allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-12)
        assert np.all(d[:, 2] >= 0)

    def test_round_trip_directions(self, rng):
        d = hemisphere_dirs(rng, 2000)
        back = unproject(project(d, PROJ), PROJ)
        assert np.max(angle_between(d, back)) < 1e-9

    def test_dict_round_trip(self):
        assert FisheyeProjection.from_dict(PROJ.to_dict()) == PROJ


class TestGreatArc:
    def test_endpoints(self, rng):
        d0, d1 = hemisphere_dirs(rng, 2)
        assert np.allclose(great_arc_interp(d0, d1, 0.0), d0)
        assert np.allclose(great_arc_interp(d0, d1, 1.0), d1)

    def test_identical_directions(self):
        d = np.array([0.0, 0.6, 0.8])
        assert np.allclose(great_arc_interp(d, d, 0.4), d)

    def test_antipodal_rejected(self):
        with pytest.raises(AmbiguousArcError):
            great_arc_interp([1, 0, 0], [-1, 0, 0], 0.5)

    def test_midpoint_of_quarter_arc(self):
        m = great_arc_interp([1, 0, 0], [0, 0, 1], 0.5)
        assert np.allclose(m, [math.sqrt(0.5), 0, math.sqrt(0.5)])

    @given(st.floats(0, 1), st.integers(0, 10_000))
    @settings(max_examples=100, deadline=None)
    def test_angle_additivity(self, s, seed):
        d0, d1 = hemisphere_dirs(np.random.default_rng(seed), 2)
        m = great_arc_interp(d0, d1, s)
        total = angle_between(d0, d1)
        assert angle_between(d0, m) == pytest.approx(s * total, abs=1e-9)
        assert angle_between(d0, m) + angle_between(m, d1) == pytest.approx(total, abs=1e-9)


class TestDisplace:
    def test_zero_fraction_exact(self, rng):
        p = 128 + (rng.random((50, 2)) - 0.5) * 100
        v = rng.normal(size=(50, 2)) * 5
        out, _ = displace_on_sphere(p, v, 0.0, PROJ)
        assert np.array_equal(out, p)

    def test_zero_flow_exact(self, rng):
        p = 128 + (rng.random((50, 2)) - 0.5) * 100
        out, _ = displace_on_sphere(p, np.zeros((50, 2)), 0.37, PROJ)
        assert np.array_equal(out, p)

    def test_full_fraction_reaches_target(self, rng):
        p = 128 + (rng.random((50, 2)) - 0.5) * 100
        v = rng.normal(size=(50, 2)) * 5
        out, clamped = displace_on_sphere(p, v, 1.0, PROJ)
        assert not clamped.any()
        assert np.array_equal(out, p + v)

    def test_near_center_small_step_is_nearly_linear(self):
        p = np.array([128.0, 128.0])
        out, _ = displace_on_sphere(p, np.array([3.0, 0.0]), 1 / 3, PROJ)
        assert out == pytest.approx([129.0, 128.0], abs=1e-9)

    def test_target_outside_is_clamped_and_flagged(self):
        out, clamped = displace_on_sphere(np.array([250.0, 128.0]), np.array([20.0, 0.0]), 1.0, PROJ)
        assert clamped
        assert np.hypot(out[0] - 128, out[1] - 128) == pytest.approx(128)

    def test_antipodal_horizon_falls_back_to_linear(self):
        out, _ = displace_on_sphere(np.array([0.0, 128.0]), np.array([256.0, 0.0]), 0.25, PROJ)
        assert out == pytest.approx([64.0, 128.0])

    def test_clamp_inside_unchanged(self):
        p, flag = clamp_to_disc(np.array([100.0, 120.0]), PROJ)
        assert not flag and np.array_equal(p, [100.0, 120.0])


def test_pixel_round_trip_sweep():
    rng = np.random.default_rng(144)
    r = np.sqrt(rng.random(10_000)) * 128
    a = rng.random(10_000) * 2 * math.pi
    p = np.stack([128 + r * np.cos(a), 128 + r * np.sin(a)], axis=-1)
    assert np.max(np.abs(project(unproject(p, PROJ), PROJ) - p)) < 1e-4


def test_radial_arc_is_linear_in_radius():
    # Explicit arc: both ends share azimuth 0, zenith angles 0 and 10/128 * pi/2.
    d0 = np.array([0.0, 0.0, 1.0])
    th = 10 / 128 * math.pi / 2
    d1 = np.array([math.sin(th), 0.0, math.cos(th)])
    mid = np.array([math.sin(th / 2), 0.0, math.cos(th / 2)])
    assert np.allclose(great_arc_interp(d0, d1, 0.5), mid)
    out, _ = displace_on_sphere(np.array([128.0, 128.0]), np.array([10.0, 0.0]), 0.5, PROJ)
    assert out == pytest.approx([133.0, 128.0], abs=1e-9)
    assert np.allclose(project(mid, PROJ), out)
