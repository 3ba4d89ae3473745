import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfulm.geometry import (AcquisitionParams, AffineMap, ArrayGeometry, GeometryError,
                            PlaneWave, PointSet, Space, apply_affine, default_region,
                            default_waves, estimate_semiglobal_scale, fit_affine,
                            measure_wavefront_width, project_tips, project_to_channels,
                            reprojection_error, sample_region, wavefront_tip)
from rfulm.simulator import Scene, simulate_rf


def scalar_projection(p, geom, wave, fs, c):
    """Per-element loop over the time-of-flight formula, one element at a time."""
    vy, vz = wave.virtual_source
    tx = math.sqrt((p[0] - vy) ** 2 + (p[1] - vz) ** 2) - wave.offset
    out = []
    for k in range(geom.n_elements):
        xk = (k - (geom.n_elements - 1) / 2) * geom.pitch
        out.append(fs / c * (tx + math.sqrt((p[0] - xk) ** 2 + p[1] ** 2)))
    return np.array(out)


def wave_below(y, standoff=1.0):
    """0 degree wave whose virtual source sits directly below lateral position ``y``."""
    return PlaneWave(0.0, (y, -standoff), standoff)


class TestTypes:
    def test_defaults(self, geom, acq):
        assert geom.n_elements == 128 and geom.pitch == 1e-4
        assert acq.c == 1540.0
        assert acq.wavelength == pytest.approx(acq.c / acq.fc, rel=1e-12)
        assert acq.fs_iq == acq.fs / acq.decimation

    def test_elements_collinear_and_ordered(self, geom):
        el = geom.element_positions
        assert np.all(el[:, 1] == 0)
        np.testing.assert_allclose(np.diff(el[:, 0]), geom.pitch, atol=1e-12)
        assert el[:, 0].mean() == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("kw", [dict(n_elements=1), dict(pitch=0.0), dict(pitch=-1e-4)])
    def test_bad_geometry(self, kw):
        with pytest.raises(GeometryError):
            ArrayGeometry(**kw)

    @pytest.mark.parametrize("kw", [dict(c=0.0), dict(fc=-1.0), dict(n_samples=0),
                                    dict(decimation=0), dict(relative_bandwidth=0.0)])
    def test_bad_acquisition(self, kw):
        with pytest.raises(GeometryError):
            AcquisitionParams(**kw)

    def test_virtual_source_on_steering_line(self, geom):
        w = PlaneWave.from_degrees(5.0, geom)
        vy, vz = w.virtual_source
        assert math.atan2(-vy, -vz) == pytest.approx(math.radians(5.0))
        assert math.hypot(vy, vz) == pytest.approx(w.offset)
        assert w.offset == pytest.approx(100 * geom.aperture)

    def test_default_waves(self, geom):
        ws = default_waves(geom)
        assert [w.index for w in ws] == [0, 1, 2]
        assert [round(math.degrees(w.angle), 9) for w in ws] == [-5.0, 0.0, 5.0]

    def test_pointset_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            PointSet([[0.0, np.nan]])

    def test_pointset_concat_mixed_space(self):
        a = PointSet([[0, 0]], Space.BMODE)
        b = PointSet([[1, 1]], Space.CHANNEL)
        with pytest.raises(ValueError):
            PointSet.concat([a, b])

    def test_pointset_concat_fills_metadata(self):
        a = PointSet([[0, 0]], confidence=[0.5])
        b = PointSet([[1, 1], [2, 2]], wave_index=[1, 2])
        c = PointSet.concat([a, b])
        assert len(c) == 3
        np.testing.assert_array_equal(c.confidence, [0.5, 1.0, 1.0])
        np.testing.assert_array_equal(c.wave_index, [-1, 1, 2])
        assert c.frame_id is None


class TestProjection:
    def test_on_axis_round_trip(self, geom, acq):
        k = 40
        y = geom.element_positions[k, 0]
        z = 4e-3
        d = project_to_channels((y, z), geom, wave_below(y), acq)
        assert d[k] == pytest.approx(2 * z * acq.fs_iq / acq.c, rel=1e-12)
        assert np.argmin(d) == k

    def test_five_mm_at_rf_rate(self, geom, acq):
        y = geom.element_positions[70, 0]
        d = project_to_channels((y, 5e-3), geom, wave_below(y), acq, fs=62.5e6)
        assert d[70] == pytest.approx(405.844, abs=1e-3)

    def test_matches_scalar_oracle(self, geom, acq, wave0):
        for p in [(1.7e-3, 6e-3), (-4.1e-3, 2.5e-3), (9e-3, 12e-3)]:
            ref = scalar_projection(p, geom, wave0, acq.fs_iq, acq.c)
            np.testing.assert_allclose(project_to_channels(p, geom, wave0, acq), ref,
                                       rtol=0, atol=1e-9)

    def test_convex_near_minimum(self, geom, acq, wave0):
        d = project_to_channels((1.7e-3, 6e-3), geom, wave0, acq)
        k = int(np.argmin(d))
        seg = d[k - 5:k + 6]
        assert np.all(np.diff(seg, 2) > 0)

    def test_minimum_at_nearest_element(self, geom, acq, wave0, rng):
        p = sample_region(200, default_region(geom), rng)
        d = project_to_channels(p, geom, wave0, acq)
        nearest = np.argmin(np.abs(p[:, 0, None] - geom.element_positions[None, :, 0]), axis=1)
        np.testing.assert_array_equal(np.argmin(d, axis=1), nearest)

    def test_batch_matches_single(self, geom, acq, wave0, rng):
        p = sample_region(5, default_region(geom), rng)
        batch = project_to_channels(p, geom, wave0, acq)
        for i in range(5):
            np.testing.assert_array_equal(batch[i], project_to_channels(p[i], geom, wave0, acq))

    def test_rejects_points_behind_array(self, geom, acq, wave0):
        with pytest.raises(GeometryError):
            project_to_channels((0.0, -1e-3), geom, wave0, acq)

    def test_negative_depth_raises(self, geom, acq):
        bad = PlaneWave(0.0, (0.0, -1.0), 2.0)
        with pytest.raises(GeometryError):
            project_to_channels((0.0, 1e-3), geom, bad, acq)

    def test_lateral_shift_equivariance(self, geom, acq):
        # a 0 degree wave with the source directly below each point removes
        # the transmit term's lateral dependence
        y, z = 0.33e-3, 5e-3
        a = project_to_channels((y, z), geom, wave_below(y), acq)
        b = project_to_channels((y + geom.pitch, z), geom, wave_below(y + geom.pitch), acq)
        np.testing.assert_allclose(b[1:], a[:-1], atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-6e-3, 6e-3), st.floats(1e-3, 14e-3), st.floats(1e-5, 1e-3))
    def test_tip_depth_monotone_in_depth(self, y, z, dz):
        geom, acq = ArrayGeometry(), AcquisitionParams()
        w = PlaneWave.from_degrees(0.0, geom)
        z1 = project_tips([(y, z)], geom, w, acq)[0, 1]
        z2 = project_tips([(y, z + dz)], geom, w, acq)[0, 1]
        assert z2 > z1


class TestWavefrontTip:
    def test_symmetric_tie_goes_low(self, geom, acq, wave0):
        d = project_to_channels((0.0, 5e-3), geom, wave0, acq)
        y, z = wavefront_tip(d, geom, refine=False)
        assert y == 63
        assert d[63] == pytest.approx(d[64], abs=1e-9)
        assert z == d[63]

    def test_exact_tie_lower_index(self):
        d = np.array([5.0, 3.0, 3.0, 5.0])
        assert wavefront_tip(d, refine=False) == (1.0, 3.0)
        y, z = wavefront_tip(d, refine=True)
        assert y == pytest.approx(1.5) and z < 3.0

    def test_on_element_apex_depth(self, geom, acq):
        y0 = geom.element_positions[64, 0]
        d = project_to_channels((y0, 7e-3), geom, wave_below(y0), acq)
        y, z = wavefront_tip(d, geom, refine=False)
        assert y == 64 and z == pytest.approx(2 * 7e-3 * acq.fs_iq / acq.c, rel=1e-12)

    @pytest.mark.parametrize("sign,expected", [(1, 0), (-1, 127)])
    def test_monotone_hits_boundary(self, sign, expected):
        d = sign * np.arange(128, dtype=float)
        assert wavefront_tip(d, refine=False)[0] == expected
        assert wavefront_tip(d, refine=True)[0] == expected

    def test_beyond_array_edge(self, geom, acq, wave0):
        d = project_to_channels((-9e-3, 3e-3), geom, wave0, acq)
        assert wavefront_tip(d, geom)[0] == 0

    def test_exhaustive_scan_1000(self, geom, acq, wave0, rng):
        p = sample_region(1000, default_region(geom), rng)
        d = project_to_channels(p, geom, wave0, acq)
        tips = wavefront_tip(d, geom, refine=False)
        for row, (y, z) in zip(d, tips):
            best_k, best = 0, row[0]
            for k in range(1, len(row)):
                if row[k] < best:
                    best_k, best = k, row[k]
            assert (y, z) == (best_k, best)

    def test_refined_tip_tracks_lateral_position(self, geom, acq, rng):
        # with the source straight below, the apex is exactly the point's lateral position
        y = rng.uniform(-5e-3, 5e-3, 50)
        for yi in y:
            d = project_to_channels((yi, 6e-3), geom, wave_below(yi), acq)
            ty, tz = wavefront_tip(d, geom)
            exact = yi / geom.pitch + (geom.n_elements - 1) / 2
            assert abs(ty - exact) < 0.05
            assert tz <= d.min() + 1e-12

    def test_count_mismatch(self, geom):
        with pytest.raises(GeometryError):
            wavefront_tip(np.ones(10), geom)


@pytest.fixture(scope="module")
def maps(geom, acq):
    return [fit_affine(geom, w, acq, n=1000, seed=0) for w in default_waves(geom)]


class TestAffine:
    def test_identity_unchanged(self, rng):
        pts = rng.standard_normal((10, 2))
        out = apply_affine(AffineMap(), PointSet(pts, Space.CHANNEL))
        np.testing.assert_array_equal(out.points, pts)
        assert out.space == Space.BMODE

    def test_translation(self):
        amap = AffineMap(np.array([[1.0, 0, 1], [0, 1.0, 2]]))
        out = apply_affine(amap, PointSet([[0.0, 0.0]], Space.CHANNEL))
        np.testing.assert_array_equal(out.points, [[1.0, 2.0]])

    def test_metadata_carried(self):
        pts = PointSet([[1, 2], [3, 4]], Space.CHANNEL, confidence=[0.2, 0.9],
                       wave_index=[2, 2], frame_id=[5, 6])
        out = apply_affine(AffineMap(), pts)
        np.testing.assert_array_equal(out.confidence, [0.2, 0.9])
        np.testing.assert_array_equal(out.wave_index, [2, 2])
        np.testing.assert_array_equal(out.frame_id, [5, 6])

    def test_space_mismatch(self):
        with pytest.raises(ValueError):
            apply_affine(AffineMap(), PointSet([[0, 0]], Space.BMODE))

    def test_singular_rejected(self):
        with pytest.raises(GeometryError):
            AffineMap(np.array([[1.0, 2.0, 0], [2.0, 4.0, 0]]))

    def test_affine_combination(self, rng):
        amap = AffineMap(rng.standard_normal((2, 3)) + np.eye(2, 3))
        p, q = rng.standard_normal((2, 2))
        a = rng.uniform(-2, 2)
        lhs = amap(a * p + (1 - a) * q)
        rhs = a * amap(p) + (1 - a) * amap(q)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_save_load(self, tmp_path):
        amap = AffineMap(np.array([[1.5, 0.1, -2e-3], [0.2, 0.9, 4e-4]]), 2, 1.25e-6)
        amap.save(tmp_path / "a.txt")
        assert len((tmp_path / "a.txt").read_text().splitlines()) == 8
        back = AffineMap.load(tmp_path / "a.txt")
        np.testing.assert_array_equal(back.matrix, amap.matrix)
        assert back.wave_index == 2 and back.residual == amap.residual

    def test_load_lenient_whitespace(self, tmp_path):
        (tmp_path / "a.txt").write_text("1 0  0\n0\t1 0 3\n")
        back = AffineMap.load(tmp_path / "a.txt")
        assert back.wave_index == 3 and math.isnan(back.residual)

    def test_recovers_exact_affine(self, geom, acq, wave0):
        M = np.array([[40.0, 3.0], [-2.0, 900.0]])
        t = np.array([60.0, -5.0])
        stub = lambda p: p @ M.T + t  # noqa: E731
        amap = fit_affine(geom, wave0, acq, n=200, seed=3, tip_fn=stub)
        Minv = np.linalg.inv(M)
        np.testing.assert_allclose(amap.matrix[:, :2], Minv, rtol=1e-9, atol=1e-15)
        np.testing.assert_allclose(amap.matrix[:, 2], -Minv @ t, rtol=1e-9, atol=1e-15)
        assert amap.residual < 1e-12

    def test_too_few_points(self, geom, acq, wave0):
        with pytest.raises(ValueError):
            fit_affine(geom, wave0, acq, n=6)

    def test_deterministic(self, geom, acq, wave0):
        a = fit_affine(geom, wave0, acq, n=300, seed=4)
        b = fit_affine(geom, wave0, acq, n=300, seed=4)
        np.testing.assert_array_equal(a.matrix, b.matrix)

    def test_residual_below_quarter_wavelength(self, maps, geom, acq):
        for amap, w in zip(maps, default_waves(geom)):
            assert reprojection_error(amap, geom, w, acq, n=1000, seed=11) < acq.wavelength / 4

    def test_one_map_per_wave(self, maps):
        assert [m.wave_index for m in maps] == [0, 1, 2]
        assert not np.allclose(maps[0].matrix, maps[2].matrix)

    def test_round_trip_within_residual(self, maps, geom, acq, rng):
        # per-point errors are heavy tailed (std about twice the mean), so the
        # mean needs ~1000 fresh points to sit reliably within 10% of the fit
        w = default_waves(geom)[1]
        p = sample_region(1000, default_region(geom), rng)
        tips = PointSet(project_tips(p, geom, w, acq), Space.CHANNEL)
        err = np.linalg.norm(apply_affine(maps[1], tips).points - p, axis=1).mean()
        assert err <= 1.1 * maps[1].residual

    def test_residual_seed_stable(self, geom, acq, wave0):
        r = [fit_affine(geom, wave0, acq, n=1000, seed=s).residual for s in (0, 1, 2)]
        assert max(r) / min(r) < 1.2


class TestSemiglobalScale:
    @pytest.mark.parametrize("rf,k1,G", [(65, 5, 16), (5, 5, 1), (33, 5, 8), (9, 9, 1)])
    def test_formula(self, rf, k1, G):
        assert estimate_semiglobal_scale(rf, k1) == G

    @pytest.mark.parametrize("rf,k1", [(3, 5), (5, 1)])
    def test_bad_args(self, rf, k1):
        with pytest.raises(ValueError):
            estimate_semiglobal_scale(rf, k1)


class TestWavefrontWidth:
    def test_triangle(self):
        prof = np.maximum(0, 10 - np.abs(np.arange(-20, 21)))
        assert measure_wavefront_width(prof, 0.5) == 11

    def test_delta(self):
        prof = np.zeros(31)
        prof[7] = 1
        assert measure_wavefront_width(prof) == 1

    def test_uses_magnitude(self):
        assert measure_wavefront_width([0, -1, -4, -1, 0]) == 1
        assert measure_wavefront_width([0, -3, -4, -3, 0]) == 3

    def test_flat_raises(self):
        with pytest.raises(ValueError):
            measure_wavefront_width(np.ones(9))

    @pytest.mark.xfail(strict=True, reason="native pulse is about one I/Q sample long; "
                       "lateral half-maximum span is 9-16 elements, not ~65")
    def test_distant_scatterer_width(self, geom, acq, wave0):
        f = simulate_rf(Scene([[0.0, 14e-3]], [1.0]), geom, wave0, acq)
        env = f.envelope
        k, v = np.unravel_index(np.argmax(env), env.shape)
        width = max(measure_wavefront_width(env[:, v]), measure_wavefront_width(env[k, :]))
        assert abs(width - 65) <= 0.3 * 65
