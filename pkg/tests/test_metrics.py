import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from artifact.errors import DomainError, GeometryError, NotFoundError, ParameterError
from artifact.imaging import Roi
from artifact.metrics import (
    EvalReport,
    FilamentSpec,
    measure_filament_length,
    mse,
    mssim,
    psnr,
    rmspe,
    roi_from_mask,
)
from artifact.phantom import Filament, render_filaments


class TestMsePsnr:
    def test_identical(self):
        a = np.random.default_rng(0).random((8, 8))
        assert mse(a, a) == 0 and psnr(a, a) == math.inf

    def test_constant_difference(self):
        a = np.zeros((8, 8))
        assert mse(a, a + 0.1) == pytest.approx(0.01, rel=1e-12)
        assert psnr(a, a + 0.1) == pytest.approx(20.0, rel=1e-12)

    def test_loop_oracle_with_roi(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((10, 12)), rng.random((10, 12))
        roi = Roi(2, 3, 5, 4)
        total = sum((a[y, x] - b[y, x]) ** 2 for y in range(3, 7) for x in range(2, 7))
        assert mse(a, b, roi) == pytest.approx(total / 20, rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0))
    def test_psnr_decreasing(self, e1, e2):
        a = np.zeros((2, 2))
        p1, p2 = psnr(a, a + math.sqrt(e1)), psnr(a, a + math.sqrt(e2))
        if e1 < e2:
            assert p1 > p2
        elif e1 > e2:
            assert p1 < p2

    def test_report_serialization(self):
        d = EvalReport(mssim=1.0, psnr=math.inf, mse=0.0, filament_lengths=[(1, 2.5)]).to_dict()
        assert d["psnr"] == "inf" and d["filament_lengths"] == [[1, 2.5]]


class TestMssim:
    def test_identical(self):
        a = np.random.default_rng(0).random((20, 20))
        assert mssim(a, a) == 1.0

    def test_constant_closed_form(self):
        mu, d = 0.4, 0.1
        C1 = (0.01 * 1.0) ** 2
        expected = (2 * mu * (mu + d) + C1) / (mu ** 2 + (mu + d) ** 2 + C1)
        assert mssim(np.full((16, 16), mu), np.full((16, 16), mu + d)) == pytest.approx(expected, abs=1e-12)

    def test_matches_reference_implementation(self):
        metrics = pytest.importorskip("skimage.metrics")
        rng = np.random.default_rng(3)
        for _ in range(5):
            a = rng.random((30, 40))
            b = a + 0.1 * rng.standard_normal(a.shape)
            ref = metrics.structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                                use_sample_covariance=False)
            # the reference averages over the valid interior only
            assert mssim(a, b) == pytest.approx(ref, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (12, 14), elements=st.floats(0, 1)),
           arrays(np.float64, (12, 14), elements=st.floats(0, 1)))
    def test_symmetry_and_bound(self, a, b):
        assert mssim(a, b) == pytest.approx(mssim(b, a), abs=1e-12)
        assert mssim(a, b) <= 1 + 1e-12

    def test_small_region(self):
        with pytest.raises(GeometryError):
            mssim(np.ones((20, 20)), np.ones((20, 20)), Roi(0, 0, 8, 20))


def _vertical_filament(length, contrast=0.3, polarity=-1, shape=(96, 64)):
    h = shape[0]
    fil = Filament(1, (32.0, h - 1.0), (32.0, h - 1.0 - length), 1.5, contrast, polarity)
    smap, _ = render_filaments(shape, [fil])
    return 0.42 * smap, fil


class TestFilamentLength:
    @pytest.mark.parametrize("length", [20.0, 40.0, 55.5])
    @pytest.mark.parametrize("polarity", [-1, 1])
    def test_noiseless(self, length, polarity):
        T, fil = _vertical_filament(length, polarity=polarity)
        spec = FilamentSpec.from_filament(fil)
        assert measure_filament_length(T, spec, background=0.42) == pytest.approx(length, abs=1.0)

    def test_tilted(self):
        fil = Filament(1, (20.0, 95.0), (35.0, 50.0), 1.5, 0.3, -1)
        smap, _ = render_filaments((96, 64), [fil])
        spec = FilamentSpec.from_filament(fil)
        assert measure_filament_length(smap, spec, background=1.0) == pytest.approx(fil.length, abs=1.0)

    def test_zero_contrast(self):
        T, fil = _vertical_filament(40.0, contrast=0.0)
        with pytest.raises(NotFoundError):
            measure_filament_length(T, FilamentSpec.from_filament(fil), background=0.42)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(-0.3, 0.3))
    def test_offset_invariance(self, c):
        T, fil = _vertical_filament(40.0)
        spec = FilamentSpec.from_filament(fil)
        base = measure_filament_length(T, spec, background=0.42)
        assert measure_filament_length(T + c, spec, background=0.42 + c) == pytest.approx(base, abs=1e-9)

    def test_extremum_mode(self):
        T, fil = _vertical_filament(40.0)
        spec = FilamentSpec.from_filament(fil)
        assert measure_filament_length(T, spec, 0.42, mode="extremum") < 40.0

    def test_spec_validation(self):
        with pytest.raises(ParameterError):
            FilamentSpec(1, (0, -1), (0, 0), width=0.5)
        with pytest.raises(ParameterError):
            FilamentSpec(1, (0, -1), (0, 0), polarity="grey")
        assert FilamentSpec(1, (0, -2), (0, 0)).axis == (0.0, -1.0)


class TestRmspe:
    def test_values(self):
        assert rmspe([1, 2, 3], [1, 2, 3]) == 0
        assert rmspe([10], [8]) == pytest.approx(25.0)

    def test_zero_truth(self):
        with pytest.raises(DomainError):
            rmspe([1.0], [0.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0.1, 100), st.floats(0.1, 100)), min_size=1, max_size=8),
           st.floats(0.01, 100))
    def test_scale_invariance(self, pairs, k):
        m, t = np.array(pairs).T
        assert rmspe(k * m, k * t) == pytest.approx(rmspe(m, t), rel=1e-9, abs=1e-9)


def test_roi_from_mask():
    mask = np.zeros((10, 10), dtype=bool)
    mask[3:5, 6:9] = True
    assert roi_from_mask(mask) == Roi(6, 3, 3, 2)
    assert roi_from_mask(mask, pad=4) == Roi(2, 0, 8, 9)
    with pytest.raises(GeometryError):
        roi_from_mask(np.zeros((3, 3), dtype=bool))
