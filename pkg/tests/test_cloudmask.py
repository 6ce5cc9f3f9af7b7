import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cloudfusion.cloudmask import (
    CoverageStats, baseline_detector, cloud_probability, coverage_percent, coverage_stats, gaussian_kernel,
    refine_mask, stats_from_percents,
)
from cloudfusion.raster import Raster


def _mask(a):
    return Raster(np.asarray(a, dtype=np.float32)[None], "Mask")


def test_dark_patch_gives_zero_mask():
    m = cloud_probability(Raster(np.zeros((13, 4, 4))))
    assert m.bands == 1 and np.all(m.data == 0)


def test_bright_patch_saturates():
    m = cloud_probability(Raster(np.full((13, 4, 4), 10000.0)))
    assert np.all(m.data == 1.0)


def test_plugged_detector_passthrough():
    m = cloud_probability(Raster(np.zeros((13, 3, 5))), detector=lambda b: np.full(b.shape[1:], 0.7))
    np.testing.assert_allclose(m.data, 0.7, rtol=0, atol=1e-7)


def test_baseline_rejects_band_count():
    with pytest.raises(ValueError):
        cloud_probability(Raster(np.zeros((3, 4, 4))))


def test_baseline_formula():
    bands = np.zeros((13, 1, 1))
    bands[[1, 2, 3, 10]] = [[[700.0]], [[700.0]], [[700.0]], [[700.0]]]
    assert baseline_detector(bands)[0, 0] == pytest.approx(0.2)


def test_refine_constant_below_threshold():
    assert np.all(refine_mask(_mask(np.full((16, 16), 0.4))).data == 0)


def test_refine_constant_one():
    np.testing.assert_allclose(refine_mask(_mask(np.ones((16, 16)))).data, 1.0, atol=1e-6)


def _dense_reference(img, sigma=2.0, radius=6):
    # direct 2-D convolution with the outer-product kernel and edge-mirrored indices
    x = np.arange(-radius, radius + 1)
    k1 = np.exp(-0.5 * (x / sigma) ** 2)
    k2 = np.outer(k1, k1) / k1.sum() ** 2
    h, w = img.shape

    def mirror(i, n):
        while i < 0 or i >= n:
            i = -i - 1 if i < 0 else 2 * n - 1 - i
        return i

    out = np.zeros_like(img, dtype=np.float64)
    for r in range(h):
        for c in range(w):
            acc = 0.0
            for u in range(-radius, radius + 1):
                for v in range(-radius, radius + 1):
                    acc += k2[u + radius, v + radius] * img[mirror(r + u, h), mirror(c + v, w)]
            out[r, c] = acc
    return out


def test_refine_single_pixel_matches_dense_oracle():
    img = np.zeros((17, 17))
    img[8, 8] = 1.0
    out = refine_mask(_mask(img)).data[0]
    k = gaussian_kernel()
    assert out[8, 8] == pytest.approx(k[6] * k[6], abs=1e-7)
    np.testing.assert_allclose(out, _dense_reference(img), atol=1e-6)


def test_refine_near_border_matches_dense_oracle(rng):
    img = rng.uniform(size=(9, 11))
    ref = _dense_reference(np.where(img >= 0.5, img, 0.0))
    np.testing.assert_allclose(refine_mask(_mask(img)).data[0], np.clip(ref, 0, 1), atol=1e-6)


def test_kernel_normalized():
    k = gaussian_kernel()
    assert len(k) == 13 and k.sum() == pytest.approx(1.0)


def test_refine_zero_map():
    assert np.all(refine_mask(_mask(np.zeros((8, 8)))).data == 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), r=st.integers(0, 11), c=st.integers(0, 11), bump=st.floats(0.0, 1.0))
def test_refine_monotone(seed, r, c, bump):
    img = np.random.default_rng(seed).uniform(size=(12, 12)).astype(np.float32)
    raised = img.copy()
    raised[r, c] = min(1.0, raised[r, c] + bump)
    lo = refine_mask(_mask(img)).data
    hi = refine_mask(_mask(raised)).data
    assert np.all(hi >= lo - 1e-7)
    assert lo.min() >= 0 and lo.max() <= 1


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), dy=st.integers(-3, 3), dx=st.integers(-3, 3))
def test_refine_translation_equivariant_in_interior(seed, dy, dx):
    n = 48
    img = np.zeros((n, n), dtype=np.float32)
    img[18:30, 18:30] = np.random.default_rng(seed).uniform(size=(12, 12))
    shifted = np.roll(img, (dy, dx), axis=(0, 1))
    a = refine_mask(_mask(img)).data[0]
    b = refine_mask(_mask(shifted)).data[0]
    np.testing.assert_allclose(np.roll(a, (dy, dx), axis=(0, 1))[10:38, 10:38], b[10:38, 10:38], atol=1e-6)


def test_refined_coverage_bounded_by_step(rng):
    img = np.zeros((32, 32), dtype=np.float32)
    img[8:24, 8:24] = rng.uniform(0.5, 1.0, size=(16, 16))
    step = (img >= 0.5).astype(np.float32)
    assert coverage_percent(refine_mask(_mask(img))) <= coverage_percent(_mask(step)) + 1e-6
    for v in (0.0, 0.7, 1.0):
        const = np.full((10, 10), v, dtype=np.float32)
        assert coverage_percent(refine_mask(_mask(const))) == pytest.approx(coverage_percent(_mask(const)), abs=1e-4)


def test_coverage_percent():
    assert coverage_percent(_mask(np.ones((4, 4)))) == 100.0
    half = np.zeros((4, 4))
    half[:2] = 1
    assert coverage_percent(_mask(half)) == 50.0


def test_coverage_percent_pairwise_oracle(rng):
    vals = rng.uniform(size=(33, 17)).astype(np.float32)

    def pairwise(xs):
        if len(xs) == 1:
            return float(xs[0])
        mid = len(xs) // 2
        return pairwise(xs[:mid]) + pairwise(xs[mid:])

    expected = 100.0 * pairwise(list(vals.ravel().astype(np.float64))) / vals.size
    assert coverage_percent(_mask(vals)) == pytest.approx(expected, rel=1e-12)


def test_coverage_stats_examples():
    s = coverage_stats([_mask(np.zeros((2, 2))), _mask(np.ones((2, 2)))])
    assert s.mean_percent == 50.0 and s.std_percent == 50.0
    same = coverage_stats([_mask(np.full((2, 2), 0.3))] * 4)
    assert same.std_percent == 0.0
    assert sum(same.histogram) == 4 and len(same.histogram) == 20


def test_coverage_stats_uniform_moments():
    gen = np.random.default_rng(2024)
    masks = [_mask(np.full((4, 4), c)) for c in gen.uniform(size=1000)]
    s = coverage_stats(masks)
    assert 45 <= s.mean_percent <= 55
    assert 25 <= s.std_percent <= 32
    assert abs(s.std_percent - 100 / math.sqrt(12)) < 3
    assert sum(s.histogram) == 1000 and s.count == 1000


def test_coverage_stats_empty():
    with pytest.raises(ValueError):
        coverage_stats([])


def test_stats_format():
    text = stats_from_percents([47.931, 12.0]).format()
    lines = text.splitlines()
    assert lines[0] == "mean=29.97% std=17.97%"
    assert len(lines) == 21
    assert isinstance(stats_from_percents([100.0]), CoverageStats)
    assert stats_from_percents([100.0]).histogram[-1] == 1
