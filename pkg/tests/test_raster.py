from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cloudfusion.raster import (
    BadMagicError, DimensionOverflowError, PatchTriplet, Raster, TileSpec, TruncatedRasterError,
    center_crop, clip_rescale, passes_artifact_screen, read_raster, s1_three_channel, s2_rgb,
    shuffle_unpair, tile, tile_starts, to_bytes, untile, validation_split, write_preview, write_raster,
)


def test_clip_rescale_endpoints():
    r = Raster(np.array([[[-25.0, 0.0]]]))
    np.testing.assert_array_equal(clip_rescale(r, "S1").data, [[[-1.0, 1.0]]])


def test_clip_rescale_midpoints():
    assert clip_rescale(Raster(np.full((1, 1, 1), -12.5)), "S1").data.item() == 0.0
    assert clip_rescale(Raster(np.full((1, 1, 1), 5000.0)), "S2").data.item() == 0.0


def test_clip_rescale_clips():
    assert clip_rescale(Raster(np.full((1, 1, 1), 12000.0)), "S2").data.item() == 1.0
    assert clip_rescale(Raster(np.full((1, 1, 1), -40.0)), "S1").data.item() == -1.0


def test_clip_rescale_unknown_modality():
    with pytest.raises(ValueError):
        clip_rescale(Raster(np.zeros((1, 2, 2))), "Mask")


@given(st.lists(st.floats(-50, 20, allow_nan=False), min_size=2, max_size=30))
def test_clip_rescale_monotone(values):
    v = np.sort(np.array(values))
    out = clip_rescale(Raster(v[None, None]), "S1").data.ravel()
    assert np.all(np.diff(out) >= 0)
    assert out.min() >= -1 and out.max() <= 1


def test_clip_rescale_idempotent_in_raw_units(rng):
    raw = rng.uniform(-40, 10, size=(1, 8, 8))
    once = clip_rescale(Raster(raw), "S1").data.astype(np.float64)
    back = (once + 1) / 2 * 25.0 - 25.0
    twice = clip_rescale(Raster(back), "S1").data
    np.testing.assert_allclose(twice, once, atol=1e-6)


def test_s1_three_channel():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    np.testing.assert_array_equal(s1_three_channel(x, x).data[2], x)
    r = s1_three_channel(np.array([[-10.0]]), np.array([[-20.0]]))
    assert r.data[2, 0, 0] == -15.0


def test_s1_three_channel_random(rng):
    vv = rng.normal(size=(5, 7)).astype(np.float32)
    vh = rng.normal(size=(5, 7)).astype(np.float32)
    r = s1_three_channel(vv, vh)
    expected = np.array([[(a + b) / np.float32(2) for a, b in zip(ra, rb)] for ra, rb in zip(vv, vh)])
    assert np.max(np.abs(r.data[2] - expected)) == 0
    np.testing.assert_array_equal(r.data[0], vv)
    np.testing.assert_array_equal(r.data[1], vh)


def test_s1_three_channel_mismatch():
    with pytest.raises(ValueError):
        s1_three_channel(np.zeros((2, 2)), np.zeros((2, 3)))


def test_s2_rgb_picks_bands_4_3_2():
    data = np.arange(13, dtype=np.float32)[:, None, None] * np.ones((1, 2, 2))
    np.testing.assert_array_equal(s2_rgb(Raster(data)).data[:, 0, 0], [3, 2, 1])


def _starts_by_enumeration(size, patch, stride):
    out = []
    s = 0
    while s + patch <= size:
        out.append(s)
        s += stride
    if out[-1] + patch < size:
        out.append(size - patch)
    return out


@pytest.mark.parametrize("size,starts", [(256, [0]), (384, [0, 128]), (300, [0, 44])])
def test_tile_examples(size, starts):
    scene = Raster(np.zeros((1, size, size)))
    tiles = tile(scene, TileSpec(256, 0.5))
    assert sorted({r for r, _, _ in tiles}) == starts
    assert len(tiles) == len(starts) ** 2
    assert starts == _starts_by_enumeration(size, 256, 128)
    cover = np.zeros((size, size), dtype=int)
    for r, c, t in tiles:
        cover[r:r + t.height, c:c + t.width] += 1
    assert cover.min() >= 1


def test_tile_too_small():
    with pytest.raises(ValueError):
        tile(Raster(np.zeros((1, 100, 300))), TileSpec(256, 0.5))


def test_tile_spec_validation():
    with pytest.raises(ValueError):
        TileSpec(0)
    with pytest.raises(ValueError):
        TileSpec(16, 1.0)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(4, 40), w=st.integers(4, 40), patch=st.integers(1, 4),
       overlap=st.sampled_from([0.0, 0.25, 0.5, 0.75]), seed=st.integers(0, 1000))
def test_untile_reconstructs(h, w, patch, overlap, seed):
    data = np.random.default_rng(seed).normal(size=(2, h, w)).astype(np.float32)
    scene = Raster(data)
    back = untile(tile(scene, TileSpec(patch, overlap)), h, w)
    np.testing.assert_array_equal(back.data, data)


def test_tile_starts_helper():
    assert tile_starts(10, 4, 3) == [0, 3, 6]
    assert tile_starts(11, 4, 3) == [0, 3, 6, 7]


def test_center_crop_offsets():
    data = np.arange(256 * 256, dtype=np.float32).reshape(1, 256, 256)
    np.testing.assert_array_equal(center_crop(Raster(data), 200).data, data[:, 28:228, 28:228])
    odd = np.arange(255 * 255, dtype=np.float32).reshape(1, 255, 255)
    np.testing.assert_array_equal(center_crop(Raster(odd), 200).data, odd[:, 27:227, 27:227])
    np.testing.assert_array_equal(center_crop(Raster(data), 256).data, data)
    with pytest.raises(ValueError):
        center_crop(Raster(data), 257)


def _triplets(n):
    out = []
    for i in range(n):
        r = Raster(np.full((3, 2, 2), float(i)))
        out.append(PatchTriplet(r, r, Raster(np.full((3, 2, 2), 100.0 + i)), roi_id=str(i)))
    return out


def test_shuffle_deterministic_and_multiset():
    ts = _triplets(9)
    a = shuffle_unpair(ts, seed=3)
    b = shuffle_unpair(ts, seed=3)
    va = [t.s2_cloudfree.data[0, 0, 0] for t in a]
    assert va == [t.s2_cloudfree.data[0, 0, 0] for t in b]
    assert sorted(va) == [100.0 + i for i in range(9)]
    # cloudy and S1 stay in place
    assert [t.roi_id for t in a] == [str(i) for i in range(9)]


def test_shuffle_matches_fisher_yates_oracle():
    # Durstenfeld shuffle coded from scratch, drawing from the same generator stream
    seed, n = 11, 5
    gen = np.random.default_rng(seed)
    idx = list(range(n))
    for i in range(n - 1, 0, -1):
        j = int(gen.integers(0, i + 1))
        idx[i], idx[j] = idx[j], idx[i]
    got = [int(t.s2_cloudfree.data[0, 0, 0] - 100) for t in shuffle_unpair(_triplets(n), seed=seed)]
    assert got == idx


def test_shuffle_empty():
    with pytest.raises(ValueError):
        shuffle_unpair([])


def test_triplet_invariants():
    a = Raster(np.zeros((3, 4, 4)))
    with pytest.raises(ValueError):
        PatchTriplet(a, a, Raster(np.zeros((3, 4, 5))))
    with pytest.raises(ValueError):
        PatchTriplet(a, a, a, split="val")


def test_artifact_screen_and_split():
    assert passes_artifact_screen(Raster(np.arange(4.0).reshape(1, 2, 2)))
    assert not passes_artifact_screen(Raster(np.ones((1, 2, 2))))
    assert not passes_artifact_screen(Raster(np.array([[[np.nan, 1.0]]])))
    train, val = validation_split(list(range(100)))
    assert val == [95, 96, 97, 98, 99] and train == list(range(95))


def test_raster_roundtrip(tmp_path, rng):
    r = Raster(rng.normal(size=(3, 5, 7)).astype(np.float32))
    p = tmp_path / "a.sr12"
    write_raster(r, p)
    back = read_raster(p)
    assert back.data.tobytes() == r.data.tobytes()
    assert p.stat().st_size == 20 + 4 * 3 * 5 * 7


def test_raster_header_layout(tmp_path):
    p = tmp_path / "h.sr12"
    write_raster(Raster(np.zeros((2, 3, 4))), p)
    head = p.read_bytes()[:20]
    assert head == b"SR12" + bytes([1, 1, 0, 0]) + (2).to_bytes(4, "little") + (3).to_bytes(4, "little") \
        + (4).to_bytes(4, "little")


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.sr12"
    write_raster(Raster(np.zeros((1, 2, 2))), p)
    p.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(BadMagicError):
        read_raster(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "short.sr12"
    write_raster(Raster(np.zeros((3, 256, 256))), p)
    p.write_bytes(p.read_bytes()[:-100])
    with pytest.raises(TruncatedRasterError) as exc:
        read_raster(p)
    assert exc.value.expected == 3 * 256 * 256 * 4
    assert exc.value.actual == 3 * 256 * 256 * 4 - 100
    assert str(3 * 256 * 256 * 4) in str(exc.value)


def test_dimension_overflow(tmp_path):
    p = tmp_path / "big.sr12"
    header = b"SR12" + bytes([1, 1, 0, 0]) + (1).to_bytes(4, "little") + (1 << 30).to_bytes(4, "little") \
        + (1).to_bytes(4, "little")
    p.write_bytes(header)
    with pytest.raises(DimensionOverflowError):
        read_raster(p)


def test_to_bytes_rounds_half_up():
    np.testing.assert_array_equal(to_bytes(np.array([-1.0, 0.0, 0.5, 1.0])), [0, 128, 191, 255])


def test_previews_match_golden(tmp_path):
    golden = Path(__file__).parent / "golden"
    write_preview(Raster(np.array([[[-1.0, 0.0], [0.5, 1.0]]])), tmp_path / "g.pgm")
    assert (tmp_path / "g.pgm").read_bytes() == (golden / "gray_2x2.pgm").read_bytes()
    rgb = np.array([[[-1.0, 0.5]], [[1.0, -0.5]], [[0.0, 0.2]]])
    write_preview(Raster(rgb), tmp_path / "c.ppm")
    assert (tmp_path / "c.ppm").read_bytes() == (golden / "rgb_2x1.ppm").read_bytes()
    with pytest.raises(ValueError):
        write_preview(Raster(np.zeros((2, 2, 2))), tmp_path / "x.pgm")
