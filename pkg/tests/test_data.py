import filecmp

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rgbd_vsod import pnm
from rgbd_vsod.data import (ClipCache, ClipSampler, SceneSpec, batch_clips, flip_clip, generate_sequence,
                            generate_suite, load_clip, normalize_depth, pseudo_depth, read_manifest,
                            render_sequence)


def centroid_x(mask):
    return np.nonzero(mask)[1].mean()


def test_zero_velocity_keeps_masks_identical():
    _, _, gt = render_sequence(SceneSpec(velocity=(0.0, 0.0)), 5, 64, 0)
    assert all(np.array_equal(gt[0], g) for g in gt[1:])


def test_trajectory_arithmetic():
    _, _, gt = render_sequence(SceneSpec(shape="square", start=(10.0, 20.0), velocity=(2.0, 0.0)), 2, 64, 0)
    assert np.nonzero(gt[0])[1].min() == 10
    assert centroid_x(gt[1]) - centroid_x(gt[0]) == pytest.approx(2.0)


def test_object_is_nearest_and_render_errors():
    rgb, depth, gt = render_sequence(SceneSpec(distractors=2), 3, 64, 1)
    assert depth[gt > 0].mean() > depth[gt == 0].max() - 10
    assert rgb.dtype == np.uint8 and rgb.shape == (3, 64, 64, 3)
    with pytest.raises(ValueError):
        render_sequence(SceneSpec(), 3, 50, 0)
    with pytest.raises(ValueError):
        SceneSpec(shape="triangle")
    with pytest.raises(ValueError):
        SceneSpec(object_depth=0.5, background_depth=(0.3, 0.45))


def test_same_seed_gives_identical_files(tmp_path):
    a = generate_sequence(SceneSpec(velocity=(1, 1), jitter=0.5), tmp_path / "a", "s", 4, 64, 9)
    b = generate_sequence(SceneSpec(velocity=(1, 1), jitter=0.5), tmp_path / "b", "s", 4, 64, 9)
    for sub, ext in (("rgb", "ppm"), ("depth", "pgm"), ("gt", "pgm")):
        for t in range(4):
            assert filecmp.cmp(a / sub / f"{t:04d}.{ext}", b / sub / f"{t:04d}.{ext}", shallow=False)


def test_load_clip_roundtrip_and_ranges(tmp_path):
    spec = SceneSpec(velocity=(1.5, -0.5))
    _, _, gt = render_sequence(spec, 4, 64, 3)
    generate_sequence(spec, tmp_path, "s", 4, 64, 3)
    clip = load_clip(tmp_path, "s", 1, 3)
    assert clip.rgb.shape == (3, 3, 64, 64) and clip.gt.shape == (3, 1, 64, 64) and len(clip) == 3
    np.testing.assert_array_equal(clip.gt[:, 0], gt[1:] / 255)
    assert np.array_equal(clip.depth[:, 0], clip.depth[:, 1]) and np.array_equal(clip.depth[:, 1], clip.depth[:, 2])
    for arr in (clip.rgb, clip.depth, clip.gt):
        assert arr.min() >= 0 and arr.max() <= 1
    assert set(np.unique(clip.gt)) <= {0.0, 1.0}
    small = load_clip(tmp_path, "s", 0, 2, size=32)
    assert small.rgb.shape == (2, 3, 32, 32) and set(np.unique(small.gt)) <= {0.0, 1.0}


def test_constant_depth_normalizes_to_zero(tmp_path):
    generate_sequence(SceneSpec(), tmp_path, "s", 1, 64, 0)
    pnm.write(tmp_path / "s" / "depth" / "0000.pgm", np.full((64, 64), 77, dtype=np.uint8))
    clip = load_clip(tmp_path, "s", 0, 1)
    assert np.all(clip.depth == 0)
    assert np.all(normalize_depth(np.full((3, 3), 2.0)) == 0)


def test_load_errors(tmp_path):
    generate_sequence(SceneSpec(), tmp_path, "s", 2, 64, 0)
    with pytest.raises(FileNotFoundError, match="0004.ppm"):
        load_clip(tmp_path, "s", 4, 2)
    (tmp_path / "s" / "gt" / "0001.pgm").write_bytes(b"P5\n64 64\n255\n\x00\x00")
    with pytest.raises(pnm.PnmFormatError, match="0001.pgm"):
        load_clip(tmp_path, "s", 0, 2)


@given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 3]))))
def test_pnm_roundtrip(img):
    img = img[..., 0] if img.shape[-1] == 1 else img
    assert np.array_equal(pnm.decode(pnm.encode(img)), img)


def test_pnm_header_comments_and_errors():
    assert pnm.decode(b"P5 # c\n2 1\n255\n\x01\x02").tolist() == [[1, 2]]
    for bad in (b"P4\n1 1\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00", b"P5\n2 2\n255\n\x00", b"P5\n2"):
        with pytest.raises(pnm.PnmFormatError):
            pnm.decode(bad)


def test_pseudo_depth_modes(tmp_path):
    generate_sequence(SceneSpec(), tmp_path, "s", 2, 64, 0)
    clip = load_clip(tmp_path, "s", 0, 2)
    assert np.all(pseudo_depth(clip, "black").depth == 0)
    copy = pseudo_depth(clip, "copy").depth
    luma = 0.299 * clip.rgb[:, 0] + 0.587 * clip.rgb[:, 1] + 0.114 * clip.rgb[:, 2]
    for c in range(3):
        np.testing.assert_allclose(copy[:, c], luma, atol=1e-6)
    with pytest.raises(ValueError):
        pseudo_depth(clip, "actual")
    cache = ClipCache(tmp_path, 2, depth_mode="black")
    assert cache.get("s", 0) is cache.get("s", 0) and np.all(cache.get("s", 0).depth == 0)


def test_flip_and_batch(tmp_path):
    generate_sequence(SceneSpec(), tmp_path, "s", 3, 64, 0)
    clip = load_clip(tmp_path, "s", 0, 3)
    np.testing.assert_array_equal(flip_clip(flip_clip(clip)).rgb, clip.rgb)
    b = batch_clips([clip, flip_clip(clip)])
    assert b.rgb.shape == (2, 3, 3, 64, 64) and b.sequence == ["s", "s"]


@given(st.dictionaries(st.sampled_from("abcde"), st.integers(1, 9), min_size=1), st.integers(1, 4),
       st.integers(0, 100))
def test_sampler_covers_each_window_once_per_epoch(lengths, T, seed):
    valid = [(n, s) for n, L in lengths.items() for s in range(L - T + 1)]
    if not valid:
        with pytest.raises(ValueError):
            ClipSampler(lengths, T, seed)
        return
    sampler = ClipSampler(lengths, T, seed)
    n = len(sampler)
    for epoch in range(2):
        order = [sampler.window(epoch * n + i) for i in range(n)]
        assert sorted(order) == sorted(valid)
        assert order == sampler.epoch_order(epoch)
    assert ClipSampler(lengths, T, seed).batch(3, 2) == sampler.batch(3, 2)


def test_suite_and_manifest(tmp_path):
    names = generate_suite(tmp_path, 3, 5, 64, seed=2, prefix="v")
    assert names == ["v000", "v001", "v002"]
    assert read_manifest(tmp_path) == {n: 5 for n in names}
    (tmp_path / "manifest.txt").unlink()
    assert read_manifest(tmp_path) == {n: 5 for n in names}
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "missing")
