import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from sider.data import (DatasetManifest, ImageSample, SyntheticFaceSpec, assign_splits, load_dataset, load_image,
                        quantize, render_face, save_image, synth_faces)


def test_image_sample_validates_range_and_freezes():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        ImageSample(np.full((4, 4, 3), 1.5), 0)
    with pytest.raises(ValueError, match="HxWx3"):
        ImageSample(np.zeros((4, 4)), 0)
    s = ImageSample(np.zeros((4, 4, 3)), 0)
    with pytest.raises(ValueError):
        s.pixels[0, 0, 0] = 1.0


def test_single_identity_rejected():
    with pytest.raises(ValueError, match="≥2 identities"):
        synth_faces(1, 3, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 200), st.integers(0, 10_000))
def test_splits_identity_disjoint_and_nonempty(n, seed):
    split = assign_splits(range(n), seed)
    assert set(split) == set(range(n))
    assert set(split.values()) <= {"train", "val", "test"}
    assert "train" in split.values() and "test" in split.values()


def test_synthetic_is_deterministic_and_split_by_identity():
    a = synth_faces(12, 3, seed=5, resolution=32)
    b = synth_faces(12, 3, seed=5, resolution=32)
    assert a.data_hash() == b.data_hash()
    assert a.data_hash() != synth_faces(12, 3, seed=6, resolution=32).data_hash()
    for split in ("train", "test"):
        ids = {s.identity_id for s in a.subset(split)}
        assert ids and all(a.split[i] == split for i in ids)
    x, y = a.arrays("train")
    assert x.shape[1:] == (3, 32, 32) and x.dtype == np.float32 and len(x) == len(y)


def test_render_is_pure_and_in_range():
    spec = SyntheticFaceSpec(tuple(np.linspace(0.1, 0.9, 12)), seed=3)
    img = render_face(spec, 48)
    assert img.shape == (48, 48, 3) and img.min() >= 0 and img.max() <= 1
    np.testing.assert_array_equal(img, render_face(spec, 48))


def test_same_identity_closer_than_different():
    m = synth_faces(20, 4, 0, resolution=32, pose_jitter=0.3)
    x, y = m.arrays()
    flat = x.reshape(len(x), -1)
    d = ((flat[:, None] - flat[None]) ** 2).mean(-1)
    same = y[:, None] == y[None]
    off = ~np.eye(len(y), dtype=bool)
    assert d[same & off].mean() < d[~same].mean()


def test_manifest_json_roundtrip():
    m = synth_faces(5, 2, 1, resolution=16)
    back = DatasetManifest.from_json(m.to_json())
    assert back.data_hash() == m.data_hash()
    assert back.split == m.split


def test_load_dataset_directory(tmp_path):
    rng = np.random.default_rng(0)
    for ident in ("alice", "bob"):
        d = tmp_path / ident
        d.mkdir()
        for j in range(2):
            save_image(rng.random((40, 30, 3)), d / f"{j}.png")
    (tmp_path / "bob" / "broken.png").write_bytes(b"not a png")
    m = load_dataset(tmp_path, resolution=16)
    assert m.identity_count == 2 and m.skipped == 1
    assert all(s.pixels.shape == (16, 16, 3) for s in m.samples)


def test_load_dataset_errors(tmp_path):
    with pytest.raises(ValueError, match="no data"):
        load_dataset(tmp_path / "missing")
    with pytest.raises(ValueError, match="no data"):
        load_dataset(tmp_path)


def test_png_roundtrip_is_quantization(tmp_path):
    img = np.random.default_rng(2).random((8, 8, 3)).astype(np.float32)
    save_image(img, tmp_path / "a.png")
    np.testing.assert_array_equal(load_image(tmp_path / "a.png"), quantize(img))
