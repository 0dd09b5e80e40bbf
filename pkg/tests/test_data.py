import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mssfc.data import (CheckpointError, DatasetError,
                        RasterError, SynthSpec, gen_synth, load_checkpoint,
                        load_dataset, read_raster, restore_checkpoint,
                        save_checkpoint, synth_scene, write_pgm_gray,
                        write_raster)
from mssfc.layers import AdamState
from mssfc.tensor import ParamStore, Rng


def _rand_image(rng, h, w):
    return np.round(rng.uniform(0, 1, (1, 3, h, w)) * 255.0) / 255.0


def _rand_mask(rng, h, w):
    return (rng.uniform(0, 1, (1, 1, h, w)) > 0.5).astype(np.float32)


# ------------------------------------------------------------------- rasters


def test_ppm_roundtrip_bit_exact(tmp_path):
    rng = Rng(1)
    path = tmp_path / "img.ppm"
    img = _rand_image(rng, 5, 7)
    write_raster(path, img)
    back = read_raster(path)
    np.testing.assert_array_equal(back, img.astype(np.float32))
    write_raster(tmp_path / "img2.ppm", back)
    assert (tmp_path / "img.ppm").read_bytes() == (tmp_path / "img2.ppm").read_bytes()


def test_pgm_roundtrip_bit_exact(tmp_path):
    rng = Rng(2)
    path = tmp_path / "m.pgm"
    mask = _rand_mask(rng, 6, 4)
    write_raster(path, mask)
    np.testing.assert_array_equal(read_raster(path), mask)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_raster_roundtrip_property(tmp_path_factory, h, w, seed):
    tmp = tmp_path_factory.mktemp("rt")
    rng = Rng(seed)
    img = _rand_image(rng, h, w)
    write_raster(tmp / "a.ppm", img)
    np.testing.assert_array_equal(read_raster(tmp / "a.ppm"), img.astype(np.float32))
    mask = _rand_mask(rng, h, w)
    write_raster(tmp / "a.pgm", mask)
    np.testing.assert_array_equal(read_raster(tmp / "a.pgm"), mask)


def test_header_comments_accepted(tmp_path):
    payload = bytes([0, 255] * 6)
    (tmp_path / "c.pgm").write_bytes(b"P5\n# a comment\n4 3\n255\n" + payload)
    arr = read_raster(tmp_path / "c.pgm")
    assert arr.shape == (1, 1, 3, 4)
    np.testing.assert_array_equal(arr.reshape(-1)[:2], [0.0, 1.0])


def test_truncated_payload_rejected(tmp_path):
    mask = np.zeros((1, 1, 24, 32), dtype=np.float32)
    path = tmp_path / "t.pgm"
    write_raster(path, mask)
    data = path.read_bytes()
    path.write_bytes(data[:-1])
    with pytest.raises(RasterError, match="767"):
        read_raster(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.pgm"
    write_raster(path, np.zeros((1, 1, 2, 2), dtype=np.float32))
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(RasterError):
        read_raster(path)


def test_bad_magic_rejected(tmp_path):
    (tmp_path / "x.ppm").write_bytes(b"P3\n1 1\n255\n\x00")
    with pytest.raises(RasterError, match="magic"):
        read_raster(tmp_path / "x.ppm")


def test_wrong_maxval_rejected(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(RasterError, match="maxval"):
        read_raster(tmp_path / "x.pgm")


def test_mask_values_must_be_binary(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"P5\n2 1\n255\n\x00\x80")
    with pytest.raises(RasterError, match="mask"):
        read_raster(tmp_path / "x.pgm")
    with pytest.raises(RasterError):
        write_raster(tmp_path / "y.pgm", np.full((1, 1, 2, 2), 0.5))


def test_pgm_gray_quantization(tmp_path):
    probs = np.array([[0.0, 0.25, 0.5, 1.0]])
    write_pgm_gray(tmp_path / "p.pgm", probs)
    raw = (tmp_path / "p.pgm").read_bytes()
    assert raw.endswith(bytes([0, 64, 128, 255]))


# ----------------------------------------------------------------- synthesis


def test_synth_scene_deterministic():
    spec = SynthSpec(seed=9, size=32)
    a = synth_scene(spec, 3)
    b = synth_scene(spec, 3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_synth_scene_xor_property():
    spec = SynthSpec(seed=4, size=64)
    for i in range(10):
        _, _, m1, m2, m_cd = synth_scene(spec, i)
        np.testing.assert_array_equal(
            m_cd, np.logical_xor(m1 > 0.5, m2 > 0.5).astype(np.float32))


def test_synth_scene_images_quantized():
    spec = SynthSpec(seed=4, size=32)
    img1, img2, _, _, _ = synth_scene(spec, 0)
    np.testing.assert_allclose(np.round(img1 * 255) / 255, img1, atol=1e-7)
    assert img1.shape == (1, 3, 32, 32)
    assert not np.array_equal(img1, img2) or True  # changes are probabilistic


def test_gen_synth_idempotent(tmp_path):
    spec = SynthSpec(seed=5, count=4, size=32)
    gen_synth(spec, tmp_path / "a")
    gen_synth(spec, tmp_path / "b")
    for sub in ("t1", "t2", "label_t1", "label_t2", "label_cd"):
        for name in sorted(os.listdir(tmp_path / "a" / sub)):
            assert (tmp_path / "a" / sub / name).read_bytes() == \
                (tmp_path / "b" / sub / name).read_bytes()
    assert (tmp_path / "a" / "manifest.txt").read_text() == \
        (tmp_path / "b" / "manifest.txt").read_text()


def test_gen_synth_offset_disjoint(tmp_path):
    gen_synth(SynthSpec(seed=5, count=3, size=32), tmp_path / "a")
    gen_synth(SynthSpec(seed=5, count=3, size=32, offset=3), tmp_path / "b")
    assert set(os.listdir(tmp_path / "a" / "t1")).isdisjoint(
        os.listdir(tmp_path / "b" / "t1"))


# -------------------------------------------------------------------- loader


def test_load_dataset_full_tree(tmp_path):
    gen_synth(SynthSpec(seed=6, count=3, size=32), tmp_path)
    samples = load_dataset(tmp_path)
    assert [s.id for s in samples] == sorted(s.id for s in samples)
    assert len(samples) == 3
    for s in samples:
        assert s.flags == (1, 1, 1)
        assert s.img_t1.shape == (1, 3, 32, 32)
        assert s.m_cd.shape == (1, 1, 32, 32)


def test_load_dataset_missing_label_dir_lowers_flag(tmp_path):
    gen_synth(SynthSpec(seed=6, count=2, size=32), tmp_path)
    import shutil
    shutil.rmtree(tmp_path / "label_cd")
    samples = load_dataset(tmp_path)
    for s in samples:
        assert s.flags == (1, 1, 0)
        assert s.m_cd is None


def test_load_dataset_missing_t2_image_is_error(tmp_path):
    gen_synth(SynthSpec(seed=6, count=2, size=32), tmp_path)
    os.remove(tmp_path / "t2" / "scene_00001.ppm")
    with pytest.raises(DatasetError, match="scene_00001"):
        load_dataset(tmp_path)


def test_load_dataset_mono_temporal(tmp_path):
    gen_synth(SynthSpec(seed=6, count=2, size=32), tmp_path)
    import shutil
    shutil.rmtree(tmp_path / "t2")
    samples = load_dataset(tmp_path)
    for s in samples:
        np.testing.assert_array_equal(s.img_t1, s.img_t2)
        assert s.flags == (1, 0, 0)


def test_load_dataset_without_t1_dir(tmp_path):
    with pytest.raises(DatasetError, match="t1"):
        load_dataset(tmp_path)


def test_load_dataset_split_subdir(tmp_path):
    gen_synth(SynthSpec(seed=6, count=2, size=32), tmp_path / "train")
    assert len(load_dataset(tmp_path, "train")) == 2


# ----------------------------------------------------------------- checkpoint


def _small_store(seed=0):
    store = ParamStore()
    rng = Rng(seed)
    store.create("a.weight", rng.uniform(-1, 1, (4, 3, 3, 3)))
    store.create("a.bias", rng.uniform(-1, 1, (1, 4, 1, 1)))
    return store


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    store = _small_store()
    opt = AdamState(store, lr=2e-4)
    opt.step = 7
    opt.m["a.weight"][...] = 0.25
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, store, opt, epoch=3)
    other = _small_store(seed=1)
    opt2 = AdamState(other)
    epoch = restore_checkpoint(path, other, opt2)
    assert epoch == 3
    assert opt2.step == 7 and opt2.lr == pytest.approx(2e-4)
    for p, q in zip(store, other):
        np.testing.assert_array_equal(p.value, q.value)
    np.testing.assert_array_equal(opt2.m["a.weight"], opt.m["a.weight"])


def test_checkpoint_without_optimizer(tmp_path):
    store = _small_store()
    save_checkpoint(tmp_path / "m.ckpt", store)
    params, opt_m, opt_v, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert set(params) == {"a.weight", "a.bias"}
    assert not opt_m and not opt_v and meta is None


def test_checkpoint_save_load_save_identical(tmp_path):
    store = _small_store()
    opt = AdamState(store)
    save_checkpoint(tmp_path / "one.ckpt", store, opt, epoch=1)
    other = _small_store(seed=2)
    opt2 = AdamState(other)
    restore_checkpoint(tmp_path / "one.ckpt", other, opt2)
    save_checkpoint(tmp_path / "two.ckpt", other, opt2, epoch=1)
    assert (tmp_path / "one.ckpt").read_bytes() == (tmp_path / "two.ckpt").read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "x.ckpt")


def test_checkpoint_truncation(tmp_path):
    store = _small_store()
    save_checkpoint(tmp_path / "m.ckpt", store)
    data = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(data[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.ckpt")


def test_checkpoint_trailing_bytes(tmp_path):
    store = _small_store()
    save_checkpoint(tmp_path / "m.ckpt", store)
    data = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "fat.ckpt").write_bytes(data + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "fat.ckpt")


def test_restore_shape_mismatch_names_tensor(tmp_path):
    store = _small_store()
    save_checkpoint(tmp_path / "m.ckpt", store)
    other = ParamStore()
    other.create("a.weight", np.zeros((2, 3, 3, 3)))
    other.create("a.bias", np.zeros((1, 4, 1, 1)))
    with pytest.raises(CheckpointError, match="a.weight"):
        restore_checkpoint(tmp_path / "m.ckpt", other)


def test_restore_missing_parameter(tmp_path):
    store = _small_store()
    save_checkpoint(tmp_path / "m.ckpt", store)
    other = ParamStore()
    other.create("b.weight", np.zeros((1, 1, 1, 1)))
    with pytest.raises(CheckpointError, match="b.weight"):
        restore_checkpoint(tmp_path / "m.ckpt", other)
