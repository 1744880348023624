"""Netpbm codec, CATW checkpoints and the synthetic scene generator."""

import filecmp
import os
import struct

import numpy as np
import pytest

from catcd import netpbm
from catcd.checkpoint import (
    CheckpointError,
    CheckpointMismatch,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_model_state,
    model_state,
    save_checkpoint,
)
from catcd.model import CATChangeDetector, ModelConfig
from catcd.synthetic import (
    MAX_FRACTION,
    MIN_FRACTION,
    SceneSpec,
    Shape,
    generate_dataset,
    generate_pair,
    load_split,
    read_manifest,
    render_pair,
    scene_background,
)

TINY = dict(image_size=32, channels=(8, 8, 8), encoder_blocks=(1, 1, 1), heads=(2, 2, 2))


def tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(tree_equal(os.path.join(a, d), os.path.join(b, d)) for d in cmp.common_dirs)


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------

def test_black_p6_is_zero(tmp_path):
    path = tmp_path / "black.ppm"
    path.write_bytes(b"P6 4 2 255\n" + bytes(24))
    img = netpbm.load_image(path)
    assert img.shape == (2, 4, 3) and not img.any()


def test_header_with_comment_parses():
    buf = b"P6\n# made by hand\n64 64\n255\n" + bytes(64 * 64 * 3)
    assert netpbm.decode(buf).shape == (64, 64, 3)
    assert netpbm.decode(b"P6 64 64 255\n" + bytes(64 * 64 * 3)).shape == (64, 64, 3)


def test_round_trip_quantization(tmp_path):
    img = np.random.default_rng(0).random((9, 7, 3))
    netpbm.save_image(img, tmp_path / "a.ppm")
    back = netpbm.load_image(tmp_path / "a.ppm")
    assert np.abs(back - img).max() <= 1 / 255


def test_save_load_save_is_idempotent(tmp_path):
    img = np.random.default_rng(1).random((5, 6))
    netpbm.save_image(img, tmp_path / "a.pgm")
    netpbm.save_image(netpbm.load_image(tmp_path / "a.pgm"), tmp_path / "b.pgm")
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()


def test_labels_stored_as_0_255(tmp_path):
    lab = np.array([[0, 1], [1, 0]], np.uint8)
    netpbm.save_label(lab, tmp_path / "l.pgm")
    assert set(netpbm.read_raw(tmp_path / "l.pgm").ravel()) == {0, 255}
    np.testing.assert_array_equal(netpbm.load_label(tmp_path / "l.pgm"), lab)


@pytest.mark.parametrize("buf,msg", [
    (b"P3 1 1 255\n0 0 0", "magic"),
    (b"P6 2 2 65535\n" + bytes(24), "maxval"),
    (b"P6 2 2 255\n" + bytes(5), "truncated"),
    (b"P6 2 x 255\n", "header"),
])
def test_bad_netpbm(buf, msg):
    with pytest.raises(netpbm.FormatError, match=msg):
        netpbm.decode(buf)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("value", [np.array(1.5, np.float32), np.array([1.5], np.float32)], ids=["0d", "1d"])
def test_scalar_checkpoint_is_25_bytes(value):
    buf = encode_checkpoint({"a": value})
    assert len(buf) == 4 + 4 + 4 + 2 + 1 + 1 + 1 + 4 + 4
    assert buf[:4] == b"CATW" and struct.unpack("<I", buf[4:8]) == (1,)
    tensors, opt = decode_checkpoint(buf)
    assert tensors["a"].shape == (1,) and tensors["a"][0] == 1.5 and opt is None


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = CATChangeDetector(ModelConfig(**TINY), seed=1)
    state = model_state(model)
    opt = {"opt.step": np.array([3.0], np.float32), "opt.m.x": np.arange(4, dtype=np.float32)}
    save_checkpoint(tmp_path / "m.catw", state, opt)
    tensors, opt_back = load_checkpoint(tmp_path / "m.catw")
    assert list(tensors) == list(state)
    for k in state:
        assert tensors[k].tobytes() == np.asarray(state[k], np.float32).tobytes()
    assert opt_back["opt.m.x"].tobytes() == opt["opt.m.x"].tobytes()
    save_checkpoint(tmp_path / "m2.catw", tensors, opt_back)
    assert (tmp_path / "m.catw").read_bytes() == (tmp_path / "m2.catw").read_bytes()


def test_load_model_state_restores_outputs(tmp_path):
    from catcd.autograd import Tensor, no_grad

    a = CATChangeDetector(ModelConfig(**TINY), seed=1)
    a.encoder.stem_bn.state.running_mean[:] = 0.25
    b = CATChangeDetector(ModelConfig(**TINY), seed=2)
    save_checkpoint(tmp_path / "a.catw", model_state(a))
    load_model_state(b, load_checkpoint(tmp_path / "a.catw")[0])
    x = Tensor(np.random.default_rng(3).random((1, 3, 32, 32)).astype(np.float32))
    a.eval(), b.eval()
    with no_grad():
        assert a(x, x)[0].data.tobytes() == b(x, x)[0].data.tobytes()


def test_buffers_keep_model_dtype():
    m64 = CATChangeDetector(ModelConfig(**TINY), seed=0, dtype=np.float64)
    load_model_state(m64, {k: np.asarray(v, np.float32) for k, v in model_state(m64).items()})
    assert m64.encoder.stem_bn.state.running_var.dtype == np.float64


def test_mismatch_lists_shapes():
    small = CATChangeDetector(ModelConfig(**TINY), seed=0)
    other = CATChangeDetector(ModelConfig(image_size=32, channels=(8, 16, 16), encoder_blocks=(1, 1, 1), heads=(2, 2, 2)))
    before = {k: v.copy() for k, v in model_state(small).items()}
    with pytest.raises(CheckpointMismatch) as exc:
        load_model_state(small, model_state(other))
    assert "expected" in str(exc.value) and "found" in str(exc.value)
    for k, v in model_state(small).items():
        assert v.tobytes() == before[k].tobytes()  # nothing was touched


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b + b"\x00", "truncated|trailing"),
])
def test_corrupt_checkpoint(mutate, msg):
    buf = encode_checkpoint({"w": np.ones((2, 3), np.float32)}, {"opt.step": np.ones(1, np.float32)})
    with pytest.raises(CheckpointError, match=msg):
        decode_checkpoint(mutate(buf))


def test_optimizer_names_must_be_prefixed():
    with pytest.raises(CheckpointError, match="opt."):
        encode_checkpoint({"w": np.ones(1)}, {"m.w": np.ones(1)})


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def test_zero_shapes_gives_empty_label():
    spec = SceneSpec(min_shapes=0, max_shapes=0)
    t1, t2, label = generate_pair(spec, 0)
    assert not label.any()
    assert np.abs(t2 - t1).max() > 0  # distractors still act on t2


def test_one_rectangle_is_64_pixels():
    spec = SceneSpec(noise=0.0, brightness=0.0, drift=0.0)
    rng = np.random.default_rng(0)
    bg = scene_background(rng, spec)
    rect = Shape("rect", 10, 20, 8, 8, (1.0, 0.0, 0.0), added=True)
    t1, t2, label = render_pair(rng, spec, [rect], bg)
    assert label.sum() == 64
    np.testing.assert_array_equal(t2[10:18, 20:28], np.broadcast_to([1.0, 0.0, 0.0], (8, 8, 3)))
    np.testing.assert_array_equal(t1, np.clip(bg, 0, 1))


def test_pairs_are_order_independent():
    spec = SceneSpec(seed=3)
    a = generate_pair(spec, 5, "val")
    generate_pair(spec, 0, "val")
    b = generate_pair(spec, 5, "val")
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()
    c = generate_pair(spec, 5, "train")
    assert c[0].tobytes() != a[0].tobytes()


def test_change_fraction_within_bounds():
    spec = SceneSpec(seed=11)
    for i in range(60):
        frac = generate_pair(spec, i)[2].mean()
        assert MIN_FRACTION <= frac <= MAX_FRACTION


def test_dataset_is_deterministic(tmp_path):
    spec = SceneSpec(seed=7, size=32, max_extent=12)
    generate_dataset(spec, 6, 3, tmp_path / "a")
    generate_dataset(spec, 6, 3, tmp_path / "b")
    assert tree_equal(tmp_path / "a", tmp_path / "b")
    t1, t2, labels = load_split(tmp_path / "a" / "train.txt")
    assert t1.shape == (6, 3, 32, 32) and t1.dtype == np.float32 and labels.shape == (6, 32, 32)


def test_empty_split_manifest(tmp_path):
    generate_dataset(SceneSpec(size=32, max_extent=12), 0, 2, tmp_path)
    assert (tmp_path / "train.txt").read_text() == ""
    assert read_manifest(tmp_path / "train.txt") == []
    assert len(read_manifest(tmp_path / "val.txt")) == 2


def test_spec_validation():
    with pytest.raises(ValueError, match="brightness"):
        SceneSpec(brightness=0.5).validate()
    with pytest.raises(ValueError, match="unknown"):
        SceneSpec.from_mapping({"colour": "1"})
    assert SceneSpec.from_mapping({"size": "32", "noise": "0.01"}).noise == 0.01


def test_bad_manifest_line(tmp_path):
    (tmp_path / "m.txt").write_text("a.ppm\tb.ppm\n")
    with pytest.raises(ValueError, match="3 tab-separated"):
        read_manifest(tmp_path / "m.txt")
