"""Encoder, dense upsample decoder, classifier head and the assembled detector."""

import numpy as np
import pytest

from catcd import ops
from catcd.autograd import Tensor, default_dtype, no_grad
from catcd.config import PAPER
from catcd.decoder import Classifier, DenseUpsampleDecoder, UpsampleUnit
from catcd.encoder import SiameseEncoder, feature_shapes
from catcd.gradcheck import grad_check, move_off_init
from catcd.model import CATChangeDetector, ModelConfig, to_input

TINY = dict(image_size=32, channels=(8, 8, 8), encoder_blocks=(1, 1, 1), heads=(2, 2, 2))


def test_encoder_is_weight_shared():
    rng = np.random.default_rng(0)
    enc = SiameseEncoder(rng, (8, 16, 32), (1, 1, 1), stem_channels=4).eval()
    img = Tensor(rng.random((1, 3, 32, 32)).astype(np.float32))
    with no_grad():
        f1, f2 = enc.encode_pair(img, img)
    for a, b in zip(f1, f2):
        assert a.data.tobytes() == b.data.tobytes()


def test_encoder_desk_shapes():
    rng = np.random.default_rng(1)
    enc = SiameseEncoder(rng, (32, 64, 128), (2, 2, 2), stem_channels=16)
    with no_grad():
        feats = enc(Tensor(np.zeros((2, 3, 64, 64), np.float32)))
    assert [f.shape for f in feats] == [(2, 32, 16, 16), (2, 64, 8, 8), (2, 128, 4, 4)]


def test_feature_shapes_full_scale():
    assert feature_shapes(256, (96, 192, 384)) == [(96, 64, 64), (192, 32, 32), (384, 16, 16)]


def test_encoder_rejects_bad_size():
    enc = SiameseEncoder(np.random.default_rng(2), (4, 4, 4), (1, 1, 1), stem_channels=4)
    with pytest.raises(ops.ShapeError):
        enc(Tensor(np.zeros((1, 3, 24, 24), np.float32)))


def test_upsample_unit_order():
    rng = np.random.default_rng(3)
    with default_dtype(np.float64):
        unit = UpsampleUnit(rng, 4, 3, 2).eval()
    x = rng.standard_normal((1, 4, 2, 2))
    out = unit(Tensor(x)).data
    # eval BN with (0, 1) stats and unit affine is identity up to 1/sqrt(1 + eps)
    y = ops.gelu(ops.pixel_shuffle(ops.conv2d(Tensor(x), unit.conv.weight, unit.conv.bias), 2)).data
    np.testing.assert_allclose(out, y / np.sqrt(1 + 1e-5), atol=1e-12)
    assert out.shape == (1, 3, 4, 4)


def test_dud_unit_widths():
    dud = DenseUpsampleDecoder(np.random.default_rng(4), (32, 64, 128))
    assert dud.up32.conv.weight.shape == (64 * 4, 128, 1, 1)
    assert dud.up31.conv.weight.shape == (32 * 16, 128, 1, 1)
    assert dud.up21.conv.weight.shape == (32 * 4, 64, 1, 1)


def test_dud_matches_schedule():
    rng = np.random.default_rng(5)
    with default_dtype(np.float64):
        dud = DenseUpsampleDecoder(rng, (4, 6, 8))
    d1, d2, d3 = (rng.standard_normal(s) for s in ((2, 4, 8, 8), (2, 6, 4, 4), (2, 8, 2, 2)))
    with no_grad():
        got = dud(Tensor(d1), Tensor(d2), Tensor(d3)).data
        d2p = d2 + dud.up32(Tensor(d3)).data
        want = d1 + dud.up31(Tensor(d3)).data + dud.up21(Tensor(d2p)).data
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_dud_zero_paths():
    rng = np.random.default_rng(6)
    with default_dtype(np.float64):
        dud = DenseUpsampleDecoder(rng, (4, 6, 8)).eval()
    for p in dud.parameters():
        if p.ndim == 4:
            p.data[:] = 0.0
    for unit in (dud.up32, dud.up31, dud.up21):
        unit.conv.bias.data[:] = 0.0
        unit.bn.bias.data[:] = 0.0
    d1 = rng.standard_normal((1, 4, 8, 8))
    out = dud(Tensor(d1), Tensor(np.zeros((1, 6, 4, 4))), Tensor(np.zeros((1, 8, 2, 2)))).data
    np.testing.assert_array_equal(out, d1)


def test_dud_without_dense_path():
    rng = np.random.default_rng(7)
    with default_dtype(np.float64):
        dud = DenseUpsampleDecoder(rng, (4, 6, 8), dense=False)
    assert dud.up31 is None
    d1, d2, d3 = (rng.standard_normal(s) for s in ((1, 4, 8, 8), (1, 6, 4, 4), (1, 8, 2, 2)))
    with no_grad():
        got = dud(Tensor(d1), Tensor(d2), Tensor(d3)).data
        want = d1 + dud.up21(Tensor(d2 + dud.up32(Tensor(d3)).data)).data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_dud_rejects_bad_ratio():
    dud = DenseUpsampleDecoder(np.random.default_rng(8), (4, 4, 4))
    with pytest.raises(ops.ShapeError, match="ratio"):
        dud(Tensor(np.zeros((1, 4, 8, 8), np.float32)), Tensor(np.zeros((1, 4, 2, 2), np.float32)),
            Tensor(np.zeros((1, 4, 1, 1), np.float32)))


def test_classifier_shapes_and_gradcheck():
    rng = np.random.default_rng(9)
    with default_dtype(np.float64):
        head = Classifier(rng, 32, 16)
    with no_grad():
        assert head(Tensor(np.zeros((1, 32, 16, 16)))).shape == (1, 2, 64, 64)
    head.assign_names()
    move_off_init(head, rng)
    x = Tensor(rng.standard_normal((1, 32, 4, 4)))
    r = Tensor(rng.standard_normal((1, 2, 16, 16)))
    rep = grad_check(lambda: ops.sum(ops.mul(head(x), r)), head.parameters(), max_entries=8)
    assert rep.passed, "\n".join(rep.lines())


def test_full_scale_classifier_output_size():
    # only the head: a full-scale forward is too slow for a unit test
    head = Classifier(np.random.default_rng(10), 96, 48)
    with no_grad():
        assert head(Tensor(np.zeros((1, 96, 64, 64), np.float32))).shape == (1, 2, 256, 256)
    assert PAPER.model_config().image_size == 256


def test_detector_forward_and_names():
    model = CATChangeDetector(ModelConfig(**TINY), seed=0)
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert "cat.s1.b0.cross.Wq" in names and "dud.up31.conv.weight" in names
    x = Tensor(np.random.default_rng(11).random((2, 3, 32, 32)).astype(np.float32))
    with no_grad():
        logits, masks = model(x, x)
    assert logits.shape == (2, 2, 32, 32)
    assert len(masks) == 6
    pred = model.eval().predict(x, x)
    assert pred.shape == (2, 32, 32) and pred.dtype == np.uint8


@pytest.mark.parametrize("flags,masks", [
    (dict(use_cat=False), 0),
    (dict(use_gc_cross=False), 6),
    (dict(use_self_attn=False), 6),
    (dict(use_dud=False), 6),
])
def test_ablation_variants_build(flags, masks):
    model = CATChangeDetector(ModelConfig(**TINY, **flags), seed=0)
    x = Tensor(np.zeros((1, 3, 32, 32), np.float32))
    with no_grad():
        logits, m = model(x, x)
    assert logits.shape == (1, 2, 32, 32) and len(m) == masks


def test_same_seed_same_weights():
    a = CATChangeDetector(ModelConfig(**TINY), seed=3)
    b = CATChangeDetector(ModelConfig(**TINY), seed=3)
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes()


def test_to_input_layout():
    imgs = np.random.default_rng(12).random((2, 4, 5, 3))
    t = to_input(imgs)
    assert t.shape == (2, 3, 4, 5)
    np.testing.assert_array_equal(t.data[1, 2], imgs[1, :, :, 2].astype(np.float32))


def test_model_config_validation():
    with pytest.raises(ValueError, match="heads"):
        ModelConfig(channels=(8, 8, 8), heads=(3, 2, 2))
    with pytest.raises(ValueError, match="16"):
        ModelConfig(image_size=40)
