"""End-to-end change detector: encoder -> IDF -> CAT per scale -> DUD -> classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import CATBlockConfig, CATModule, compute_idf
from .autograd import Parameter, Tensor, default_dtype
from .decoder import Classifier, DenseUpsampleDecoder
from .encoder import SiameseEncoder
from .nn import Module, kaiming_uniform, get_default_dtype

SCALES = ("s1", "s2", "s3")


@dataclass
class ModelConfig:
    image_size: int = 64
    channels: tuple = (32, 64, 128)
    encoder_blocks: tuple = (2, 2, 2)
    heads: tuple = (2, 4, 8)
    window_size: int = 8
    mlp_ratio: int = 4
    cat_blocks: int = 2
    use_cat: bool = True
    use_gc_cross: bool = True
    use_self_attn: bool = True
    use_dud: bool = True
    stem_channels: int = 0  # 0 -> channels[0] // 2
    classifier_channels: int = 0  # 0 -> channels[0] // 2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.encoder_blocks = tuple(int(b) for b in self.encoder_blocks)
        self.heads = tuple(int(h) for h in self.heads)
        for c, h in zip(self.channels, self.heads):
            if c % h:
                raise ValueError(f"channels {c} not divisible by heads {h}")
        if self.image_size % 16:
            raise ValueError(f"image_size {self.image_size} must be divisible by 16")

    @property
    def stem(self):
        return self.stem_channels or max(self.channels[0] // 2, 1)

    @property
    def classifier_hidden(self):
        return self.classifier_channels or max(self.channels[0] // 2, 1)

    def block_config(self, scale_index):
        return CATBlockConfig(
            window_size=self.window_size,
            heads=self.heads[scale_index],
            mlp_ratio=self.mlp_ratio,
            use_gc_cross=self.use_gc_cross,
            use_self_attn=self.use_self_attn,
        )

    @property
    def num_masks(self):
        return 3 * self.cat_blocks if self.use_cat else 0


class IDF(Module):
    def __init__(self, rng, channels):
        dt = get_default_dtype()
        self.weight = Parameter(kaiming_uniform(rng, (channels, 2 * channels, 3, 3)))
        bound = 1.0 / np.sqrt(2 * channels * 9)
        self.bias = Parameter(rng.uniform(-bound, bound, size=channels).astype(dt))

    def forward(self, x1, x2):
        return compute_idf(x1, x2, self.weight, self.bias)


class CATChangeDetector(Module):
    def __init__(self, cfg=None, seed=0, dtype=np.float32):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        with default_dtype(dtype):
            self.encoder = SiameseEncoder(rng, cfg.channels, cfg.encoder_blocks, cfg.stem)
            self.idf = _Scales({s: IDF(rng, c) for s, c in zip(SCALES, cfg.channels)})
            if cfg.use_cat:
                self.cat = _Scales({
                    s: CATModule(rng, c, cfg.block_config(i), cfg.cat_blocks)
                    for i, (s, c) in enumerate(zip(SCALES, cfg.channels))
                })
            else:
                self.cat = None
            self.dud = DenseUpsampleDecoder(rng, cfg.channels, dense=cfg.use_dud)
            self.classifier = Classifier(rng, cfg.channels[0], cfg.classifier_hidden)
        self.assign_names()

    def forward(self, img1, img2, traces=None):
        """Return ``(logits, masks)``; masks are ordered (scale, block).

        ``traces``, if a dict, is filled per scale with one dict of
        intermediate feature arrays per block.
        """
        feats1, feats2 = self.encoder.encode_pair(img1, img2)
        diffs = []
        masks = []
        for i, s in enumerate(SCALES):
            d = getattr(self.idf, s)(feats1[i], feats2[i])
            if self.cat is not None:
                block_traces = None
                if traces is not None:
                    block_traces = traces.setdefault(s, [])
                d, m = getattr(self.cat, s)(d, block_traces)
                masks.extend(m)
            diffs.append(d)
        fused = self.dud(*diffs)
        return self.classifier(fused), masks

    def predict(self, img1, img2):
        """Binary change map (B x H x W, uint8) from argmax over the two logits."""
        logits, _ = self.forward(img1, img2)
        return np.argmax(logits.data, axis=1).astype(np.uint8)


class _Scales(Module):
    def __init__(self, items):
        for key, value in items.items():
            setattr(self, key, value)


def to_input(images, dtype=np.float32):
    """Stack H x W x 3 float images into a B x 3 x H x W tensor."""
    arr = np.asarray(images, dtype=dtype)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
