"""Weight-shared convolutional encoder producing three feature scales.

A stand-in for the transformer backbone: a two-conv stem reduces the image by
4, then three stages (the second and third preceded by 2x average pooling)
each apply a 1x1 channel-modulation conv and residual conv-GELU-BN blocks.
"""

from __future__ import annotations

from . import ops
from .nn import BatchNorm2d, Conv2d, Module


class ConvBlock(Module):
    def __init__(self, rng, channels):
        self.conv = Conv2d(rng, channels, channels, k=3)
        self.bn = BatchNorm2d(channels)

    def forward(self, x):
        return ops.add(x, self.bn(ops.gelu(self.conv(x))))


class Stage(Module):
    def __init__(self, rng, cin, cout, n_blocks, downsample):
        self.downsample = downsample
        self.chn_mod = Conv2d(rng, cin, cout, k=1)
        self.blocks = [ConvBlock(rng, cout) for _ in range(n_blocks)]

    def forward(self, x):
        if self.downsample:
            x = ops.avg_pool2d(x, 2)
        x = self.chn_mod(x)
        for block in self.blocks:
            x = block(x)
        return x


class SiameseEncoder(Module):
    def __init__(self, rng, channels=(32, 64, 128), blocks=(2, 2, 2), stem_channels=16, in_channels=3):
        if len(channels) != 3 or len(blocks) != 3:
            raise ValueError("encoder needs exactly three stages")
        self.stem1 = Conv2d(rng, in_channels, stem_channels, k=3)
        self.stem2 = Conv2d(rng, stem_channels, stem_channels, k=3)
        self.stem_bn = BatchNorm2d(stem_channels)
        cins = (stem_channels,) + tuple(channels[:2])
        self.stages = [
            Stage(rng, cin, cout, n, downsample=i > 0)
            for i, (cin, cout, n) in enumerate(zip(cins, channels, blocks))
        ]

    def forward(self, img):
        _, _, H, W = img.shape
        if H % 16 or W % 16:
            raise ops.ShapeError(f"encoder input {H}x{W} must be divisible by 16")
        x = ops.avg_pool2d(ops.gelu(self.stem1(img)), 2)
        x = ops.avg_pool2d(self.stem_bn(ops.gelu(self.stem2(x))), 2)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def encode_pair(self, img1, img2):
        """Run both temporal images through the same weights, one stream at a time."""
        if img1.shape != img2.shape:
            raise ops.ShapeError(f"image pair shapes differ: {img1.shape} vs {img2.shape}")
        return self.forward(img1), self.forward(img2)


def feature_shapes(image_size, channels):
    """Per-scale (C, H, W) for a square input, scales at 1/4, 1/8, 1/16."""
    if image_size % 16:
        raise ops.ShapeError(f"image size {image_size} must be divisible by 16")
    return [(c, image_size >> (i + 2), image_size >> (i + 2)) for i, c in enumerate(channels)]
