"""Dense upsample decoder and the binary classification head."""

from __future__ import annotations

from . import ops
from .nn import BatchNorm2d, Conv2d, Module
from .ops import ShapeError


class UpsampleUnit(Module):
    """conv1x1 (C_in -> C_out r^2) -> pixel shuffle -> GELU -> BatchNorm."""

    def __init__(self, rng, cin, cout, r):
        self.r = r
        self.conv = Conv2d(rng, cin, cout * r * r, k=1)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return self.bn(ops.gelu(ops.pixel_shuffle(self.conv(x), self.r)))


def _check_sum(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: cannot add {a.shape} and {b.shape}")
    return ops.add(a, b)


class DenseUpsampleDecoder(Module):
    """Fuse scale-3/2/1 difference maps into one scale-1 map.

    The coarsest map is upsampled separately to scale 2 and to scale 1 and
    added to both; the updated scale-2 map is then upsampled to scale 1 and
    added.  With ``dense=False`` the direct 3 -> 1 path is dropped, so every
    level only feeds the next finer one.
    """

    def __init__(self, rng, channels, dense=True):
        c1, c2, c3 = channels
        self.dense = dense
        self.up32 = UpsampleUnit(rng, c3, c2, 2)
        self.up31 = UpsampleUnit(rng, c3, c1, 4) if dense else None
        self.up21 = UpsampleUnit(rng, c2, c1, 2)

    def forward(self, d1, d2, d3):
        for (name, fine, coarse) in (("d1/d2", d1, d2), ("d2/d3", d2, d3)):
            if fine.shape[2] != 2 * coarse.shape[2] or fine.shape[3] != 2 * coarse.shape[3]:
                raise ShapeError(f"dud_fuse: {name} spatial ratio is not 2 ({fine.shape} vs {coarse.shape})")
        d2 = _check_sum("dud_fuse", d2, self.up32(d3))
        if self.up31 is not None:
            d1 = _check_sum("dud_fuse", d1, self.up31(d3))
        return _check_sum("dud_fuse", d1, self.up21(d2))


class Classifier(Module):
    """Upsample x4 to image size, then conv3x3 -> GELU -> conv1x1 to 2 logits."""

    def __init__(self, rng, cin, hidden):
        self.up = UpsampleUnit(rng, cin, hidden, 4)
        self.conv = Conv2d(rng, hidden, hidden, k=3)
        self.out = Conv2d(rng, hidden, 2, k=1)

    def forward(self, x):
        return self.out(ops.gelu(self.conv(self.up(x))))
