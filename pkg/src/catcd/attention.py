"""CAT refinement of difference features.

A block runs: change-mask prediction and GC pooling -> cosine cross-attention
against the GC vector -> windowed self-attention -> feed-forward.  Each
attention/FFN sublayer is wrapped as ``LayerNorm(x + sublayer(x))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import Conv2d, LayerNorm, Linear, Module, to_map, to_tokens, trunc_normal
from .autograd import Parameter, get_default_dtype
from .ops import ShapeError

COSINE_EPS = 1e-6


def compute_idf(x1, x2, weight, bias):
    """Initial difference feature: ``conv3x3(concat(x1, x2)) + |x2 - x1|``."""
    if x1.shape != x2.shape:
        raise ShapeError(f"compute_idf: temporal features differ in shape, {x1.shape} vs {x2.shape}")
    fused = ops.conv2d(ops.concat([x1, x2], axis=1), weight, bias)
    return ops.add(fused, ops.abs(ops.sub(x2, x1)))


@dataclass
class GCRepresentation:
    vector: object  # B x C
    source_mask: object  # B x 2 x H x W, softmax probabilities
    mask_logits: object  # B x 2 x H x W


def learn_gc(x_in, weight, bias):
    """Predict a two-class change mask and pool ``x_in`` under its changed channel.

    The pool divides by H*W (all pixels), not by the soft count of changed
    pixels, so ``vector`` is ``global_avg_pool(x_in * mask[:, 1])``.
    """
    logits = ops.conv2d(x_in, weight, bias)
    if logits.shape[1] != 2:
        raise ShapeError(f"learn_gc: mask conv must produce 2 channels, got {logits.shape[1]}")
    prob = ops.softmax(logits, axis=1)
    changed = ops.expand(prob[:, 1:2], x_in.shape)
    vector = ops.global_avg_pool(ops.mul(x_in, changed))
    return GCRepresentation(vector, prob, logits)


class CosineCrossAttention(Module):
    """Pixels as queries, the GC vector as the single key and value.

    Per head, each pixel's weight is ``cos(q_i, k)`` (no softmax) and its
    update is ``weight * v``; heads are concatenated and projected by ``Wo``.
    """

    def __init__(self, rng, channels, heads, out_std=0.02):
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.channels = channels
        dt = get_default_dtype()
        self.Wq = Parameter(trunc_normal(rng, (channels, channels)))
        self.bq = Parameter(np.zeros(channels, dtype=dt))
        self.Wk = Parameter(trunc_normal(rng, (channels, channels)))
        self.bk = Parameter(np.zeros(channels, dtype=dt))
        self.Wv = Parameter(trunc_normal(rng, (channels, channels)))
        self.bv = Parameter(np.zeros(channels, dtype=dt))
        self.Wo = Parameter(trunc_normal(rng, (channels, channels), std=out_std))
        self.norm = LayerNorm(channels)

    def _heads(self, x_df, x_gc):
        B, N, C = x_df.shape
        h, d = self.heads, C // self.heads
        q = ops.linear(x_df, self.Wq, self.bq)
        k = ops.linear(x_gc, self.Wk, self.bk)
        v = ops.linear(x_gc, self.Wv, self.bv)
        qh = ops.transpose(ops.reshape(q, (B, N, h, d)), (0, 2, 1, 3))
        return qh, ops.reshape(k, (B, h, d)), ops.reshape(v, (B, h, 1, d))

    def weights(self, x_df, x_gc):
        """Cosine weights, B x heads x N."""
        qh, kh, _ = self._heads(x_df, x_gc)
        return ops.cosine_similarity(qh, kh, COSINE_EPS)

    def forward(self, x_df, x_gc):
        B, N, C = x_df.shape
        if x_gc.shape != (B, C):
            raise ShapeError(f"cross-attention: GC vector {x_gc.shape} vs features {x_df.shape}")
        qh, kh, vh = self._heads(x_df, x_gc)
        w = ops.cosine_similarity(qh, kh, COSINE_EPS)
        a = ops.matmul(ops.reshape(w, (B, self.heads, N, 1)), vh)
        a = ops.reshape(ops.transpose(a, (0, 2, 1, 3)), (B, N, C))
        a = ops.linear(a, self.Wo)
        return self.norm(ops.add(x_df, a))


def window_partition(x, s):
    """B x C x H x W -> (B * nWin) x s^2 x C, windows in row-major order."""
    B, C, H, W = x.shape
    if H % s or W % s:
        raise ShapeError(f"window_partition: {H}x{W} map not divisible by window {s}")
    t = ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (B, H // s, s, W // s, s, C))
    t = ops.transpose(t, (0, 1, 3, 2, 4, 5))
    return ops.reshape(t, (B * (H // s) * (W // s), s * s, C))


def window_merge(windows, s, B, H, W):
    """Inverse of :func:`window_partition`."""
    C = windows.shape[-1]
    t = ops.reshape(windows, (B, H // s, W // s, s, s, C))
    t = ops.transpose(t, (0, 1, 3, 2, 4, 5))
    return ops.transpose(ops.reshape(t, (B, H, W, C)), (0, 3, 1, 2))


def num_windows(h, w, window_size):
    s = clip_window(window_size, h, w)
    return (h // s) * (w // s)


def clip_window(window_size, h, w):
    s = min(window_size, h, w)
    if h % s or w % s:
        raise ShapeError(f"window size {s} does not divide feature size {h}x{w}")
    return s


class WindowSelfAttention(Module):
    """Multi-head softmax attention inside each window, no position encoding."""

    def __init__(self, rng, channels, heads):
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = Linear(rng, channels, 3 * channels)
        self.proj = Linear(rng, channels, channels)
        self.norm = LayerNorm(channels)

    def forward(self, tokens):
        Bw, n, C = tokens.shape
        h, d = self.heads, C // self.heads
        qkv = ops.transpose(ops.reshape(self.qkv(tokens), (Bw, n, 3, h, d)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
        attn = ops.softmax(scores, axis=-1)
        out = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (Bw, n, C))
        return self.norm(ops.add(tokens, self.proj(out)))


class FeedForward(Module):
    def __init__(self, rng, channels, mlp_ratio=4):
        self.fc1 = Linear(rng, channels, mlp_ratio * channels)
        self.fc2 = Linear(rng, mlp_ratio * channels, channels)
        self.norm = LayerNorm(channels)

    def forward(self, x):
        return self.norm(ops.add(x, self.fc2(ops.gelu(self.fc1(x)))))


@dataclass
class CATBlockConfig:
    window_size: int = 8
    heads: int = 2
    mlp_ratio: int = 4
    use_gc_cross: bool = True
    use_self_attn: bool = True


class CATBlock(Module):
    """One refinement block.  Emits the mask logits used for deep supervision.

    With ``use_gc_cross`` off the mask conv is kept (supervision only) but the
    GC vector and cross-attention are dropped.
    """

    def __init__(self, rng, channels, cfg):
        self.cfg = cfg
        self.mask_conv = Conv2d(rng, channels, 2, k=3)
        self.cross = CosineCrossAttention(rng, channels, cfg.heads) if cfg.use_gc_cross else None
        self.attn = WindowSelfAttention(rng, channels, cfg.heads) if cfg.use_self_attn else None
        self.ffn = FeedForward(rng, channels, cfg.mlp_ratio)

    def forward(self, x, trace=None):
        B, C, H, W = x.shape
        if trace is not None:
            trace["input"] = x.data
        tokens = to_tokens(x)
        if self.cross is not None:
            gc = learn_gc(x, self.mask_conv.weight, self.mask_conv.bias)
            mask_logits = gc.mask_logits
            tokens = self.cross(tokens, gc.vector)
            if trace is not None:
                trace["gc"] = gc.vector.data
                trace["cross"] = to_map(tokens, H, W).data
        else:
            mask_logits = self.mask_conv(x)
        if self.attn is not None:
            s = clip_window(self.cfg.window_size, H, W)
            win = window_partition(to_map(tokens, H, W), s)
            win = self.attn(win)
            tokens = to_tokens(window_merge(win, s, B, H, W))
            if trace is not None:
                trace["self"] = to_map(tokens, H, W).data
        tokens = self.ffn(tokens)
        out = to_map(tokens, H, W)
        if trace is not None:
            trace["output"] = out.data
        return out, mask_logits


class CATModule(Module):
    """Stack of blocks refining the difference feature of one scale."""

    def __init__(self, rng, channels, cfg, n_blocks=2):
        self.n_blocks = n_blocks
        for j in range(n_blocks):
            setattr(self, f"b{j}", CATBlock(rng, channels, cfg))

    def blocks(self):
        return [getattr(self, f"b{j}") for j in range(self.n_blocks)]

    def forward(self, x, traces=None):
        masks = []
        for block in self.blocks():
            trace = None
            if traces is not None:
                trace = {}
                traces.append(trace)
            x, m = block(x, trace)
            masks.append(m)
        return x, masks
