"""Differentiable tensor operations.

Shapes must match exactly except for the two sanctioned forms of
broadcasting: bias-add along one axis (:func:`add_bias`) and scalar scaling
(:func:`scale`).  Anything else is a :class:`ShapeError`.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from .autograd import Tensor, make_result


class ShapeError(ValueError):
    pass


# When a list, non-smooth ops append the side of their kink each input
# element is on; gradcheck uses it to spot stencils that straddle a kink.
KINK_TRACE = None


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------

def add(a, b):
    a, b = _t(a), _t(b)
    _same_shape("add", a, b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = _t(a), _t(b)
    _same_shape("sub", a, b)
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = _t(a), _t(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, s):
    a = _t(a)
    s = float(s)
    return make_result(a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,), "scale")


def abs(a):  # noqa: A001 - mirrors numpy naming
    a = _t(a)
    sign = np.sign(a.data)
    if KINK_TRACE is not None:
        KINK_TRACE.append(np.signbit(a.data))
    return make_result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def add_bias(x, b, axis=-1):
    """``x + b`` with ``b`` (1-D) broadcast along ``axis`` of ``x``."""
    x, b = _t(x), _t(b)
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)
    return make_result(
        x.data + b.data.reshape(view),
        (x, b),
        lambda g: (g, g.sum(axis=reduce_axes)),
        "add_bias",
    )


def expand(x, shape):
    """Explicit broadcast of size-1 axes to ``shape``; gradient sums them back."""
    x = _t(x)
    shape = tuple(shape)
    if len(shape) != x.ndim or any(s != d and s != 1 for s, d in zip(x.shape, shape)):
        raise ShapeError(f"expand: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, d) in enumerate(zip(x.shape, shape)) if s != d)
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return make_result(out, (x,), lambda g: (g.sum(axis=axes, keepdims=True),), "expand")


def gelu(x):
    """Exact GELU, ``x * Phi(x)``; Phi is the erf-based normal CDF (scipy's ndtr)."""
    x = _t(x)
    xd = x.data
    cdf = ndtr(xd)
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return make_result(out, (x,), backward, "gelu")


def softmax(x, axis=-1):
    x = _t(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), backward, "softmax")


def log_softmax(x, axis=-1):
    x = _t(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(y, (x,), backward, "log_softmax")


# ----------------------------------------------------------------------------
# reductions and shape plumbing
# ----------------------------------------------------------------------------

def sum(x, axis=None, keepdims=False):  # noqa: A001
    x = _t(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    x = _t(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    x = _t(x)
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes):
    x = _t(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
        "transpose",
    )


def concat(tensors, axis=0):
    tensors = [_t(t) for t in tensors]
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat"
    )


def getitem(x, key):
    x = _t(x)
    out = np.ascontiguousarray(x.data[key])

    def backward(g):
        full = np.zeros_like(x.data)
        full[key] += g
        return (full,)

    return make_result(out, (x,), backward, "getitem")


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes; leading axes must be identical."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return make_result(ad @ bd, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis; ``weight`` is (C_in, C_out)."""
    x, weight = _t(x), _t(weight)
    cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, cin)
    out = x2 @ weight.data
    if bias is not None:
        bias = _t(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out += bias.data
    out = out.reshape(lead + (cout,))
    wd = weight.data

    def backward(g):
        g2 = g.reshape(-1, cout)
        grads = [(g2 @ wd.T).reshape(x.shape), x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, backward, "linear")


# ----------------------------------------------------------------------------
# convolution, pooling, pixel shuffle
# ----------------------------------------------------------------------------

def conv2d(x, weight, bias=None, padding=None):
    """Stride-1 cross-correlation with a 1x1 or 3x3 kernel, spatial size preserved."""
    x, weight = _t(x), _t(weight)
    if x.ndim != 4:
        raise ShapeError(f"conv2d: expected B x C x H x W input, got {x.shape}")
    cout, cin, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d: unsupported kernel size {kh}x{kw}")
    if padding is None:
        padding = (kh - 1) // 2
    if padding != (kh - 1) // 2:
        raise ShapeError(f"conv2d: padding {padding} does not preserve size for k={kh}")
    B, C, H, W = x.shape
    if C != cin:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {cin}")
    if bias is not None:
        bias = _t(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
    k = kh
    wmat = weight.data.reshape(cout, cin * k * k)
    xd = x.data

    if k == 1:
        cols = xd.transpose(1, 0, 2, 3).reshape(cin, B * H * W)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = np.empty((cin, 3, 3, B, H, W), dtype=xd.dtype)
        for i in range(3):
            for j in range(3):
                cols[:, i, j] = xp[:, :, i:i + H, j:j + W].transpose(1, 0, 2, 3)
        cols = cols.reshape(cin * 9, B * H * W)

    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, B, H, W).transpose(1, 0, 2, 3))

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, B * H * W)
        dw = (g2 @ cols.T).reshape(weight.shape)
        dcols = wmat.T @ g2
        if k == 1:
            dx = np.ascontiguousarray(dcols.reshape(cin, B, H, W).transpose(1, 0, 2, 3))
        else:
            dcols = dcols.reshape(cin, 3, 3, B, H, W)
            dxp = np.zeros((B, cin, H + 2, W + 2), dtype=xd.dtype)
            for i in range(3):
                for j in range(3):
                    dxp[:, :, i:i + H, j:j + W] += dcols[:, i, j].transpose(1, 0, 2, 3)
            dx = np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1])
        grads = [dx, dw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, backward, f"conv2d_{k}x{k}")


def avg_pool2d(x, factor=2):
    x = _t(x)
    B, C, H, W = x.shape
    if H % factor or W % factor:
        raise ShapeError(f"avg_pool2d: spatial size {H}x{W} not divisible by {factor}")
    f = factor
    out = x.data.reshape(B, C, H // f, f, W // f, f).mean(axis=(3, 5))

    def backward(g):
        g = np.repeat(np.repeat(g, f, axis=2), f, axis=3) / (f * f)
        return (g.astype(x.dtype, copy=False),)

    return make_result(out, (x,), backward, "avg_pool2d")


def global_avg_pool(x):
    """Spatial mean of a B x C x H x W map, returned as B x C."""
    x = _t(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to((g / (H * W))[:, :, None, None], x.shape).astype(x.dtype),)

    return make_result(out, (x,), backward, "global_avg_pool")


def _shuffle(d, r):
    B, C, H, W = d.shape
    c = C // (r * r)
    return d.reshape(B, c, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, c, H * r, W * r)


def _unshuffle(d, r):
    B, c, Hr, Wr = d.shape
    H, W = Hr // r, Wr // r
    return d.reshape(B, c, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, c * r * r, H, W)


def pixel_shuffle(x, r):
    """Depth-to-space: B x (C r^2) x H x W -> B x C x rH x rW."""
    x = _t(x)
    if x.ndim != 4 or x.shape[1] % (r * r):
        raise ShapeError(f"pixel_shuffle: channels of {x.shape} not divisible by r^2={r * r}")
    return make_result(
        np.ascontiguousarray(_shuffle(x.data, r)),
        (x,),
        lambda g: (np.ascontiguousarray(_unshuffle(g, r)),),
        "pixel_shuffle",
    )


def pixel_unshuffle(x, r):
    """Space-to-depth, the exact inverse of :func:`pixel_shuffle`."""
    x = _t(x)
    if x.ndim != 4 or x.shape[2] % r or x.shape[3] % r:
        raise ShapeError(f"pixel_unshuffle: spatial size of {x.shape} not divisible by {r}")
    return make_result(
        np.ascontiguousarray(_unshuffle(x.data, r)),
        (x,),
        lambda g: (np.ascontiguousarray(_shuffle(g, r)),),
        "pixel_unshuffle",
    )


# ----------------------------------------------------------------------------
# normalization
# ----------------------------------------------------------------------------

def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then apply ``gamma * xhat + beta``."""
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs C={C}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    red = tuple(range(x.ndim - 1))

    def backward(g):
        gh = g * gamma.data
        dx = inv * (
            gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


class BatchNormState:
    """Running statistics for one batch-norm layer.  ``None`` means never initialized."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, initialized=True, dtype=np.float32):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        if initialized:
            self.running_mean = np.zeros(channels, dtype=dtype)
            self.running_var = np.ones(channels, dtype=dtype)
        else:
            self.running_mean = None
            self.running_var = None


def batch_norm2d(x, gamma, beta, state, training):
    """Per-channel normalization over batch, height and width.

    In training mode batch statistics are used and the running statistics are
    updated as ``(1 - m) * running + m * batch`` (biased batch variance).  Eval
    mode reads the running statistics only.
    """
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"batch_norm2d: input {x.shape} vs {state.channels} channels")
    xd = x.data
    eps = state.eps
    view = (1, -1, 1, 1)
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if state.running_mean is None:
            state.running_mean = np.zeros(state.channels, dtype=xd.dtype)
            state.running_var = np.ones(state.channels, dtype=xd.dtype)
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(xd.dtype)
        state.running_var = ((1 - m) * state.running_var + m * var).astype(xd.dtype)
    else:
        if state.running_mean is None:
            raise RuntimeError("batch_norm2d: eval mode requested before any running statistics exist")
        mu, var = state.running_mean.astype(xd.dtype), state.running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(view)) * inv.reshape(view)
    out = xhat * gamma.data.reshape(view) + beta.data.reshape(view)
    n = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gh = g * gamma.data.reshape(view)
        if training:
            dx = inv.reshape(view) * (
                gh
                - gh.sum(axis=(0, 2, 3), keepdims=True) / n
                - xhat * (gh * xhat).sum(axis=(0, 2, 3), keepdims=True) / n
            )
        else:
            dx = gh * inv.reshape(view)
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), backward, "batch_norm2d")


# ----------------------------------------------------------------------------
# attention helpers and losses
# ----------------------------------------------------------------------------

def cosine_similarity(q, k, eps=1e-6):
    """Cosine between every row of ``q`` (..., N, d) and the vector ``k`` (..., d).

    Returns (..., N).  The denominator is ``|q_i| |k| + eps`` so zero-norm rows
    give weight 0 instead of NaN.
    """
    q, k = _t(q), _t(k)
    if q.ndim != k.ndim + 1 or q.shape[:-2] != k.shape[:-1] or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"cosine_similarity: incompatible shapes {q.shape} and {k.shape}")
    qd, kd = q.data, k.data
    s = np.einsum("...nd,...d->...n", qd, kd)
    nq = np.sqrt((qd * qd).sum(axis=-1))
    nk = np.sqrt((kd * kd).sum(axis=-1))
    den = nq * nk[..., None] + eps
    out = s / den

    def backward(g):
        ds = g / den
        dden = -g * s / (den * den)
        with np.errstate(divide="ignore", invalid="ignore"):
            uq = np.where(nq[..., None] > 0, qd / nq[..., None], 0.0)
            uk = np.where(nk[..., None] > 0, kd / nk[..., None], 0.0)
        dq = ds[..., None] * kd[..., None, :] + (dden * nk[..., None])[..., None] * uq
        dk = np.einsum("...n,...nd->...d", ds, qd) + (dden * nq).sum(axis=-1)[..., None] * uk
        return dq.astype(qd.dtype, copy=False), dk.astype(kd.dtype, copy=False)

    return make_result(out.astype(qd.dtype, copy=False), (q, k), backward, "cosine_similarity")


def cross_entropy(logits, labels, axis=1):
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``).

    ``labels`` has the shape of ``logits`` with ``axis`` removed.
    """
    logits = _t(logits)
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    n_cls = logits.shape[axis]
    expected = logits.shape[:axis] + logits.shape[axis + 1:]
    if labels.shape != expected:
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    lab = labels.astype(np.int64)
    if lab.size and (lab.min() < 0 or lab.max() >= n_cls or not np.array_equal(lab, labels)):
        raise ValueError(f"cross_entropy: labels must be integers in [0, {n_cls})")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    picked = np.take_along_axis(logp, np.expand_dims(lab, axis), axis=axis)
    count = lab.size
    loss = np.asarray(-picked.sum() / count, dtype=logits.dtype)

    def backward(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, np.expand_dims(lab, axis), 1.0, axis=axis)
        return ((grad - onehot) * (g / count),)

    return make_result(loss, (logits,), backward, "cross_entropy")
