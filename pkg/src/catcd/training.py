"""Deep-supervision loss, AdamW with linear decay, metrics and feature diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Tensor


def _labels(label):
    arr = np.asarray(label.data if isinstance(label, Tensor) else label)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError("labels must be exactly 0 or 1")
    return arr.astype(np.int64)


def cross_entropy_2class(logits, labels):
    """Mean of ``-log softmax(logits)[label]`` over batch and pixels."""
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ops.ShapeError(f"expected B x 2 x H x W logits, got {logits.shape}")
    return ops.cross_entropy(logits, _labels(labels), axis=1)


def downsample_label(label, factor, mode="or"):
    """Reduce a (B x) H x W label map by ``factor``.

    ``or``: a coarse cell is changed iff any covered pixel is.  ``nearest``
    takes the top-left pixel of each cell.
    """
    label = np.asarray(label)
    squeeze = label.ndim == 2
    if squeeze:
        label = label[None]
    B, H, W = label.shape
    if H % factor or W % factor:
        raise ops.ShapeError(f"label size {H}x{W} not divisible by {factor}")
    if mode == "or":
        out = label.reshape(B, H // factor, factor, W // factor, factor).max(axis=(2, 4))
    elif mode == "nearest":
        out = label[:, ::factor, ::factor]
    else:
        raise ValueError(f"unknown label downsampling mode {mode!r}")
    out = np.ascontiguousarray(out, dtype=label.dtype)
    return out[0] if squeeze else out


@dataclass
class LossConfig:
    weights: tuple = (1.0,) * 6
    label_mode: str = "or"

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        if any(w < 0 for w in self.weights):
            raise ValueError("deep-supervision weights must be non-negative")


def full_loss(x_out, masks, label, cfg=None, return_terms=False):
    """Final cross-entropy plus weighted cross-entropy of every block's mask logits.

    ``masks`` are ordered (scale, block); each is supervised with the label
    pooled to its resolution.
    """
    cfg = cfg or LossConfig()
    if len(masks) != len(cfg.weights):
        raise ValueError(f"expected {len(cfg.weights)} mask logits, got {len(masks)}")
    label = _labels(label)
    main = cross_entropy_2class(x_out, label)
    total = main
    terms = [main]
    H = label.shape[-2]
    for w, m in zip(cfg.weights, masks):
        factor = H // m.shape[2]
        ce = cross_entropy_2class(m, downsample_label(label, factor, cfg.label_mode))
        terms.append(ce)
        if w != 0.0:
            total = ops.add(total, ops.scale(ce, w))
    return (total, terms) if return_terms else total


def linear_decay_lr(base_lr, epoch, total_epochs):
    """Per-epoch linear interpolation from ``base_lr`` (epoch 0) toward 0 at ``total_epochs``."""
    if total_epochs <= 0:
        return base_lr
    return base_lr * max(0.0, 1.0 - epoch / total_epochs)


class AdamW:
    """Adam with decoupled weight decay, applied multiplicatively before the moment update."""

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is not None and g.shape != p.data.shape:
                raise ops.ShapeError(f"{getattr(p, 'name', '')}: grad {g.shape} vs param {p.data.shape}")
            if self.weight_decay:
                p.data *= p.data.dtype.type(1.0 - lr * self.weight_decay)
            if g is None:
                g = np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state(self):
        out = {"opt.step": np.array([self.step_count], dtype=np.float32)}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"opt.m.{p.name}"] = m
            out[f"opt.v.{p.name}"] = v
        return out

    def load_state(self, state):
        self.step_count = int(state["opt.step"][0])
        for i, p in enumerate(self.params):
            for key, buf in (("m", self.m), ("v", self.v)):
                arr = state[f"opt.{key}.{p.name}"]
                if arr.shape != p.data.shape:
                    raise ops.ShapeError(f"optimizer {key} for {p.name}: {arr.shape} vs {p.data.shape}")
                buf[i] = arr.astype(p.data.dtype).copy()


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------

@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_maps(cls, pred, truth):
        pred = np.asarray(pred).astype(bool)
        truth = np.asarray(truth).astype(bool)
        if pred.shape != truth.shape:
            raise ops.ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
        tp = int(np.count_nonzero(pred & truth))
        fp = int(np.count_nonzero(pred & ~truth))
        fn = int(np.count_nonzero(~pred & truth))
        return cls(tp, fp, pred.size - tp - fp - fn, fn)


@dataclass
class Metrics:
    counts: ConfusionCounts
    precision: float
    recall: float
    f1: float
    precision_undefined: bool = False
    recall_undefined: bool = False

    @property
    def flags(self):
        out = []
        if self.precision_undefined:
            out.append("no_predicted_positives")
        if self.recall_undefined:
            out.append("no_true_positives_in_truth")
        return out


def metrics_from_counts(c):
    """Precision, recall and F1 of the change class; 0/0 yields 0 and sets a flag."""
    p_undef = c.tp + c.fp == 0
    r_undef = c.tp + c.fn == 0
    precision = 0.0 if p_undef else c.tp / (c.tp + c.fp)
    recall = 0.0 if r_undef else c.tp / (c.tp + c.fn)
    f1 = 0.0 if precision == 0.0 or recall == 0.0 else 2.0 / (1.0 / precision + 1.0 / recall)
    return Metrics(c, precision, recall, f1, p_undef, r_undef)


def compute_metrics(pred, truth):
    return metrics_from_counts(ConfusionCounts.from_maps(pred, truth))


# ----------------------------------------------------------------------------
# feature-space cluster diagnostic
# ----------------------------------------------------------------------------

@dataclass
class ClusterStats:
    intra_changed: float
    intra_unchanged: float
    centroid_distance: float
    ratio: float
    flag: str = ""

    @property
    def valid(self):
        return not self.flag


def cluster_diagnostic(features, label, min_distance=1e-12):
    """Compactness of changed vs unchanged pixels in a feature map.

    ``features`` is C x H x W (or N x C already flattened), ``label`` H x W
    (or N).  Intra terms are mean Euclidean distances to the class centroid;
    ``ratio = (intra_changed + intra_unchanged) / (2 * centroid_distance)``.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 3:
        features = features.reshape(features.shape[0], -1).T
    label = np.asarray(label).reshape(-1).astype(bool)
    if features.shape[0] != label.size:
        raise ops.ShapeError(f"{features.shape[0]} feature rows vs {label.size} labels")
    nan = float("nan")
    if label.all() or not label.any():
        return ClusterStats(nan, nan, nan, nan, "missing_class")
    changed, unchanged = features[label], features[~label]
    cc, cu = changed.mean(axis=0), unchanged.mean(axis=0)
    intra_c = float(np.linalg.norm(changed - cc, axis=1).mean())
    intra_u = float(np.linalg.norm(unchanged - cu, axis=1).mean())
    dist = float(np.linalg.norm(cc - cu))
    if dist <= min_distance:
        return ClusterStats(intra_c, intra_u, dist, float("inf"), "coincident_centroids")
    return ClusterStats(intra_c, intra_u, dist, (intra_c + intra_u) / (2.0 * dist))
