"""Seeded bi-temporal scene generator with exact change labels.

Each sample is a pure function of ``(seed, split, index)``: the per-sample
generator is ``np.random.default_rng([seed, split, index])``, so any subset of
a dataset can be regenerated byte-for-byte in any order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

from .netpbm import load_image, load_label, save_image, save_label, write_atomic

SPLITS = {"train": 0, "val": 1, "test": 2}
MIN_FRACTION = 0.005
MAX_FRACTION = 0.35


@dataclass
class SceneSpec:
    size: int = 64
    seed: int = 0
    min_shapes: int = 1
    max_shapes: int = 4
    min_extent: int = 8
    max_extent: int = 22
    static_objects: int = 3
    brightness: float = 0.15
    noise: float = 0.05
    drift: float = 0.04
    border: int = 2

    def validate(self):
        if self.size < 16:
            raise ValueError(f"image size {self.size} too small")
        if not 0 <= self.min_shapes <= self.max_shapes <= 4:
            raise ValueError(f"shape count range {self.min_shapes}..{self.max_shapes} outside 0..4")
        if not 1 <= self.min_extent <= self.max_extent <= self.size - 2 * self.border:
            raise ValueError(f"shape extent range {self.min_extent}..{self.max_extent} does not fit")
        if not 0 <= self.brightness <= 0.15:
            raise ValueError(f"brightness shift amplitude {self.brightness} outside [0, 0.15]")
        if not 0 <= self.noise <= 0.05:
            raise ValueError(f"noise sigma {self.noise} outside [0, 0.05]")
        if self.drift < 0 or self.border < 2 or self.static_objects < 0:
            raise ValueError("drift, border (>= 2) and static object count must be non-negative")
        return self

    @classmethod
    def from_mapping(cls, values):
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown scene spec key {key!r}")
            kwargs[key] = float(raw) if known[key] == "float" else int(raw)
        return cls(**kwargs)


@dataclass
class Shape:
    kind: str  # "rect" or "ellipse"
    top: int
    left: int
    height: int
    width: int
    color: tuple
    added: bool = True  # appears in t2 (else present in t1 only)

    def mask(self, size):
        m = np.zeros((size, size), dtype=bool)
        if self.kind == "rect":
            m[self.top:self.top + self.height, self.left:self.left + self.width] = True
            return m
        yy, xx = np.mgrid[0:self.height, 0:self.width]
        cy, cx = (self.height - 1) / 2.0, (self.width - 1) / 2.0
        ry, rx = self.height / 2.0, self.width / 2.0
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        m[self.top:self.top + self.height, self.left:self.left + self.width] = inside
        return m


def _smooth_field(rng, size, cells, channels=3):
    coarse = rng.random((cells, cells, channels))
    return zoom(coarse, (size / cells, size / cells, 1), order=1, mode="nearest")[:size, :size]


def _background(rng, size):
    base = rng.uniform(0.25, 0.55, size=3)
    tex = _smooth_field(rng, size, 8) - 0.5
    fine = gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(1.0, 1.0, 0)) * 0.03
    return np.clip(base + 0.25 * tex + fine, 0.0, 1.0)


def _random_shape(rng, spec, img, added):
    size, b = spec.size, spec.border
    kind = "rect" if rng.random() < 0.5 else "ellipse"
    h = int(rng.integers(spec.min_extent, spec.max_extent + 1))
    w = int(rng.integers(spec.min_extent, spec.max_extent + 1))
    top = int(rng.integers(b, size - b - h + 1))
    left = int(rng.integers(b, size - b - w + 1))
    region = img[top:top + h, left:left + w].reshape(-1, 3).mean(axis=0)
    color = rng.random(3)
    for _ in range(20):
        if np.abs(color - region).mean() >= 0.3:
            break
        color = rng.random(3)
    else:
        color = np.where(region > 0.5, 0.05, 0.95)
    return Shape(kind, top, left, h, w, tuple(float(c) for c in color), added)


def paint(img, shape):
    out = img.copy()
    out[shape.mask(img.shape[0])] = shape.color
    return out


def scene_background(rng, spec):
    """Textured background with the static (unchanged) objects painted in."""
    bg = _background(rng, spec.size)
    for _ in range(spec.static_objects):
        bg = paint(bg, _random_shape(rng, spec, bg, True))
    return bg


def render_pair(rng, spec, changes, background=None):
    """Compose t1/t2 and the exact label for a given list of change shapes.

    Distractors (brightness shift, smooth texture drift, pixel noise) touch t2
    only and never enter the label.
    """
    size = spec.size
    bg = scene_background(rng, spec) if background is None else background
    t1, t2 = bg.copy(), bg.copy()
    label = np.zeros((size, size), dtype=np.uint8)
    for c in changes:
        if c.added:
            t2 = paint(t2, c)
        else:
            t1 = paint(t1, c)
        label[c.mask(size)] = 1
    shift = rng.uniform(-spec.brightness, spec.brightness)
    drift = (_smooth_field(rng, size, 4) - 0.5) * 2.0 * spec.drift
    sigma = rng.uniform(0.0, spec.noise)
    t2 = t2 + shift + drift + rng.standard_normal(t2.shape) * sigma
    return np.clip(t1, 0.0, 1.0), np.clip(t2, 0.0, 1.0), label


def generate_pair(spec, index, split="train", max_tries=100):
    """Sample ``index`` of ``split``: float t1, t2 (H x W x 3) and uint8 label (H x W)."""
    rng = np.random.default_rng([spec.seed, SPLITS[split], index])
    for _ in range(max_tries):
        n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
        bg = scene_background(rng, spec)
        changes = [_random_shape(rng, spec, bg, bool(rng.random() < 0.5)) for _ in range(n)]
        t1, t2, label = render_pair(rng, spec, changes, bg)
        frac = label.mean()
        if n == 0 or MIN_FRACTION <= frac <= MAX_FRACTION:
            return t1, t2, label
    raise RuntimeError(f"could not sample a scene with change fraction in range (index {index})")


def sample_paths(root, split, index):
    stem = os.path.join(root, split, f"{index:06d}")
    return stem + "_t1.ppm", stem + "_t2.ppm", stem + "_label.pgm"


def generate_dataset(spec, n_train, n_val, out_dir):
    """Write images, labels and ``train.txt`` / ``val.txt`` manifests.

    Returns per-split lists of changed-pixel fractions.
    """
    spec.validate()
    stats = {}
    for split, count in (("train", n_train), ("val", n_val)):
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        lines = []
        fracs = []
        for i in range(count):
            t1, t2, label = generate_pair(spec, i, split)
            p1, p2, pl = sample_paths(out_dir, split, i)
            save_image(t1, p1)
            save_image(t2, p2)
            save_label(label, pl)
            lines.append("\t".join(os.path.relpath(p, out_dir) for p in (p1, p2, pl)))
            fracs.append(float(label.mean()))
        write_manifest(os.path.join(out_dir, f"{split}.txt"), lines)
        stats[split] = fracs
    return stats


def write_manifest(path, lines):
    text = "".join(line + "\n" for line in lines)
    write_atomic(path, text.encode("utf-8"))


def read_manifest(path):
    """Parse ``t1<TAB>t2<TAB>label`` lines; relative paths resolve against the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated paths, got {len(parts)}")
            entries.append(tuple(p if os.path.isabs(p) else os.path.join(base, p) for p in parts))
    return entries


def load_split(manifest):
    """Load a manifest into arrays: t1, t2 as N x 3 x H x W float32, labels N x H x W uint8."""
    entries = read_manifest(manifest)
    t1s, t2s, labels = [], [], []
    shape = None
    for p1, p2, pl in entries:
        a, b, lab = load_image(p1), load_image(p2), load_label(pl)
        if a.ndim != 3 or a.shape != b.shape or a.shape[:2] != lab.shape:
            raise ValueError(f"sample {p1}: image/label dimensions disagree")
        if shape is not None and a.shape != shape:
            raise ValueError(f"sample {p1}: size {a.shape} differs from {shape}")
        shape = a.shape
        t1s.append(a.transpose(2, 0, 1))
        t2s.append(b.transpose(2, 0, 1))
        labels.append(lab)
    if not entries:
        return (np.zeros((0, 3, 0, 0), np.float32),) * 2 + (np.zeros((0, 0, 0), np.uint8),)
    return np.stack(t1s), np.stack(t2s), np.stack(labels)
