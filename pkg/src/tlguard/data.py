"""Labelled image datasets: a seeded synthetic glyph task and a PNG folder loader."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRAIN, TEST = "train", "test"


@dataclass
class LabeledDataset:
    """Images ``(N, C, H, W)`` in [0, 1] with 1-based labels and split tags."""

    images: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=int)
        self.splits = np.asarray(self.splits)
        if not self.class_names:
            self.class_names = [str(c) for c in range(1, int(self.labels.max(initial=0)) + 1)]
        k = len(self.class_names)
        if len(self.labels) and (self.labels.min() < 1 or self.labels.max() > k):
            raise ValueError(f"labels must lie in 1..{k}")
        if not (len(self.images) == len(self.labels) == len(self.splits)):
            raise ValueError("images, labels and splits must have equal length")

    @property
    def num_classes(self):
        return len(self.class_names)

    def __len__(self):
        return len(self.labels)

    def _take(self, idx):
        return LabeledDataset(self.images[idx], self.labels[idx], self.splits[idx], list(self.class_names))

    def split(self, name):
        return self._take(np.flatnonzero(self.splits == name))

    @property
    def train(self):
        return self.split(TRAIN)

    @property
    def test(self):
        return self.split(TEST)

    def indices_of(self, label):
        return np.flatnonzero(self.labels == label)

    def subset(self, classes, relabel=True):
        """Samples of ``classes`` (original labels); relabelled 1..m in the given order."""
        classes = list(classes)
        idx = np.flatnonzero(np.isin(self.labels, classes))
        out = self._take(idx)
        if relabel:
            remap = {c: i + 1 for i, c in enumerate(classes)}
            out.labels = np.array([remap[c] for c in out.labels], dtype=int)
            out.class_names = [self.class_names[c - 1] for c in classes]
        return out


# --------------------------------------------------------------------------- #
# Synthetic glyphs
# --------------------------------------------------------------------------- #

# Each glyph is an implicit shape over normalised coordinates (u, v) in [-1, 1],
# given the stroke half-width t.  Returns a boolean "ink" mask.


def _square(u, v, t):
    return (np.abs(u) < 0.6) & (np.abs(v) < 0.6)


def _ring(u, v, t):
    r = np.hypot(u, v)
    return np.abs(r - 0.6) < t


def _disk(u, v, t):
    return np.hypot(u, v) < 0.55


def _hbar(u, v, t):
    return (np.abs(v) < t * 1.4) & (np.abs(u) < 0.8)


def _vbar(u, v, t):
    return (np.abs(u) < t * 1.4) & (np.abs(v) < 0.8)


def _plus(u, v, t):
    return ((np.abs(u) < t) & (np.abs(v) < 0.8)) | ((np.abs(v) < t) & (np.abs(u) < 0.8))


def _cross(u, v, t):
    box = (np.abs(u) < 0.75) & (np.abs(v) < 0.75)
    return box & ((np.abs(u - v) < t * 1.4) | (np.abs(u + v) < t * 1.4))


def _triangle(u, v, t):
    return (v < 0.6) & (v > -0.7 + 2 * np.abs(u) * 1.1) & (np.abs(u) < 0.7)


def _ell(u, v, t):
    return ((np.abs(u + 0.5) < t) & (np.abs(v) < 0.75)) | ((np.abs(v - 0.6) < t) & (u > -0.6) & (u < 0.6))


def _dots(u, v, t):
    return (np.hypot(u + 0.45, v) < 0.28) | (np.hypot(u - 0.45, v) < 0.28)


def _frame(u, v, t):
    m = np.maximum(np.abs(u), np.abs(v))
    return np.abs(m - 0.6) < t


def _tee(u, v, t):
    return ((np.abs(v + 0.6) < t) & (np.abs(u) < 0.7)) | ((np.abs(u) < t) & (v > -0.65) & (v < 0.75))


GLYPHS = [
    ("square", _square),
    ("ring", _ring),
    ("disk", _disk),
    ("hbar", _hbar),
    ("vbar", _vbar),
    ("plus", _plus),
    ("cross", _cross),
    ("triangle", _triangle),
    ("ell", _ell),
    ("dots", _dots),
    ("frame", _frame),
    ("tee", _tee),
]


def render_glyph(fn, rng, size=24, noise=0.08):
    """One randomly jittered, noisy rendering of a glyph."""
    ang = rng.uniform(-0.25, 0.25)
    scale = rng.uniform(0.75, 1.0)
    dx, dy = rng.uniform(-0.15, 0.15, size=2)
    t = rng.uniform(0.12, 0.2)
    # 2x supersampling for soft edges
    n = size * 2
    g = (np.arange(n) + 0.5) / n * 2 - 1
    yy, xx = np.meshgrid(g, g, indexing="ij")
    xs, ys = (xx - dx) / scale, (yy - dy) / scale
    c, s = np.cos(ang), np.sin(ang)
    u, v = c * xs + s * ys, -s * xs + c * ys
    ink = fn(u, v, t).astype(np.float32)
    ink = ink.reshape(size, 2, size, 2).mean(axis=(1, 3))
    fg = rng.uniform(0.65, 1.0)
    bg = rng.uniform(0.0, 0.25)
    img = bg + (fg - bg) * ink + rng.normal(0, noise, size=(size, size))
    return np.clip(img, 0, 1).astype(np.float32)


def synth_dataset(num_classes=10, per_class=200, seed=7, test_fraction=0.3, size=24, noise=0.08):
    """Seeded synthetic glyph task with a per-class train/test split."""
    if num_classes < 3:
        raise ValueError("synthetic task needs at least 3 classes")
    if num_classes > len(GLYPHS):
        raise ValueError(f"at most {len(GLYPHS)} synthetic classes are available")
    rng = np.random.default_rng(seed)
    n_test = int(round(per_class * test_fraction))
    images, labels, splits = [], [], []
    for label, (_, fn) in enumerate(GLYPHS[:num_classes], start=1):
        for i in range(per_class):
            images.append(render_glyph(fn, rng, size=size, noise=noise))
            labels.append(label)
            splits.append(TEST if i < n_test else TRAIN)
    images = np.stack(images)[:, None]
    names = [name for name, _ in GLYPHS[:num_classes]]
    return LabeledDataset(images, np.array(labels), np.array(splits), names)


# --------------------------------------------------------------------------- #
# PNG folders
# --------------------------------------------------------------------------- #


def _load_png(path, mode):
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode), dtype=np.float32) / 255.0
    except OSError as exc:
        raise ValueError(f"unreadable image {path}: {exc}") from exc


def ingest_dataset(directory, split=TEST, grayscale=True):
    """Load ``directory/<class>/*.png``; classes are taken in sorted order.

    All images must share one size.  Everything is tagged with ``split``.
    """
    root = Path(directory)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"no class subdirectories under {root}")
    mode = "L" if grayscale else "RGB"
    images, labels = [], []
    for label, d in enumerate(class_dirs, start=1):
        for f in sorted(d.glob("*.png")):
            arr = _load_png(f, mode)
            arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
            if images and arr.shape != images[0].shape:
                raise ValueError(f"inconsistent image size in {f}: {arr.shape} vs {images[0].shape}")
            images.append(arr)
            labels.append(label)
    if not images:
        raise ValueError(f"no PNG images under {root}")
    return LabeledDataset(
        np.stack(images), np.array(labels), np.array([split] * len(labels)), [d.name for d in class_dirs]
    )


def save_png(image, path):
    """Write a ``(C, H, W)`` image in [0, 1] as an 8-bit PNG."""
    from PIL import Image

    arr = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path)
