"""Datasets: directory loading, stratified splits, normalization and a
synthetic multi-cell image generator.

Images are float32 arrays of shape (3, H, W) with values in [0, 1] before
normalization. Directory layout is one subdirectory per class; class indices
follow lexicographic order of the directory names.
"""
from __future__ import annotations

import colorsys
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_FORMATS = ("PNG", "BMP")
CLASS_NAMES = ("dyskeratotic", "koilocytotic", "metaplastic", "parabasal", "superficial")
SPLIT_NAMES = ("train", "validation", "test")


class DataError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray
    label: int
    source_id: str


class Dataset:
    """Images, labels and stable ids held as parallel arrays."""

    def __init__(self, images, labels, ids, class_names):
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4 or len(images) != len(labels) or len(ids) != len(labels):
            raise DataError("images, labels and ids must have matching lengths")
        if labels.size and (labels.min() < 0 or labels.max() >= len(class_names)):
            raise DataError("label out of range for the class list")
        if not np.isfinite(images).all():
            raise DataError("dataset contains non-finite pixel values")
        self.images = images
        self.labels = labels
        self.ids = list(ids)
        self.class_names = list(class_names)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return Sample(self.images[i], int(self.labels[i]), self.ids[i])

    @property
    def num_classes(self):
        return len(self.class_names)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices],
                       [self.ids[i] for i in indices], self.class_names)

    def index_of(self, source_id):
        try:
            return self.ids.index(source_id)
        except ValueError:
            raise DataError(f"no sample with id {source_id!r}") from None


@dataclass
class DatasetSplit:
    """Index lists into ``dataset`` for the train / validation / test partition."""

    dataset: Dataset
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def indices(self, name):
        if name not in SPLIT_NAMES:
            raise DataError(f"unknown split {name!r}; valid names: {', '.join(SPLIT_NAMES)}")
        return getattr(self, name)

    def part(self, name):
        return self.dataset.subset(self.indices(name))

    def per_class_counts(self):
        labels = self.dataset.labels
        k = self.dataset.num_classes
        return {name: np.bincount(labels[self.indices(name)], minlength=k) for name in SPLIT_NAMES}

    def manifest_text(self):
        """``source_id<TAB>split`` lines in dataset order."""
        where = {}
        for name in SPLIT_NAMES:
            for i in self.indices(name):
                where[int(i)] = name
        return "".join(f"{self.dataset.ids[i]}\t{where[i]}\n" for i in range(len(self.dataset)))


# -- loading ----------------------------------------------------------------

def _decode(path, size):
    with Image.open(path, formats=IMAGE_FORMATS) as img:
        img = img.convert("RGB")
        if img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def load_image_directory(root, resize_to=96, lenient=False):
    """Load a directory-per-class image tree.

    Files are decoded (PNG or BMP), resized bilinearly to ``resize_to`` square
    and scaled to [0, 1]. Samples are ordered by class, then by file name. An
    undecodable file is an error unless ``lenient`` is set, in which case it is
    skipped with a warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_dirs:
        raise DataError(f"dataset root {root} contains no class directories")
    images, labels, ids = [], [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file() and not p.name.startswith("."))
        loaded = 0
        for path in files:
            try:
                arr = _decode(path, resize_to)
            except Exception as exc:
                if not lenient:
                    raise DataError(f"cannot decode image {path}: {exc}") from exc
                warnings.warn(f"skipping undecodable image {path}: {exc}")
                continue
            images.append(arr)
            labels.append(label)
            ids.append(f"{cdir.name}/{path.name}")
            loaded += 1
        if loaded == 0:
            raise DataError(f"class directory {cdir} contains no images")
    return Dataset(np.stack(images), labels, ids, [d.name for d in class_dirs])


def write_image_directory(dataset, out_dir):
    """Write ``dataset`` as PNG files in directory-per-class layout."""
    out_dir = Path(out_dir)
    for name in dataset.class_names:
        (out_dir / name).mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(len(dataset)):
        arr = np.clip(np.rint(dataset.images[i].transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
        path = out_dir / dataset.ids[i]
        Image.fromarray(arr, "RGB").save(path, format="PNG")
        paths.append(path)
    return paths


# -- splitting and normalization ---------------------------------------------

def split_counts(n, fractions):
    """Per-split sizes: floor(n * f) each, remainder added to train."""
    counts = [int(math.floor(n * f + 1e-9)) for f in fractions]
    counts[0] += n - sum(counts)
    return counts


def stratified_split(dataset, fractions=(0.7, 0.2, 0.1), seed=0):
    """Deterministic per-class shuffle-and-cut into train / validation / test."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    parts = ([], [], [])
    for label in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == label)
        if len(members) < 3:
            raise DataError(f"class {dataset.class_names[label]!r} has {len(members)} samples; need at least 3")
        rng = np.random.default_rng([int(seed), label])
        members = members[rng.permutation(len(members))]
        n_train, n_val, _ = split_counts(len(members), fractions)
        parts[0].append(members[:n_train])
        parts[1].append(members[n_train:n_train + n_val])
        parts[2].append(members[n_train + n_val:])
    train, val, test = (np.sort(np.concatenate(p)) for p in parts)
    return DatasetSplit(dataset, train, val, test)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, images):
        m = self.mean.reshape(-1, 1, 1).astype(np.float32)
        s = self.std.reshape(-1, 1, 1).astype(np.float32)
        return ((np.asarray(images, dtype=np.float32) - m) / s).astype(np.float32)

    def invert(self, images):
        return images * self.std.reshape(-1, 1, 1) + self.mean.reshape(-1, 1, 1)

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def channel_stats(images):
    """Per-channel mean and population std over (N, H, W), in float64."""
    x = np.asarray(images, dtype=np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean, std


def normalize(split):
    """Standardize every split with statistics computed on the train split only.

    A channel with zero spread gets std 1 (with a warning), so it is only
    mean-centred.
    """
    if len(split.train) == 0:
        raise DataError("normalization needs a non-empty train split")
    mean, std = channel_stats(split.dataset.images[split.train])
    zero = std == 0
    if zero.any():
        warnings.warn(f"zero std in channel(s) {np.flatnonzero(zero).tolist()}; using 1")
        std = np.where(zero, 1.0, std)
    stats = NormStats(mean, std)
    ds = split.dataset
    normed = Dataset(stats.apply(ds.images), ds.labels, ds.ids, ds.class_names)
    return DatasetSplit(normed, split.train, split.validation, split.test), stats


# -- synthetic data -----------------------------------------------------------

@dataclass(frozen=True)
class ClassParams:
    count_range: tuple
    radius_range: tuple
    eccentricity: float
    hue_band: tuple
    texture: float


DEFAULT_CLASS_PARAMS = (
    ClassParams((6, 9), (7, 9), 0.3, (0.02, 0.07), 0.05),    # dyskeratotic
    ClassParams((4, 6), (10, 13), 0.4, (0.88, 0.95), 0.03),  # koilocytotic
    ClassParams((5, 7), (9, 11), 0.6, (0.47, 0.53), 0.04),   # metaplastic
    ClassParams((7, 9), (6, 8), 0.1, (0.58, 0.64), 0.02),    # parabasal
    ClassParams((4, 5), (11, 14), 0.7, (0.22, 0.30), 0.06),  # superficial
)


@dataclass(frozen=True)
class SyntheticSpec:
    class_names: tuple = CLASS_NAMES
    class_params: tuple = DEFAULT_CLASS_PARAMS
    image_size: int = 96
    count_per_class: int = 100
    mode: str = "multi"
    seed: int = 0

    def __post_init__(self):
        if len(self.class_names) != len(self.class_params):
            raise DataError("one parameter set is needed per class")
        if len(set(self.class_params)) != len(self.class_params):
            raise DataError("class parameter sets must be distinct")
        if self.mode not in ("multi", "single"):
            raise DataError(f"mode must be 'multi' or 'single', got {self.mode!r}")
        if self.count_per_class < 1:
            raise DataError("count_per_class must be >= 1")

    def to_text(self):
        lines = [f"synth.image_size={self.image_size}", f"synth.count_per_class={self.count_per_class}",
                 f"synth.mode={self.mode}", f"synth.seed={self.seed}"]
        for name, p in zip(self.class_names, self.class_params):
            lines.append(f"# {name}: count={p.count_range} radius={p.radius_range} "
                         f"eccentricity={p.eccentricity} hue={p.hue_band} texture={p.texture}")
        return "\n".join(lines) + "\n"


BACKGROUND = np.array([0.93, 0.91, 0.94])
DARK_THRESHOLD = 0.35  # luma below this counts as nucleus


def luma(image):
    """Grayscale (ITU-R 601) of a (3, H, W) image."""
    return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]


def _ellipse_mask(yy, xx, cy, cx, a, b, theta):
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


MAX_PLACEMENT_ROUNDS = 50


def _place_cells(rng, params, size):
    lo, hi = params.count_range
    n = int(rng.integers(lo, hi + 1))
    for _ in range(MAX_PLACEMENT_ROUNDS):
        cells = []
        for _ in range(400):
            if len(cells) == n:
                break
            r = rng.uniform(*params.radius_range)
            cy, cx = rng.uniform(r + 1, size - r - 2, size=2)
            if all(math.hypot(cy - y, cx - x) >= r + rr + 1.5 for y, x, rr in cells):
                cells.append((cy, cx, r))
        if len(cells) == n:
            return cells
    raise DataError(f"cannot fit {n} cells of radius {params.radius_range} into a {size}px image")


def render_cells(rng, params, size, mode="multi"):
    """Draw one image: light background, cells as cytoplasm ellipses around dark nuclei."""
    img = np.empty((3, size, size))
    img[:] = BACKGROUND.reshape(3, 1, 1)
    img += rng.uniform(-0.02, 0.02, size=(1, size, size))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if mode == "single":
        r = min(params.radius_range[1] * 2.0, size / 3)
        cells = [(size / 2, size / 2, r)]
    else:
        cells = _place_cells(rng, params, size)
    minor = math.sqrt(1 - params.eccentricity ** 2)
    for cy, cx, r in cells:
        theta = rng.uniform(0, math.pi)
        hue = rng.uniform(*params.hue_band) % 1.0
        cyto = np.array(colorsys.hsv_to_rgb(hue, 0.45, 0.85)).reshape(3, 1)
        nucleus = np.array(colorsys.hsv_to_rgb(hue, 0.6, 0.25)).reshape(3, 1)
        outer = _ellipse_mask(yy, xx, cy, cx, r, r * minor, theta)
        inner = _ellipse_mask(yy, xx, cy, cx, 0.4 * r, 0.4 * r * minor, theta)
        noise = rng.uniform(-params.texture, params.texture, size=int(outer.sum()))
        img[:, outer] = cyto + noise
        img[:, inner] = nucleus
    img = np.clip(img, 0.0, 1.0)
    # quantize like an 8-bit file so a write/load round trip is lossless
    return (np.rint(img * 255) / 255).astype(np.float32)


def synthesize_dataset(spec=SyntheticSpec()):
    """Generate ``count_per_class`` images per class, deterministically per seed."""
    images, labels, ids = [], [], []
    for label, (name, params) in enumerate(zip(spec.class_names, spec.class_params)):
        rng = np.random.default_rng([int(spec.seed), label])
        for i in range(spec.count_per_class):
            images.append(render_cells(rng, params, spec.image_size, spec.mode))
            labels.append(label)
            ids.append(f"{name}/{name}_{i:04d}.png")
    return Dataset(np.stack(images), labels, ids, spec.class_names)
