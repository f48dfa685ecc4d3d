"""Datasets, boundary-to-region conversion, and the synthetic corpus generator.

Images are float32 grids in [0, 1]; label maps are integer grids in
[0, C-1] with class 0 reserved for background. A stack of B monotone
boundary curves partitions each column into B-1 layer classes (class k
occupies rows [b_k, b_{k+1}), boundaries rounded half-up) with background
above the first and below the last boundary, so B curves yield C = B classes.

The synthetic generator stands in for a real layered-image corpus: smooth
monotone boundaries built from low-frequency sinusoidal thickness curves,
per-layer mean intensities plus Gaussian noise, and contrast/brightness
jitter on the unlabeled split to emulate distribution breadth. Everything is
deterministic per seed.

On-disk layout (written by ``save_dataset_to_dir`` and the CLI):
16-bit grayscale PNG images, 8-bit PNG label maps, and a JSON manifest
listing ids, file paths, split membership and the generator config + seed.
Labeled samples can also be imported from an image raster plus either a
label raster or a boundary CSV (B rows x W columns of real row positions).
"""

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError, ShapeError
from .seeding import derive_seed

MANIFEST_NAME = "manifest.json"


@dataclass
class LabeledSample:
    """One image with its per-pixel class annotation."""

    image: np.ndarray      # (H, W) float32 in [0, 1]
    label_map: np.ndarray  # (H, W) integers in [0, C-1]
    id: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.label_map = np.asarray(self.label_map)
        if self.image.ndim != 2 or self.label_map.shape != self.image.shape:
            raise ShapeError(
                f"{self.id}: image {self.image.shape} and labels {self.label_map.shape} must be equal 2-D grids"
            )
        if not np.issubdtype(self.label_map.dtype, np.integer):
            raise DataError(f"{self.id}: label map must be integer-typed")
        if self.label_map.min() < 0:
            raise DataError(f"{self.id}: negative class index")
        if not self.id:
            raise DataError("sample id must be non-empty")


class LabeledDataset:
    """Immutable list of labeled samples."""

    def __init__(self, samples):
        self.samples = list(samples)
        if len({s.id for s in self.samples}) != len(self.samples):
            raise DataError("duplicate sample ids")

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i) -> LabeledSample:
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    @property
    def ids(self):
        return [s.id for s in self.samples]


class UnlabeledDataset:
    """Immutable list of (image, id) pairs."""

    def __init__(self, images, ids):
        self.images = [np.asarray(im, dtype=np.float32) for im in images]
        self.ids = [str(i) for i in ids]
        if len(self.images) != len(self.ids):
            raise ShapeError("need one id per image")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate sample ids")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i]


@dataclass
class BoundarySet:
    """Monotonically stacked surface curves, one row position per column."""

    boundaries: np.ndarray  # (B, W) real row positions
    height: int

    def __post_init__(self):
        self.boundaries = np.asarray(self.boundaries, dtype=np.float64)
        if self.boundaries.ndim != 2 or self.boundaries.shape[0] < 2:
            raise ShapeError(f"boundaries must be (B >= 2, W), got {self.boundaries.shape}")
        if np.any(np.diff(self.boundaries, axis=0) < 0):
            raise DataError("boundaries must satisfy b_k <= b_{k+1} in every column")
        if self.boundaries.min() < 0 or self.boundaries.max() > self.height:
            raise DataError(f"boundary positions must lie in [0, {self.height}]")

    @property
    def num_classes(self) -> int:
        # B curves bound B-1 layers; plus background
        return self.boundaries.shape[0]


def boundaries_to_labels(bounds: BoundarySet, height: int | None = None) -> np.ndarray:
    """Convert boundary curves to a hard label grid.

    Per column, rows in [b_k, b_{k+1}) get layer class k (boundaries rounded
    half-up); rows above b_1 and at/below b_B are background (class 0).
    """
    height = bounds.height if height is None else int(height)
    rb = np.floor(bounds.boundaries + 0.5)  # round half-up, stays monotone
    rows = np.arange(height, dtype=np.float64)[:, None]
    # count of boundaries at or above each row gives the layer index
    counts = (rb[:, None, :] <= rows[None, :, :]).sum(axis=0)
    labels = counts.astype(np.int64)
    labels[(counts == 0) | (counts == rb.shape[0])] = 0
    return labels


@dataclass(frozen=True)
class SynthConfig:
    """Settings for the layered synthetic image generator."""

    image_size: tuple = (64, 64)
    num_classes: int = 4
    boundary_smoothness: int = 3          # sinusoid components per curve
    layer_intensity_means: tuple = ()     # background first; auto-spread if empty
    noise_std: float = 0.08
    contrast_jitter: float = 0.25
    seed: int = 0
    min_layer_thickness: int = 2

    def __post_init__(self):
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ConfigurationError(f"image_size too small: {self.image_size}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.layer_intensity_means and len(self.layer_intensity_means) != self.num_classes:
            raise ConfigurationError("layer_intensity_means must have num_classes entries")
        if self.noise_std < 0 or self.contrast_jitter < 0:
            raise ConfigurationError("noise_std and contrast_jitter must be >= 0")
        if self.min_layer_thickness < 1:
            raise ConfigurationError("min_layer_thickness must be >= 1")
        n_layers = self.num_classes - 1
        if (n_layers * (self.min_layer_thickness + 2) + 4) > h:
            raise ConfigurationError(f"{self.num_classes} classes do not fit in height {h}")

    def intensity_means(self) -> np.ndarray:
        if self.layer_intensity_means:
            return np.asarray(self.layer_intensity_means, dtype=np.float64)
        # background dark, layers alternating bright/medium for contrast
        means = [0.05]
        levels = [0.85, 0.35, 0.6, 0.2, 0.75, 0.45, 0.9, 0.3]
        for k in range(self.num_classes - 1):
            means.append(levels[k % len(levels)])
        return np.asarray(means, dtype=np.float64)


def _smooth_curve(rng: np.random.Generator, width: int, components: int, amplitude: float) -> np.ndarray:
    """Sum of low-frequency sinusoids over the column axis, zero-mean."""
    x = np.linspace(0.0, 1.0, width)
    curve = np.zeros(width)
    for _ in range(components):
        freq = rng.uniform(0.5, 2.5)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        curve += rng.uniform(0.3, 1.0) * np.sin(2.0 * np.pi * freq * x + phase)
    peak = np.abs(curve).max()
    return curve * (amplitude / peak) if peak > 0 else curve


def _sample_boundaries(rng: np.random.Generator, cfg: SynthConfig) -> BoundarySet:
    """Monotone boundary stack built from positive smooth thickness curves."""
    h, w = cfg.image_size
    n_layers = cfg.num_classes - 1
    top_margin = rng.uniform(0.06, 0.18) * h
    bottom_margin = rng.uniform(0.06, 0.18) * h
    usable = h - top_margin - bottom_margin

    raw = rng.uniform(0.6, 1.4, size=n_layers)
    base_thickness = raw / raw.sum() * usable
    wobble = 0.25 * base_thickness.min()
    top = top_margin + _smooth_curve(rng, w, cfg.boundary_smoothness, 0.05 * h)
    top = np.clip(top, 1.0, h * 0.45)
    curves = [top]
    for k in range(n_layers):
        thickness = base_thickness[k] + _smooth_curve(rng, w, cfg.boundary_smoothness, wobble)
        thickness = np.maximum(thickness, float(cfg.min_layer_thickness))
        curves.append(curves[-1] + thickness)
    boundaries = np.stack(curves)
    # keep at least one background row at the bottom after rounding
    overflow = boundaries[-1].max() - (h - 1.5)
    if overflow > 0:
        boundaries[1:] -= (boundaries[1:] - boundaries[0]) * (overflow / (boundaries[-1].max() - boundaries[0].min() + 1e-9))
    return BoundarySet(np.clip(boundaries, 0.5, h - 1.5), height=h)


def _render_image(rng, cfg: SynthConfig, labels: np.ndarray, jitter: bool) -> np.ndarray:
    means = cfg.intensity_means()
    if jitter and cfg.contrast_jitter > 0:
        scale = 1.0 + rng.uniform(-cfg.contrast_jitter, cfg.contrast_jitter)
        shift = rng.uniform(-0.5, 0.5) * cfg.contrast_jitter
        means = 0.5 + (means - 0.5) * scale + shift
    image = means[labels]
    if cfg.noise_std > 0:
        image = image + rng.normal(0.0, cfg.noise_std, size=labels.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def synth_sample(cfg: SynthConfig, sample_id: str, jitter: bool = False) -> LabeledSample:
    """Generate one labeled sample; deterministic in (cfg.seed, sample_id)."""
    rng = np.random.default_rng(derive_seed(cfg.seed, "synth", sample_id))
    bounds = _sample_boundaries(rng, cfg)
    labels = boundaries_to_labels(bounds)
    image = _render_image(rng, cfg, labels, jitter=jitter)
    return LabeledSample(image=image, label_map=labels, id=sample_id)


def generate_synthetic_dataset(cfg: SynthConfig, n_labeled: int, n_unlabeled: int, n_test: int):
    """Build (labeled, unlabeled, test) splits; byte-identical per seed."""
    if n_labeled < 1:
        raise ConfigurationError("need at least one labeled sample")
    if n_unlabeled < 0 or n_test < 0:
        raise ConfigurationError("split sizes must be non-negative")
    labeled = LabeledDataset(synth_sample(cfg, f"labeled-{i:04d}") for i in range(n_labeled))
    unl_samples = [synth_sample(cfg, f"unlabeled-{i:04d}", jitter=True) for i in range(n_unlabeled)]
    unlabeled = UnlabeledDataset([s.image for s in unl_samples], [s.id for s in unl_samples])
    test = LabeledDataset(synth_sample(cfg, f"test-{i:04d}") for i in range(n_test))
    return labeled, unlabeled, test


class SampleStream:
    """Seeded shuffled minibatch stream: each epoch visits every item once.

    Epoch e uses the permutation drawn from ``derive_seed(seed, "epoch", e)``,
    so streams are reproducible and safely resumable from an iteration count.
    """

    def __init__(self, dataset, batch_size: int, seed: int):
        if len(dataset) == 0:
            raise DataError("cannot stream from an empty dataset")
        if batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self._cursor = 0

    def epoch_order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(derive_seed(self.seed, "epoch", epoch))
        return rng.permutation(len(self.dataset))

    def indices_at(self, start: int) -> list:
        """Batch of dataset indices for positions [start, start + batch)."""
        n = len(self.dataset)
        out = []
        for pos in range(start, start + self.batch_size):
            order = self.epoch_order(pos // n)
            out.append(int(order[pos % n]))
        return out

    def next_batch(self) -> list:
        items = [self.dataset[i] for i in self.indices_at(self._cursor)]
        self._cursor += self.batch_size
        return items

    def seek(self, position: int):
        self._cursor = position


# ---------------------------------------------------------------------------
# disk formats


def _require_uint16(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)


def save_image_png(image: np.ndarray, path):
    """Write a [0, 1] float grid as 16-bit grayscale PNG."""
    Image.fromarray(_require_uint16(image)).save(Path(path), format="PNG")


def load_image_png(path) -> np.ndarray:
    """Read an 8/16-bit grayscale raster as a [0, 1] float32 grid."""
    with Image.open(Path(path)) as im:
        arr = np.array(im)
    if arr.ndim == 3:  # collapse RGB rasters to luminance
        arr = arr.mean(axis=2)
    if arr.dtype == np.uint8:
        return (arr / 255.0).astype(np.float32)
    return (arr.astype(np.float32) / 65535.0).astype(np.float32)


def save_labels_png(label_map: np.ndarray, path):
    labels = np.asarray(label_map)
    if labels.max() > 255:
        raise DataError("label raster supports at most 256 classes")
    Image.fromarray(labels.astype(np.uint8)).save(Path(path), format="PNG")


def load_labels_png(path) -> np.ndarray:
    with Image.open(Path(path)) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise DataError(f"{path}: label raster must be single-channel")
    return arr.astype(np.int64)


def load_boundary_csv(path, height: int) -> BoundarySet:
    """Read B rows x W columns of real row positions."""
    rows = []
    with open(Path(path), newline="") as fh:
        for row in csv.reader(fh):
            if row:
                rows.append([float(v) for v in row])
    if not rows:
        raise DataError(f"{path}: empty boundary CSV")
    return BoundarySet(np.asarray(rows, dtype=np.float64), height=height)


def load_labeled_sample(image_path, label_path=None, boundary_csv=None, sample_id=None) -> LabeledSample:
    """Import one labeled sample from rasters or an image + boundary CSV."""
    image = load_image_png(image_path)
    if (label_path is None) == (boundary_csv is None):
        raise ConfigurationError("provide exactly one of label_path or boundary_csv")
    if label_path is not None:
        labels = load_labels_png(label_path)
    else:
        labels = boundaries_to_labels(load_boundary_csv(boundary_csv, height=image.shape[0]))
    if labels.shape != image.shape:
        raise ShapeError(f"label grid {labels.shape} does not match image {image.shape}")
    return LabeledSample(image=image, label_map=labels, id=sample_id or Path(image_path).stem)


def save_dataset_to_dir(out_dir, cfg: SynthConfig, labeled, unlabeled, test) -> Path:
    """Write splits + manifest under ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    entries = []
    for split, samples in (("labeled", labeled), ("test", test)):
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for s in samples:
            image_rel = f"{split}/{s.id}_image.png"
            label_rel = f"{split}/{s.id}_labels.png"
            save_image_png(s.image, out_dir / image_rel)
            save_labels_png(s.label_map, out_dir / label_rel)
            entries.append({"id": s.id, "split": split, "image": image_rel, "labels": label_rel})
    unl_dir = out_dir / "unlabeled"
    unl_dir.mkdir(parents=True, exist_ok=True)
    for image, image_id in zip(unlabeled.images, unlabeled.ids):
        image_rel = f"unlabeled/{image_id}_image.png"
        save_image_png(image, out_dir / image_rel)
        entries.append({"id": image_id, "split": "unlabeled", "image": image_rel, "labels": None})
    manifest = {
        "format_version": 1,
        "generator": {**asdict(cfg), "image_size": list(cfg.image_size),
                      "layer_intensity_means": list(cfg.layer_intensity_means)},
        "num_classes": cfg.num_classes,
        "samples": entries,
    }
    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def load_dataset_from_manifest(manifest_path):
    """Read a manifest directory back into (labeled, unlabeled, test, num_classes)."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    manifest = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    by_split = {"labeled": [], "test": [], "unlabeled": []}
    for entry in manifest["samples"]:
        split = entry["split"]
        if split not in by_split:
            raise DataError(f"unknown split {split!r} in manifest")
        if split == "unlabeled":
            by_split[split].append((load_image_png(root / entry["image"]), entry["id"]))
        else:
            by_split[split].append(
                LabeledSample(
                    image=load_image_png(root / entry["image"]),
                    label_map=load_labels_png(root / entry["labels"]),
                    id=entry["id"],
                )
            )
    labeled = LabeledDataset(by_split["labeled"])
    test = LabeledDataset(by_split["test"])
    unlabeled = UnlabeledDataset([im for im, _ in by_split["unlabeled"]], [i for _, i in by_split["unlabeled"]])
    num_classes = int(manifest.get("num_classes", 0))
    if num_classes < 2:
        num_classes = 1 + max((int(s.label_map.max()) for s in labeled), default=1)
    for s in list(labeled) + list(test):
        if s.label_map.max() >= num_classes:
            raise DataError(f"{s.id}: label {s.label_map.max()} out of range for C={num_classes}")
    return labeled, unlabeled, test, num_classes


def split_train_val(labeled: LabeledDataset, val_fraction: float, seed: int):
    """Deterministic train/validation split with at least one sample in each."""
    n = len(labeled)
    if n < 2:
        raise DataError("need at least 2 labeled samples to split off a validation set")
    n_val = min(max(1, round(n * val_fraction)), n - 1)
    order = np.random.default_rng(derive_seed(seed, "val-split")).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = LabeledDataset(labeled[i] for i in range(n) if i not in val_idx)
    val = LabeledDataset(labeled[i] for i in range(n) if i in val_idx)
    return train, val
