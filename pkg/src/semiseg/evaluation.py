"""Dice metrics, precision-recall curves, confident-subset reports, overlays.

Dice for class c is ``2|A & B| / (|A| + |B|)`` over the predicted and
ground-truth pixel sets of that class. Conventions (documented in every
report): when both sets are empty the class scores 1.0 (correctly absent);
when exactly one is empty it scores 0.0. Reported per-class values are
means +/- std over test images; the headline mean is the arithmetic mean
over foreground classes (background class 0 excluded).

The confident-subset report recomputes Dice counting only pixels whose
confidence ``w`` exceeds a threshold (default 0.5). ``w`` defaults to the
evaluated model's own MC-dropout confidence (the deployed model's
self-assessment); precomputed teacher records can be supplied instead, and
the report states which source was used.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError, ShapeError
from .inference import McConfig, confidence_map, entropy_map, mc_mean_prediction
from .model import predict_scores

BACKGROUND_CLASS = 0


def dice(pred: np.ndarray, gt: np.ndarray, class_id: int, mask: np.ndarray | None = None) -> float:
    """Dice overlap of one class between two label grids.

    ``mask`` restricts both pixel sets (used for confident-subset scoring).
    Both-empty -> 1.0, exactly-one-empty -> 0.0.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    a = pred == class_id
    b = gt == class_id
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape:
            raise ShapeError("mask shape must match label grids")
        a = a & mask
        b = b & mask
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


@dataclass
class DiceReport:
    """Per-class Dice statistics over a test set."""

    per_class_dice: np.ndarray       # (C,) mean over images
    per_class_std: np.ndarray        # (C,) std over images
    mean_dice: float                 # mean over foreground classes
    per_class_support: np.ndarray    # (C,) ground-truth pixel counts
    num_images: int
    confident_fraction: float | None = None
    omega_source: str | None = None
    degenerate: bool = False
    notes: dict = field(default_factory=dict)

    def rows(self):
        for c in range(len(self.per_class_dice)):
            yield {
                "class": c,
                "dice_mean": float(self.per_class_dice[c]),
                "dice_std": float(self.per_class_std[c]),
                "support": int(self.per_class_support[c]),
            }


def _predicted_labels(model, image) -> np.ndarray:
    return predict_scores(model, image, dropout_active=False).argmax(axis=-1)


def _aggregate(per_image: np.ndarray, supports: np.ndarray, num_images: int, **kwargs) -> DiceReport:
    means = per_image.mean(axis=0)
    stds = per_image.std(axis=0)
    foreground = means[BACKGROUND_CLASS + 1:]
    return DiceReport(
        per_class_dice=means,
        per_class_std=stds,
        mean_dice=float(foreground.mean()) if foreground.size else float(means.mean()),
        per_class_support=supports,
        num_images=num_images,
        **kwargs,
    )


def evaluate_model(model, test_set, mc: McConfig | None = None) -> DiceReport:
    """Per-class Dice of deterministic argmax predictions over a labeled set.

    ``mc`` is accepted for signature parity with the confident-subset report
    and ignored here (deterministic forward).
    """
    if len(test_set) == 0:
        raise DataError("test set must be non-empty")
    num_classes = model.config.num_classes
    per_image = np.zeros((len(test_set), num_classes))
    supports = np.zeros(num_classes, dtype=np.int64)
    for i, sample in enumerate(test_set):
        pred = _predicted_labels(model, sample.image)
        supports += np.bincount(sample.label_map.ravel(), minlength=num_classes)
        for c in range(num_classes):
            per_image[i, c] = dice(pred, sample.label_map, c)
    return _aggregate(per_image, supports, len(test_set))


def confident_subset_report(
    model,
    test_set,
    mc: McConfig | None = None,
    threshold: float = 0.5,
    records=None,
) -> DiceReport:
    """Dice restricted to pixels whose confidence exceeds ``threshold``.

    Confidence comes from the model's own MC dropout (``mc`` required) unless
    precomputed ``records`` (teacher side, one per test image) are given.
    Also reports the retained-pixel fraction; an all-excluded result is
    flagged as degenerate.
    """
    if len(test_set) == 0:
        raise DataError("test set must be non-empty")
    if records is not None and len(records) != len(test_set):
        raise DataError("need one soft-label record per test image")
    if records is None and mc is None:
        raise ConfigurationError("provide either mc settings or precomputed records")
    num_classes = model.config.num_classes
    per_image = np.zeros((len(test_set), num_classes))
    supports = np.zeros(num_classes, dtype=np.int64)
    retained = 0
    total = 0
    for i, sample in enumerate(test_set):
        pred = _predicted_labels(model, sample.image)
        if records is not None:
            omega = np.asarray(records[i].confidence, dtype=np.float64)
        else:
            omega = confidence_map(entropy_map(mc_mean_prediction(model, sample.image, mc)), mc.alpha)
        if omega.shape != sample.label_map.shape:
            raise ShapeError("confidence map shape must match the image")
        mask = omega > threshold
        retained += int(mask.sum())
        total += mask.size
        supports += np.bincount(sample.label_map[mask].ravel(), minlength=num_classes)
        for c in range(num_classes):
            per_image[i, c] = dice(pred, sample.label_map, c, mask=mask)
    fraction = retained / total if total else 0.0
    return _aggregate(
        per_image, supports, len(test_set),
        confident_fraction=fraction,
        omega_source="records" if records is not None else "model-mc-dropout",
        degenerate=(retained == 0),
        notes={"threshold": threshold},
    )


def write_dice_report(report: DiceReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "dice_mean", "dice_std", "support"])
        for row in report.rows():
            writer.writerow([row["class"], f"{row['dice_mean']:.6f}", f"{row['dice_std']:.6f}", row["support"]])
        writer.writerow(["mean_foreground", f"{report.mean_dice:.6f}", "", ""])
        if report.confident_fraction is not None:
            writer.writerow(["confident_fraction", f"{report.confident_fraction:.6f}",
                             report.omega_source, "degenerate" if report.degenerate else ""])
    return path


@dataclass
class PrCurve:
    thresholds: np.ndarray  # descending
    precision: np.ndarray
    recall: np.ndarray

    def __post_init__(self):
        if not (len(self.thresholds) == len(self.precision) == len(self.recall)):
            raise ShapeError("threshold/precision/recall lengths must match")


def precision_recall_curve(class_scores: np.ndarray, gt_positive: np.ndarray, num_thresholds: int = 101) -> PrCurve:
    """Precision/recall over descending score thresholds for one class.

    A pixel is predicted positive when its score is >= the threshold.
    With no predicted positives, precision is defined as 1.0. Ground truth
    with no positive pixels makes recall undefined and raises.
    """
    scores = np.asarray(class_scores, dtype=np.float64).ravel()
    gt = np.asarray(gt_positive).astype(bool).ravel()
    if scores.shape != gt.shape:
        raise ShapeError("scores and ground truth must have the same number of pixels")
    if scores.min() < 0 or scores.max() > 1:
        raise DataError("scores must lie in [0, 1]")
    if not gt.any():
        raise DataError("ground truth has no positive pixels; recall is undefined")
    if num_thresholds < 2:
        raise ConfigurationError("num_thresholds must be >= 2")
    thresholds = np.linspace(1.0, 0.0, num_thresholds)
    precision = np.empty(num_thresholds)
    recall = np.empty(num_thresholds)
    n_positive = int(gt.sum())
    for i, t in enumerate(thresholds):
        predicted = scores >= t
        tp = int((predicted & gt).sum())
        n_pred = int(predicted.sum())
        precision[i] = tp / n_pred if n_pred else 1.0
        recall[i] = tp / n_positive
    return PrCurve(thresholds=thresholds, precision=precision, recall=recall)


def write_pr_curve(curve: PrCurve, csv_path, plot_path=None, title="precision-recall"):
    """Export a curve as CSV and optionally render a static plot."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall"])
        for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
            writer.writerow([f"{t:.6f}", f"{p:.6f}", f"{r:.6f}"])
    if plot_path is not None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 4))
        ax.plot(curve.recall, curve.precision, marker=".", markersize=3)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.02)
        ax.set_title(title)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(Path(plot_path), dpi=120)
        plt.close(fig)
    return csv_path


# ---------------------------------------------------------------------------
# overlays

_LABEL_PALETTE = np.array([
    [0, 0, 0], [228, 26, 28], [55, 126, 184], [77, 175, 74], [152, 78, 163],
    [255, 127, 0], [255, 255, 51], [166, 86, 40], [247, 129, 191], [153, 153, 153],
], dtype=np.uint8)


def _label_panel(labels: np.ndarray) -> np.ndarray:
    palette = _LABEL_PALETTE
    if labels.max() >= len(palette):  # extend deterministically for many classes
        extra = (np.arange(labels.max() + 1)[:, None] * np.array([97, 57, 31]) % 256).astype(np.uint8)
        palette = np.vstack([palette, extra[len(palette):]])
    return palette[labels]


def _heat_panel(u: np.ndarray, u_max: float) -> np.ndarray:
    """Cool-to-warm map: blue at u=0 to red at u=u_max; red channel monotone in u."""
    t = np.clip(np.asarray(u, dtype=np.float64) / max(u_max, 1e-12), 0.0, 1.0)
    panel = np.zeros(u.shape + (3,), dtype=np.uint8)
    panel[..., 0] = np.round(255 * t)
    panel[..., 2] = np.round(255 * (1.0 - t))
    return panel


def render_overlays(image, pred_labels, gt_labels, uncertainty, out_dir, stem="overlay", u_max=None):
    """Write input/gt/prediction/uncertainty panels plus a side-by-side composite.

    Each panel has the input's pixel dimensions. The heat map runs from blue
    (u = 0) to red (u = u_max, default ln C inferred from the label alphabet).
    Returns the written paths.
    """
    image = np.asarray(image)
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    uncertainty = np.asarray(uncertainty)
    if not (image.shape == pred_labels.shape == gt_labels.shape == uncertainty.shape):
        raise ShapeError("all overlay grids must share the input's shape")
    if u_max is None:
        u_max = math.log(max(int(max(pred_labels.max(), gt_labels.max())) + 1, 2))
    panels = {
        "input": np.repeat(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)[:, :, None], 3, axis=2),
        "gt": _label_panel(gt_labels),
        "pred": _label_panel(pred_labels),
        "uncertainty": _heat_panel(uncertainty, u_max),
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, panel in panels.items():
        path = out_dir / f"{stem}_{name}.png"
        Image.fromarray(panel).save(path, format="PNG")
        paths[name] = path
    composite = np.concatenate(list(panels.values()), axis=1)
    composite_path = out_dir / f"{stem}_composite.png"
    Image.fromarray(composite).save(composite_path, format="PNG")
    paths["composite"] = composite_path
    return paths
