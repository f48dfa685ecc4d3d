"""Training objectives.

* ``labeled_loss``: class-weighted categorical cross entropy, averaged over
  pixels and batch. Used for the teacher and for the student's labeled term.
* ``unlabeled_loss``: confidence-weighted cross entropy against the teacher's
  soft labels,

      L_unlab = - sum_c  zeta_c * sum_{t in Z_c}  w_t * log p_c(t)

  where Z_c is the set of pixels whose teacher soft label argmaxes to class c
  (ties to the lowest index), w_t the teacher's confidence at pixel t, and
  p_c(t) the student's softmax score. zeta_c = 1 / sum_{t in Z_c} w_t when
  that confidence mass strictly exceeds ``min_class_mass``, else 0, which
  both normalizes class contributions and gates out classes backed by too
  little confident evidence.
* ``semi_supervised_loss``: plain sum of both terms (an optional coefficient
  on the unlabeled term is exposed, default 1).

Student scores enter as probabilities; probabilities are clamped to
[1e-7, 1] inside logs. All torch ops, so gradients flow to student scores.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, ShapeError

LOG_CLAMP_EPS = 1e-7


@dataclass
class LossConfig:
    """Loss hyper-parameters shared by teacher and student objectives."""

    alpha: float = 2.0
    min_class_mass: float = 50.0
    teacher_class_weights: np.ndarray | None = None
    unlabeled_weight: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if self.min_class_mass < 0:
            raise ConfigurationError(f"min_class_mass must be >= 0, got {self.min_class_mass}")
        if self.teacher_class_weights is not None:
            w = np.asarray(self.teacher_class_weights, dtype=np.float64)
            if not np.all(np.isfinite(w)) or (w < 0).any():
                raise ConfigurationError("class weights must be finite and non-negative")
            self.teacher_class_weights = w


def _as_batch(t, name):
    if not torch.is_tensor(t):
        t = torch.as_tensor(np.asarray(t))
    if t.ndim == 3:
        t = t[None]
    if t.ndim != 4:
        raise ShapeError(f"{name} must be (N, H, W, C) or (H, W, C), got shape {tuple(t.shape)}")
    return t


def labeled_loss(student_scores, labels_onehot, class_weights=None):
    """Mean over pixels of ``-sum_c w_c * y_c * log p_c`` (log clamped).

    ``labels_onehot`` must be exactly one-hot per pixel; ``class_weights``
    defaults to all ones.
    """
    p = _as_batch(student_scores, "student_scores")
    y = _as_batch(labels_onehot, "labels")
    if p.shape != y.shape:
        raise ShapeError(f"scores shape {tuple(p.shape)} != labels shape {tuple(y.shape)}")
    with torch.no_grad():
        yd = y.detach()
        if not (((yd == 0) | (yd == 1)).all() and (yd.sum(dim=-1) == 1).all()):
            raise ShapeError("labels must be one-hot per pixel")
    c = p.shape[-1]
    if class_weights is None:
        w = torch.ones(c, dtype=p.dtype)
    else:
        w = torch.as_tensor(np.asarray(class_weights), dtype=p.dtype)
        if w.shape != (c,):
            raise ShapeError(f"class_weights must have shape ({c},), got {tuple(w.shape)}")
        if not torch.isfinite(w).all() or (w < 0).any():
            raise ConfigurationError("class weights must be finite and non-negative")
    log_p = torch.log(torch.clamp(p, LOG_CLAMP_EPS, 1.0))
    per_pixel = -(w * y * log_p).sum(dim=-1)
    return per_pixel.mean()


def class_region_partition(soft_label) -> np.ndarray:
    """Per-pixel class assignment: argmax of the soft label, ties -> lowest index."""
    arr = np.asarray(soft_label)
    if arr.ndim != 3:
        raise ShapeError(f"soft label must be (H, W, C), got shape {arr.shape}")
    return arr.argmax(axis=-1)


def class_region_mass(assignment: np.ndarray, confidence: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-class confidence mass: entry c is ``sum of w_t over pixels assigned to c``."""
    assignment = np.asarray(assignment)
    confidence = np.asarray(confidence, dtype=np.float64)
    if assignment.shape != confidence.shape:
        raise ShapeError("assignment and confidence must share shape")
    return np.bincount(assignment.ravel(), weights=confidence.ravel(), minlength=num_classes)


def zeta_weights(mass: np.ndarray, min_class_mass: float) -> np.ndarray:
    """``1 / mass_c`` where the mass strictly exceeds the gate, else 0."""
    mass = np.asarray(mass, dtype=np.float64)
    zeta = np.zeros_like(mass)
    open_classes = mass > min_class_mass
    zeta[open_classes] = 1.0 / mass[open_classes]
    return zeta


def unlabeled_loss(student_scores, records, config: LossConfig):
    """Confidence-weighted cross entropy against teacher soft labels.

    ``records`` is one SoftLabelRecord (or a sequence matching the batch
    dimension); contributions are summed over the minibatch. Regions and
    confidence weights come from the teacher record, the log term from the
    student scores.
    """
    p = _as_batch(student_scores, "student_scores")
    if not isinstance(records, (list, tuple)):
        records = [records]
    if len(records) != p.shape[0]:
        raise ShapeError(f"need one record per batch sample ({p.shape[0]}), got {len(records)}")

    total = p.new_zeros(())
    num_classes = p.shape[-1]
    for n, record in enumerate(records):
        if record.soft_label.shape != tuple(p.shape[1:]):
            raise ShapeError(
                f"record {n} soft label shape {record.soft_label.shape} != scores {tuple(p.shape[1:])}"
            )
        assignment = class_region_partition(record.soft_label)
        mass = class_region_mass(assignment, record.confidence, num_classes)
        zeta = zeta_weights(mass, config.min_class_mass)
        # per-pixel coefficient zeta_{assigned class} * w_t; zero where gated out
        coeff = zeta[assignment] * record.confidence.astype(np.float64)
        if not coeff.any():
            continue
        coeff_t = torch.as_tensor(coeff, dtype=p.dtype)
        assigned = torch.as_tensor(assignment[None, :, :, None])
        p_assigned = torch.gather(p[n][None], 3, assigned)[0, :, :, 0]
        log_p = torch.log(torch.clamp(p_assigned, LOG_CLAMP_EPS, 1.0))
        total = total - (coeff_t * log_p).sum()
    return total


def semi_supervised_loss(labeled_term, unlabeled_term, unlabeled_weight: float = 1.0):
    """Sum of the labeled and unlabeled terms (optional coefficient, default 1)."""
    for name, term in (("labeled", labeled_term), ("unlabeled", unlabeled_term)):
        value = term.detach() if torch.is_tensor(term) else torch.as_tensor(float(term))
        if not torch.isfinite(value).all():
            raise ConfigurationError(f"{name} loss term is not finite: {value}")
    return labeled_term + unlabeled_weight * unlabeled_term


def one_hot(label_map: np.ndarray, num_classes: int) -> np.ndarray:
    """(H, W) integer labels -> (H, W, C) float32 one-hot grid."""
    labels = np.asarray(label_map)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ShapeError(f"labels must lie in [0, {num_classes - 1}]")
    return np.eye(num_classes, dtype=np.float32)[labels]


def inverse_frequency_weights(label_maps, num_classes: int) -> np.ndarray:
    """Per-class weights ~ 1/frequency over the given label maps, mean 1.

    Classes absent from the maps get weight 0 (they cannot contribute to the
    loss anyway); the remaining weights are rescaled to mean 1 over present
    classes.
    """
    counts = np.zeros(num_classes, dtype=np.float64)
    for labels in label_maps:
        counts += np.bincount(np.asarray(labels).ravel(), minlength=num_classes)
    if counts.sum() == 0:
        raise ShapeError("no pixels provided")
    weights = np.zeros(num_classes, dtype=np.float64)
    present = counts > 0
    weights[present] = 1.0 / counts[present]
    weights[present] *= present.sum() / weights[present].sum()
    return weights
