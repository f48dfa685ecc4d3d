"""Training loops for the teacher and the student.

The teacher is trained on labeled data with class-weighted cross entropy.
The student then trains from mixed minibatches: per iteration it consumes one
labeled and one unlabeled minibatch, obtains teacher soft labels, confidence
and uncertainty for the unlabeled images (online by default; an optional
cache reuses records per image, which is exact because soft-label generation
is a pure function of (teacher, image, mc seed)), and takes one Adam step on
``labeled_loss + unlabeled_loss``. The teacher stays frozen throughout.

All stochasticity (weight init, dropout masks, shuffling, augmentation) is
derived from the run seed keyed by iteration, so runs are reproducible and a
resumed run continues exactly where it stopped. The learning rate starts at
``initial_learning_rate`` and is multiplied by ``lr_decay_factor`` after
``lr_decay_at_iteration`` iterations. Validation runs every
``validation_interval`` iterations (deterministic forward, unit class
weights); training stops early when the best validation loss has not
improved by more than ``early_stop_min_delta`` for ``early_stop_patience``
consecutive checks. The returned model is the best-validation checkpoint.

Augmentation (mirror + small rotation) applies to labeled pairs only;
soft labels are generated from, and the student sees, the un-augmented
unlabeled image so that teacher maps stay aligned with the student input.
"""

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .checkpoints import load_checkpoint, model_digest, read_train_extras, save_checkpoint
from .data import LabeledDataset, SampleStream, split_train_val
from .errors import ConfigurationError, DataError, TrainingDivergedError
from .inference import McConfig, generate_soft_labels
from .losses import (
    LossConfig,
    inverse_frequency_weights,
    labeled_loss,
    one_hot,
    semi_supervised_loss,
    unlabeled_loss,
)
from .model import ModelConfig, batched_scores, build_model, image_to_tensor
from .seeding import derive_seed


@dataclass
class TrainConfig:
    """Optimization schedule and loop control."""

    max_iterations: int = 40000
    initial_learning_rate: float = 1e-5
    lr_decay_factor: float = 0.1
    lr_decay_at_iteration: int = 10000
    labeled_batch: int = 1
    unlabeled_batch: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    validation_interval: int = 500
    early_stop_patience: int = 10
    early_stop_min_delta: float = 1e-4
    val_fraction: float = 0.2
    cache_soft_labels: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")
        if self.initial_learning_rate <= 0:
            raise ConfigurationError("initial_learning_rate must be > 0")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ConfigurationError("lr_decay_factor must be in (0, 1]")
        if self.labeled_batch < 1 or self.unlabeled_batch < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if self.validation_interval < 1:
            raise ConfigurationError("validation_interval must be >= 1")
        if self.early_stop_patience < 0:
            raise ConfigurationError("early_stop_patience must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must be in (0, 1)")

    def learning_rate_at(self, iteration: int) -> float:
        if iteration > self.lr_decay_at_iteration:
            return self.initial_learning_rate * self.lr_decay_factor
        return self.initial_learning_rate


@dataclass
class AugmentationConfig:
    mirror_probability: float = 0.5
    rotation_range_degrees: tuple = (-15.0, 15.0)

    def __post_init__(self):
        if not 0.0 <= self.mirror_probability <= 1.0:
            raise ConfigurationError("mirror_probability must be in [0, 1]")
        lo, hi = self.rotation_range_degrees
        if lo > hi:
            raise ConfigurationError("rotation range lower bound must be <= upper bound")


@dataclass
class MetricsRow:
    iteration: int
    learning_rate: float
    loss_labeled: float
    loss_unlabeled: float
    loss_total: float
    validation_loss: float
    wall_clock_s: float

    FIELDS = ("iteration", "learning_rate", "loss_labeled", "loss_unlabeled",
              "loss_total", "validation_loss", "wall_clock_s")


@dataclass
class TrainState:
    iteration: int = 0
    learning_rate: float = 0.0
    best_validation_loss: float = math.inf
    best_iteration: int = 0
    history: list = field(default_factory=list)
    labeled_batches: int = 0
    unlabeled_batches: int = 0
    updates: int = 0

    def to_json(self):
        return {
            "iteration": self.iteration,
            "learning_rate": self.learning_rate,
            "best_validation_loss": self.best_validation_loss,
            "best_iteration": self.best_iteration,
            "labeled_batches": self.labeled_batches,
            "unlabeled_batches": self.unlabeled_batches,
            "updates": self.updates,
            "history": [{name: getattr(row, name) for name in MetricsRow.FIELDS}
                        for row in self.history],
        }

    @classmethod
    def from_json(cls, payload):
        payload = dict(payload)
        history = [MetricsRow(**row) for row in payload.pop("history", [])]
        return cls(history=history, **payload)


@dataclass
class TrainResult:
    model: object            # best-validation checkpoint
    state: TrainState
    best_checkpoint: Path | None = None
    last_checkpoint: Path | None = None
    metrics_csv: Path | None = None
    checkpoint_id: str = ""


def augment(image: np.ndarray, label_map: np.ndarray, cfg: AugmentationConfig, seed: int):
    """Mirror + random rotation applied identically to image and labels.

    Draw order: mirror coin first, then the angle. Images are interpolated
    bilinearly, labels by nearest neighbor; out-of-frame pixels are filled
    with 0.0 intensity / background class 0.
    """
    rng = np.random.default_rng(derive_seed(seed, "augment"))
    image = np.asarray(image, dtype=np.float32)
    label_map = np.asarray(label_map)
    if image.shape != label_map.shape:
        raise DataError("image and label map must be spatially aligned")
    if rng.random() < cfg.mirror_probability:
        image = image[:, ::-1].copy()
        label_map = label_map[:, ::-1].copy()
    lo, hi = cfg.rotation_range_degrees
    angle = rng.uniform(lo, hi)
    if angle != 0.0:
        image = ndimage.rotate(image, angle, reshape=False, order=1, mode="constant", cval=0.0)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        label_map = ndimage.rotate(label_map, angle, reshape=False, order=0, mode="constant", cval=0)
    return image, label_map


def validation_loss(model, validation_set, class_weights=None) -> float:
    """Mean labeled loss over a validation set, dropout off, unit weights by default."""
    if len(validation_set) == 0:
        raise DataError("validation set must be non-empty")
    num_classes = model.config.num_classes
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            total = 0.0
            for sample in validation_set:
                x = image_to_tensor(sample.image, model.config.input_channels)
                probs = batched_scores(model, x, dropout_seeds=None)
                y = torch.from_numpy(one_hot(sample.label_map, num_classes))[None]
                total += float(labeled_loss(probs, y, class_weights))
    finally:
        model.train(was_training)
    return total / len(validation_set)


def _scalar(value) -> float:
    return float(value.detach()) if torch.is_tensor(value) else float(value)


def _write_metrics_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MetricsRow.FIELDS)
        for row in rows:
            writer.writerow([getattr(row, name) for name in MetricsRow.FIELDS])
    return path


def _train_forward(model, images, seed_key, train_cfg, grad=True):
    """Stack images into a batch and run a training-mode stochastic forward."""
    batch = torch.cat([image_to_tensor(im, model.config.input_channels) for im in images], dim=0)
    seeds = [derive_seed(train_cfg.seed, *seed_key, i) for i in range(batch.shape[0])]
    model.train()
    if grad:
        return batched_scores(model, batch, dropout_seeds=seeds)
    with torch.no_grad():
        return batched_scores(model, batch, dropout_seeds=seeds)


class _Loop:
    """Shared machinery for supervised (teacher) and semi-supervised (student) runs."""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None, run_label="model"):
        self.model_cfg = model_cfg
        self.train_cfg = train_cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.run_label = run_label

    def run(self, labeled: LabeledDataset, step_fn, resume_from=None):
        cfg = self.train_cfg
        if len(labeled) == 0:
            raise DataError("labeled dataset must be non-empty")
        train_set, val_set = split_train_val(labeled, cfg.val_fraction, cfg.seed)

        state = TrainState(learning_rate=cfg.initial_learning_rate)
        if resume_from is not None:
            model = load_checkpoint(resume_from, expected_config=self.model_cfg)
            state_json, opt_payload = read_train_extras(resume_from)
            if state_json is None:
                raise ConfigurationError(f"{resume_from} has no training state; cannot resume")
            state = TrainState.from_json(state_json)
        else:
            model = build_model(self.model_cfg, init_seed=derive_seed(cfg.seed, "init"))
            opt_payload = None

        optimizer = torch.optim.Adam(
            model.parameters(),
            lr=cfg.initial_learning_rate,
            betas=(cfg.adam_beta1, cfg.adam_beta2),
            eps=cfg.adam_epsilon,
        )
        if opt_payload is not None:
            full = optimizer.state_dict()
            full["state"] = opt_payload["state"]
            full["param_groups"] = opt_payload["param_groups"]
            optimizer.load_state_dict(full)

        stream = SampleStream(train_set, cfg.labeled_batch, derive_seed(cfg.seed, "labeled-stream"))
        stream.seek(state.iteration * cfg.labeled_batch)
        best_state_dict = {k: v.clone() for k, v in model.state_dict().items()}
        if resume_from is not None and self.out_dir is not None and (self.out_dir / "best.ckpt").exists():
            best_model = load_checkpoint(self.out_dir / "best.ckpt", expected_config=self.model_cfg)
            best_state_dict = {k: v.clone() for k, v in best_model.state_dict().items()}
        stale_checks = 0
        start_wall = time.monotonic()
        start_iteration = state.iteration

        best_path = last_path = metrics_path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            best_path = self.out_dir / "best.ckpt"
            last_path = self.out_dir / "last.ckpt"
            metrics_path = self.out_dir / "metrics.csv"

        for iteration in range(start_iteration + 1, cfg.max_iterations + 1):
            state.iteration = iteration
            state.learning_rate = cfg.learning_rate_at(iteration)
            for group in optimizer.param_groups:
                group["lr"] = state.learning_rate

            batch = stream.next_batch()
            state.labeled_batches += 1
            optimizer.zero_grad()
            loss_lab, loss_unlab = step_fn(model, batch, iteration, state)
            if not (math.isfinite(_scalar(loss_lab)) and math.isfinite(_scalar(loss_unlab))):
                raise TrainingDivergedError(
                    f"{self.run_label}: non-finite loss at iteration {iteration} "
                    f"(labeled={_scalar(loss_lab):.4g}, unlabeled={_scalar(loss_unlab):.4g})"
                )
            total = semi_supervised_loss(loss_lab, loss_unlab, 1.0)
            total.backward()
            optimizer.step()
            state.updates += 1

            if iteration % cfg.validation_interval == 0 or iteration == cfg.max_iterations:
                val = validation_loss(model, val_set)
                state.history.append(MetricsRow(
                    iteration=iteration,
                    learning_rate=state.learning_rate,
                    loss_labeled=_scalar(loss_lab),
                    loss_unlabeled=_scalar(loss_unlab),
                    loss_total=_scalar(total),
                    validation_loss=val,
                    wall_clock_s=time.monotonic() - start_wall,
                ))
                if val < state.best_validation_loss - cfg.early_stop_min_delta:
                    state.best_validation_loss = val
                    state.best_iteration = iteration
                    best_state_dict = {k: v.clone() for k, v in model.state_dict().items()}
                    stale_checks = 0
                    if best_path is not None:
                        save_checkpoint(model, best_path, extra_meta={"iteration": iteration})
                else:
                    stale_checks += 1
                if last_path is not None:
                    save_checkpoint(model, last_path, optimizer=optimizer,
                                    train_state_json=state.to_json())
                if metrics_path is not None:
                    _write_metrics_csv(state.history, metrics_path)
                if cfg.early_stop_patience and stale_checks >= cfg.early_stop_patience:
                    break

        model.load_state_dict(best_state_dict)
        model.eval()
        if metrics_path is not None:
            _write_metrics_csv(state.history, metrics_path)
        if last_path is not None and not last_path.exists():
            save_checkpoint(model, last_path, optimizer=optimizer, train_state_json=state.to_json())
        return TrainResult(
            model=model,
            state=state,
            best_checkpoint=best_path,
            last_checkpoint=last_path,
            metrics_csv=metrics_path,
            checkpoint_id=model_digest(model),
        )


def _resolve_class_weights(loss_cfg, train_set, num_classes):
    if loss_cfg is not None and loss_cfg.teacher_class_weights is not None:
        return np.asarray(loss_cfg.teacher_class_weights, dtype=np.float64)
    return inverse_frequency_weights((s.label_map for s in train_set), num_classes)


def train_teacher(
    labeled: LabeledDataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    aug_cfg: AugmentationConfig | None = None,
    out_dir=None,
    resume_from=None,
) -> TrainResult:
    """Supervised training with class-weighted cross entropy and augmentation."""
    aug_cfg = aug_cfg or AugmentationConfig()
    if len(labeled) == 0:
        raise DataError("labeled dataset must be non-empty")
    train_set, _ = split_train_val(labeled, train_cfg.val_fraction, train_cfg.seed)
    class_weights = _resolve_class_weights(loss_cfg, train_set, model_cfg.num_classes)

    def step(model, batch, iteration, state):
        images, labels = [], []
        for i, sample in enumerate(batch):
            im, lab = augment(sample.image, sample.label_map, aug_cfg,
                              derive_seed(train_cfg.seed, "aug", iteration, i))
            images.append(im)
            labels.append(lab)
        probs = _train_forward(model, images, ("dropout", iteration, "lab"), train_cfg)
        y = torch.from_numpy(np.stack([one_hot(lab, model_cfg.num_classes) for lab in labels]))
        return labeled_loss(probs, y, class_weights), torch.zeros(())

    loop = _Loop(model_cfg, train_cfg, out_dir=out_dir, run_label="teacher")
    return loop.run(labeled, step, resume_from=resume_from)


def train_student(
    teacher,
    labeled: LabeledDataset,
    unlabeled,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    mc_cfg: McConfig,
    loss_cfg: LossConfig | None = None,
    aug_cfg: AugmentationConfig | None = None,
    out_dir=None,
    resume_from=None,
) -> TrainResult:
    """Semi-supervised training guided by frozen-teacher soft labels.

    With an empty unlabeled set this degenerates to supervised training of
    the student (the unlabeled term is identically zero).
    """
    aug_cfg = aug_cfg or AugmentationConfig()
    loss_cfg = loss_cfg or LossConfig(alpha=mc_cfg.alpha)
    if len(labeled) == 0:
        raise DataError("labeled dataset must be non-empty")
    train_set, _ = split_train_val(labeled, train_cfg.val_fraction, train_cfg.seed)
    class_weights = _resolve_class_weights(loss_cfg, train_set, model_cfg.num_classes)
    teacher.eval()
    teacher_id = model_digest(teacher)

    unlabeled_stream = None
    if len(unlabeled) > 0:
        unlabeled_stream = SampleStream(unlabeled, train_cfg.unlabeled_batch,
                                        derive_seed(train_cfg.seed, "unlabeled-stream"))
    record_cache: dict = {}

    def teacher_records(indices):
        images = [unlabeled[i] for i in indices]
        ids = [unlabeled.ids[i] for i in indices]
        if not train_cfg.cache_soft_labels:
            return generate_soft_labels(teacher, images, mc_cfg, image_ids=ids,
                                        teacher_checkpoint_id=teacher_id)
        missing = [(im, iid) for im, iid in zip(images, ids) if iid not in record_cache]
        if missing:
            fresh = generate_soft_labels(teacher, [im for im, _ in missing], mc_cfg,
                                         image_ids=[iid for _, iid in missing],
                                         teacher_checkpoint_id=teacher_id)
            for record in fresh:
                record_cache[record.source_image_id] = record
        return [record_cache[iid] for iid in ids]

    def step(model, batch, iteration, state):
        images, labels = [], []
        for i, sample in enumerate(batch):
            im, lab = augment(sample.image, sample.label_map, aug_cfg,
                              derive_seed(train_cfg.seed, "aug", iteration, i))
            images.append(im)
            labels.append(lab)
        probs = _train_forward(model, images, ("dropout", iteration, "lab"), train_cfg)
        y = torch.from_numpy(np.stack([one_hot(lab, model_cfg.num_classes) for lab in labels]))
        loss_lab = labeled_loss(probs, y, class_weights)

        if unlabeled_stream is None:
            return loss_lab, torch.zeros(())
        indices = unlabeled_stream.indices_at((iteration - 1) * train_cfg.unlabeled_batch)
        records = teacher_records(indices)
        state.unlabeled_batches += 1
        u_probs = _train_forward(model, [unlabeled[i] for i in indices],
                                 ("dropout", iteration, "unlab"), train_cfg)
        loss_unlab = unlabeled_loss(u_probs, records, loss_cfg) * loss_cfg.unlabeled_weight
        return loss_lab, loss_unlab

    loop = _Loop(model_cfg, train_cfg, out_dir=out_dir, run_label="student")
    return loop.run(labeled, step, resume_from=resume_from)
