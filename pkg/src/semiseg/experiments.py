"""Desk-scale comparison of training modes on the synthetic corpus.

For each seed: generate fresh splits, train a teacher on the labeled set,
train a fully supervised baseline at the student's iteration budget, then
train two students from the frozen teacher: one with confidence weighting
(alpha > 0) and one that trusts every soft label (alpha = 0). All models are
scored on the held-out test split, and the weighted student additionally gets
a confident-subset report from its own MC-dropout confidence.

The per-seed rows and cross-seed means feed the qualitative ordering checks:
weighted >= plain pseudo-labels, and weighted >= its fully supervised
baseline at the same labeled-set size.
"""

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import SynthConfig, generate_synthetic_dataset
from .evaluation import confident_subset_report, evaluate_model
from .inference import McConfig
from .losses import LossConfig
from .model import ModelConfig
from .seeding import derive_seed
from .training import TrainConfig, train_student, train_teacher


@dataclass
class ComparisonSettings:
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(image_size=(64, 64), num_classes=4))
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        num_classes=4, units_per_block=4, filters_per_unit=4, num_encoder_blocks=2))
    n_labeled: int = 20
    n_unlabeled: int = 200
    n_test: int = 50
    teacher_iterations: int = 2000
    student_iterations: int = 4000
    num_passes: int = 10
    alpha: float = 2.0
    learning_rate: float = 1e-3
    validation_interval: int = 200
    seeds: tuple = (0, 1, 2)
    confident_threshold: float = 0.5


@dataclass
class SeedOutcome:
    seed: int
    teacher_dice: float
    supervised_dice: float
    weighted_student_dice: float
    plain_student_dice: float
    confident_dice: float
    confident_fraction: float
    wall_clock_s: float


@dataclass
class ComparisonResult:
    settings: ComparisonSettings
    outcomes: list

    def mean(self, attr: str) -> float:
        return sum(getattr(o, attr) for o in self.outcomes) / len(self.outcomes)

    def summary(self) -> dict:
        return {
            "seeds": [o.seed for o in self.outcomes],
            "mean_supervised_dice": self.mean("supervised_dice"),
            "mean_weighted_student_dice": self.mean("weighted_student_dice"),
            "mean_plain_student_dice": self.mean("plain_student_dice"),
            "mean_confident_dice": self.mean("confident_dice"),
            "mean_confident_fraction": self.mean("confident_fraction"),
        }


def _train_cfg(settings: ComparisonSettings, iterations: int, seed: int) -> TrainConfig:
    return TrainConfig(
        max_iterations=iterations,
        initial_learning_rate=settings.learning_rate,
        lr_decay_factor=0.1,
        lr_decay_at_iteration=max(1, iterations // 2),
        validation_interval=settings.validation_interval,
        early_stop_patience=0,  # run the full pinned budget
        cache_soft_labels=True,
        seed=seed,
    )


def run_seed(settings: ComparisonSettings, seed: int, out_dir=None, log=None) -> SeedOutcome:
    def say(msg):
        if log:
            log(f"[seed {seed}] {msg}")

    start = time.monotonic()
    synth = replace(settings.synth, seed=derive_seed(seed, "synth-data"))
    labeled, unlabeled, test = generate_synthetic_dataset(
        synth, settings.n_labeled, settings.n_unlabeled, settings.n_test
    )
    base = Path(out_dir) / f"seed{seed}" if out_dir is not None else None

    teacher_cfg = _train_cfg(settings, settings.teacher_iterations, derive_seed(seed, "teacher"))
    teacher = train_teacher(labeled, settings.model, teacher_cfg,
                            out_dir=base / "teacher" if base else None)
    teacher_dice = evaluate_model(teacher.model, test).mean_dice
    say(f"teacher Dice {teacher_dice:.4f}")

    supervised_cfg = _train_cfg(settings, settings.student_iterations, derive_seed(seed, "supervised"))
    supervised = train_teacher(labeled, settings.model, supervised_cfg,
                               out_dir=base / "supervised" if base else None)
    supervised_dice = evaluate_model(supervised.model, test).mean_dice
    say(f"supervised baseline Dice {supervised_dice:.4f}")

    student_seed = derive_seed(seed, "student")
    students = {}
    for name, alpha in (("weighted", settings.alpha), ("plain", 0.0)):
        mc = McConfig(num_passes=settings.num_passes, alpha=alpha, base_seed=derive_seed(seed, "mc"))
        cfg = _train_cfg(settings, settings.student_iterations, student_seed)
        result = train_student(
            teacher.model, labeled, unlabeled, settings.model, cfg, mc,
            loss_cfg=LossConfig(alpha=alpha),
            out_dir=base / f"student_{name}" if base else None,
        )
        students[name] = result
        say(f"{name} student Dice {evaluate_model(result.model, test).mean_dice:.4f}")

    weighted_dice = evaluate_model(students["weighted"].model, test).mean_dice
    plain_dice = evaluate_model(students["plain"].model, test).mean_dice
    conf = confident_subset_report(
        students["weighted"].model, test,
        mc=McConfig(num_passes=settings.num_passes, alpha=settings.alpha,
                    base_seed=derive_seed(seed, "conf-eval")),
        threshold=settings.confident_threshold,
    )
    return SeedOutcome(
        seed=seed,
        teacher_dice=teacher_dice,
        supervised_dice=supervised_dice,
        weighted_student_dice=weighted_dice,
        plain_student_dice=plain_dice,
        confident_dice=conf.mean_dice,
        confident_fraction=conf.confident_fraction,
        wall_clock_s=time.monotonic() - start,
    )


def run_comparison(settings: ComparisonSettings, out_dir=None, log=None) -> ComparisonResult:
    outcomes = [run_seed(settings, seed, out_dir=out_dir, log=log) for seed in settings.seeds]
    result = ComparisonResult(settings=settings, outcomes=outcomes)
    if out_dir is not None:
        write_comparison_csv(result, Path(out_dir) / "comparison.csv")
    return result


def write_comparison_csv(result: ComparisonResult, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["seed", "teacher_dice", "supervised_dice", "weighted_student_dice",
              "plain_student_dice", "confident_dice", "confident_fraction", "wall_clock_s"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for o in result.outcomes:
            writer.writerow([getattr(o, f) for f in fields])
        summary = result.summary()
        writer.writerow([])
        writer.writerow(["mean", "", summary["mean_supervised_dice"],
                         summary["mean_weighted_student_dice"], summary["mean_plain_student_dice"],
                         summary["mean_confident_dice"], summary["mean_confident_fraction"], ""])
    return path
