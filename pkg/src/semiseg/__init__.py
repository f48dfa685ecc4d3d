"""Uncertainty-guided student-teacher semi-supervised segmentation.

A Bayesian (MC-dropout) teacher produces soft labels with pixel-wise
confidence for unlabeled images; a student trains on a confidence-weighted
combination of labeled and unlabeled cross-entropy terms.
"""

from .checkpoints import load_checkpoint, model_digest, save_checkpoint
from .data import (
    BoundarySet,
    LabeledDataset,
    LabeledSample,
    SampleStream,
    SynthConfig,
    UnlabeledDataset,
    boundaries_to_labels,
    generate_synthetic_dataset,
    load_dataset_from_manifest,
    save_dataset_to_dir,
)
from .errors import (
    ConfigurationError,
    DataError,
    SemisegError,
    ShapeError,
    TrainingDivergedError,
)
from .evaluation import (
    DiceReport,
    PrCurve,
    confident_subset_report,
    dice,
    evaluate_model,
    precision_recall_curve,
    render_overlays,
)
from .inference import (
    McConfig,
    SoftLabelRecord,
    confidence_map,
    entropy_map,
    generate_soft_labels,
    load_soft_label_record,
    mc_mean_prediction,
    save_soft_label_record,
)
from .losses import (
    LossConfig,
    class_region_mass,
    class_region_partition,
    inverse_frequency_weights,
    labeled_loss,
    one_hot,
    semi_supervised_loss,
    unlabeled_loss,
    zeta_weights,
)
from .model import (
    DenseUNet,
    ModelConfig,
    build_model,
    predict_scores,
    validate_score_map,
)
from .seeding import derive_seed
from .training import (
    AugmentationConfig,
    TrainConfig,
    TrainState,
    augment,
    train_student,
    train_teacher,
    validation_loss,
)

__version__ = "0.1.0"
