"""Dropout variational inference over a trained segmentation model.

The teacher's predictive distribution for an image is estimated by K
stochastic forward passes with spatial dropout enabled; the per-pass seeds
are derived from ``(base_seed, k)``, so the whole procedure is reproducible.
From the averaged score map we compute:

* uncertainty ``u`` = per-pixel Shannon entropy of the mean scores (nats,
  so ``u`` lies in ``[0, ln C]``; zero-probability terms contribute 0)
* confidence ``w = exp(-alpha * u)`` in ``(0, 1]``; ``alpha = 0`` makes every
  pixel fully trusted, larger ``alpha`` suppresses uncertain pixels harder

``generate_soft_labels`` bundles soft labels, uncertainty and confidence with
provenance into one record per image. Records can be written to a chunked
binary container (JSON header + raw float32 chunks) that round-trips
bit-exactly; the byte layout is documented in README.md and enforced by
``save_soft_label_record`` / ``load_soft_label_record``.
"""

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, ShapeError
from .model import DenseUNet, predict_scores, validate_score_map
from .seeding import derive_seed

_STORE_MAGIC = b"SOFTLAB1"


@dataclass(frozen=True)
class McConfig:
    """Monte Carlo inference settings: K passes, confidence sharpness, seed."""

    num_passes: int = 10
    alpha: float = 2.0
    base_seed: int = 0

    def __post_init__(self):
        if self.num_passes < 1:
            raise ConfigurationError(f"num_passes must be >= 1, got {self.num_passes}")
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")


def pass_seed(base_seed: int, k: int) -> int:
    """Seed of stochastic pass ``k`` (0-based). Documented, stable derivation."""
    return derive_seed(base_seed, "mc-pass", k)


def mc_mean_prediction(model: DenseUNet, image: np.ndarray, mc: McConfig) -> np.ndarray:
    """Average of K seeded stochastic passes, (H, W, C) float64.

    Pass k runs with dropout active under ``pass_seed(mc.base_seed, k)``.
    The mean of valid score maps is itself a valid score map. With
    ``dropout_rate == 0`` every pass equals the deterministic forward.
    """
    total = None
    for k in range(mc.num_passes):
        scores = predict_scores(model, image, dropout_active=True, seed=pass_seed(mc.base_seed, k))
        total = scores.astype(np.float64) if total is None else total + scores
    return total / mc.num_passes


def entropy_map(mean_scores: np.ndarray) -> np.ndarray:
    """Per-pixel Shannon entropy (nats) of an (H, W, C) score map.

    Terms with score 0 contribute 0 (the x*log x -> 0 limit convention).
    """
    p = validate_score_map(mean_scores).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return np.maximum(-terms.sum(axis=-1), 0.0)


def confidence_map(uncertainty: np.ndarray, alpha: float) -> np.ndarray:
    """Elementwise ``exp(-alpha * u)``; 1 where u = 0, decreasing in u for alpha > 0."""
    if alpha < 0:
        raise ConfigurationError(f"alpha must be >= 0, got {alpha}")
    u = np.asarray(uncertainty, dtype=np.float64)
    if u.min() < 0:
        raise DataError("uncertainty values must be >= 0")
    return np.exp(-alpha * u)


@dataclass
class SoftLabelRecord:
    """Teacher output bundle for one unlabeled image."""

    soft_label: np.ndarray       # (H, W, C) float32
    uncertainty: np.ndarray      # (H, W) float32, nats
    confidence: np.ndarray       # (H, W) float32 in (0, 1]
    source_image_id: str
    teacher_checkpoint_id: str
    mc_config: McConfig

    def __post_init__(self):
        self.soft_label = np.asarray(self.soft_label, dtype=np.float32)
        self.uncertainty = np.asarray(self.uncertainty, dtype=np.float32)
        self.confidence = np.asarray(self.confidence, dtype=np.float32)
        if self.soft_label.ndim != 3:
            raise ShapeError(f"soft_label must be (H, W, C), got {self.soft_label.shape}")
        spatial = self.soft_label.shape[:2]
        if self.uncertainty.shape != spatial or self.confidence.shape != spatial:
            raise ShapeError("soft_label, uncertainty and confidence must share spatial shape")
        if not self.source_image_id or not self.teacher_checkpoint_id:
            raise DataError("provenance identifiers must be non-empty")


def generate_soft_labels(
    teacher: DenseUNet,
    images,
    mc: McConfig,
    image_ids=None,
    teacher_checkpoint_id: str | None = None,
) -> list[SoftLabelRecord]:
    """One SoftLabelRecord per image: MC mean -> entropy -> confidence.

    ``image_ids`` defaults to positional ids; the checkpoint id defaults to
    the teacher's parameter digest.
    """
    from .checkpoints import model_digest

    images = list(images)
    if image_ids is None:
        image_ids = [f"image-{i:05d}" for i in range(len(images))]
    image_ids = [str(i) for i in image_ids]
    if len(image_ids) != len(images):
        raise ShapeError("need exactly one id per image")
    ckpt_id = teacher_checkpoint_id or model_digest(teacher)

    records = []
    for image, image_id in zip(images, image_ids):
        mean = mc_mean_prediction(teacher, image, mc)
        u = entropy_map(mean)
        w = confidence_map(u, mc.alpha)
        records.append(
            SoftLabelRecord(
                soft_label=mean.astype(np.float32),
                uncertainty=u.astype(np.float32),
                confidence=w.astype(np.float32),
                source_image_id=image_id,
                teacher_checkpoint_id=ckpt_id,
                mc_config=mc,
            )
        )
    return records


def save_soft_label_record(record: SoftLabelRecord, path) -> None:
    """Write the chunked binary container (see README for the byte layout)."""
    chunks = [
        ("soft_label", record.soft_label),
        ("uncertainty", record.uncertainty),
        ("confidence", record.confidence),
    ]
    descriptors = []
    offset = 0
    payloads = []
    for name, arr in chunks:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        descriptors.append(
            {"name": name, "dtype": "<f4", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format_version": 1,
        "source_image_id": record.source_image_id,
        "teacher_checkpoint_id": record.teacher_checkpoint_id,
        "mc_config": asdict(record.mc_config),
        "chunks": descriptors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_STORE_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for raw in payloads:
            fh.write(raw)


def load_soft_label_record(path) -> SoftLabelRecord:
    """Read a container written by :func:`save_soft_label_record` (bit-exact)."""
    with open(Path(path), "rb") as fh:
        magic = fh.read(len(_STORE_MAGIC))
        if magic != _STORE_MAGIC:
            raise DataError(f"{path}: not a soft-label container (bad magic {magic!r})")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for desc in header["chunks"]:
        raw = payload[desc["offset"]: desc["offset"] + desc["nbytes"]]
        arrays[desc["name"]] = np.frombuffer(raw, dtype=desc["dtype"]).reshape(desc["shape"]).copy()
    return SoftLabelRecord(
        soft_label=arrays["soft_label"],
        uncertainty=arrays["uncertainty"],
        confidence=arrays["confidence"],
        source_image_id=header["source_image_id"],
        teacher_checkpoint_id=header["teacher_checkpoint_id"],
        mc_config=McConfig(**header["mc_config"]),
    )
