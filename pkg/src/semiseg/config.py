"""Composite run configuration with file/flag resolution.

A run config bundles every sub-config plus dataset/checkpoint paths. The CLI
resolves values with the precedence ``flags > config file > defaults`` and
records the fully resolved result as JSON next to the command's outputs, so
any run can be reproduced from that file alone.

The master ``seed`` pins the whole pipeline: sub-seeds (synthetic generator,
training, MC passes) that are not set explicitly are derived from it.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import SynthConfig
from .errors import ConfigurationError
from .inference import McConfig
from .losses import LossConfig
from .model import ModelConfig
from .seeding import derive_seed
from .training import AugmentationConfig, TrainConfig

RUN_CONFIG_NAME = "run_config.json"


def _deep_update(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            prior = out.get(key)
            out[key] = _deep_update(prior if isinstance(prior, dict) else {}, value)
        else:
            out[key] = value
    return out


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return list(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_jsonable(v) for v in value]
    return value


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/run"
    data_manifest: str | None = None
    teacher_checkpoint: str | None = None
    n_labeled: int = 20
    n_unlabeled: int = 200
    n_test: int = 50
    model: dict = field(default_factory=dict)  # ModelConfig overrides; num_classes may come from data
    mc: McConfig = field(default_factory=McConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def model_config(self, num_classes_from_data: int | None = None) -> ModelConfig:
        overrides = dict(self.model)
        if "num_classes" not in overrides:
            if num_classes_from_data is None:
                raise ConfigurationError("model.num_classes is not set and no dataset provides it")
            overrides["num_classes"] = num_classes_from_data
        return ModelConfig(**overrides)

    def to_json_dict(self) -> dict:
        payload = {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data_manifest": self.data_manifest,
            "teacher_checkpoint": self.teacher_checkpoint,
            "n_labeled": self.n_labeled,
            "n_unlabeled": self.n_unlabeled,
            "n_test": self.n_test,
            "model": _jsonable(self.model),
            "mc": _jsonable(asdict(self.mc)),
            "loss": _jsonable(asdict(self.loss)),
            "train": _jsonable(asdict(self.train)),
            "augment": _jsonable(asdict(self.augment)),
            "synth": _jsonable(asdict(self.synth)),
        }
        return payload

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / RUN_CONFIG_NAME
        path.write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True))
        return path


def resolve_run_config(config_file=None, flag_overrides: dict | None = None) -> RunConfig:
    """Merge defaults, a JSON config file, and flag overrides into a RunConfig.

    ``flag_overrides`` uses the same nested layout as the file; ``None``
    values are ignored. Sub-seeds absent from both sources are derived from
    the master seed.
    """
    merged: dict = {}
    if config_file is not None:
        file_payload = json.loads(Path(config_file).read_text())
        if not isinstance(file_payload, dict):
            raise ConfigurationError(f"{config_file}: run config must be a JSON object")
        merged = _deep_update(merged, file_payload)
    if flag_overrides:
        merged = _deep_update(merged, flag_overrides)

    seed = int(merged.get("seed", 0))
    train_d = dict(merged.get("train", {}))
    synth_d = dict(merged.get("synth", {}))
    mc_d = dict(merged.get("mc", {}))
    train_d.setdefault("seed", derive_seed(seed, "train"))
    synth_d.setdefault("seed", derive_seed(seed, "synth"))
    mc_d.setdefault("base_seed", derive_seed(seed, "mc"))

    loss_d = dict(merged.get("loss", {}))
    # --alpha shorthand applies to both the confidence map and the loss
    if "alpha" in mc_d and "alpha" not in loss_d:
        loss_d["alpha"] = mc_d["alpha"]

    synth_d["image_size"] = tuple(synth_d.get("image_size", SynthConfig().image_size))
    if "layer_intensity_means" in synth_d and synth_d["layer_intensity_means"] is not None:
        synth_d["layer_intensity_means"] = tuple(synth_d["layer_intensity_means"])
    aug_d = dict(merged.get("augment", {}))
    if "rotation_range_degrees" in aug_d:
        aug_d["rotation_range_degrees"] = tuple(aug_d["rotation_range_degrees"])

    known = {"seed", "output_dir", "data_manifest", "teacher_checkpoint",
             "n_labeled", "n_unlabeled", "n_test", "model", "mc", "loss", "train", "augment", "synth"}
    unknown = set(merged) - known
    if unknown:
        raise ConfigurationError(f"unknown run config keys: {sorted(unknown)}")

    return RunConfig(
        seed=seed,
        output_dir=str(merged.get("output_dir", RunConfig.output_dir)),
        data_manifest=merged.get("data_manifest"),
        teacher_checkpoint=merged.get("teacher_checkpoint"),
        n_labeled=int(merged.get("n_labeled", RunConfig.n_labeled)),
        n_unlabeled=int(merged.get("n_unlabeled", RunConfig.n_unlabeled)),
        n_test=int(merged.get("n_test", RunConfig.n_test)),
        model=dict(merged.get("model", {})),
        mc=McConfig(**mc_d),
        loss=LossConfig(**loss_d),
        train=TrainConfig(**train_d),
        augment=AugmentationConfig(**aug_d),
        synth=SynthConfig(**synth_d),
    )
