"""Checkpoint archives.

A checkpoint is a single zip file containing:

* ``config.json``   - the ModelConfig as JSON text
* ``meta.json``     - format version, a content digest, optional extras
* ``params/<name>.npy`` - one NPY member per entry of the model state dict
  (weights, biases, BN running statistics), under its state-dict name

Arrays are stored raw, so save -> load -> save round-trips bit-exactly.
Training bundles (``last`` checkpoints usable for resume) extend the same
archive with ``optimizer/...`` arrays and ``train_state.json``.
"""

import hashlib
import io
import json
import zipfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError
from .model import DenseUNet, ModelConfig, build_model

FORMAT_VERSION = 1


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def _load_npy(data: bytes) -> np.ndarray:
    return np.load(io.BytesIO(data), allow_pickle=False)


def state_dict_arrays(model: DenseUNet) -> dict[str, np.ndarray]:
    return {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}


def checkpoint_digest(arrays: dict[str, np.ndarray]) -> str:
    """Short content id: SHA-256 over names and raw bytes, first 12 hex chars."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()[:12]


def save_checkpoint(model: DenseUNet, path, extra_meta: dict | None = None,
                    optimizer: torch.optim.Optimizer | None = None,
                    train_state_json: dict | None = None) -> str:
    """Write a checkpoint archive; returns its content digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = state_dict_arrays(model)
    digest = checkpoint_digest(arrays)
    meta = {"format_version": FORMAT_VERSION, "digest": digest}
    if extra_meta:
        meta.update(extra_meta)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("config.json", json.dumps(asdict(model.config), indent=2))
        zf.writestr("meta.json", json.dumps(meta, indent=2))
        for name, arr in arrays.items():
            zf.writestr(f"params/{name}.npy", _npy_bytes(arr))
        if optimizer is not None:
            opt_state = optimizer.state_dict()
            skeleton = {"param_groups": opt_state["param_groups"], "state_keys": {}}
            for idx, entry in opt_state["state"].items():
                skeleton["state_keys"][str(idx)] = sorted(entry)
                for key, value in entry.items():
                    arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
                    zf.writestr(f"optimizer/{idx}/{key}.npy", _npy_bytes(arr))
            zf.writestr("optimizer.json", json.dumps(skeleton))
        if train_state_json is not None:
            zf.writestr("train_state.json", json.dumps(train_state_json, indent=2))
    return digest


def read_checkpoint(path):
    """Return (ModelConfig, state-dict arrays, meta dict) from an archive."""
    with zipfile.ZipFile(Path(path), "r") as zf:
        config = ModelConfig(**json.loads(zf.read("config.json")))
        meta = json.loads(zf.read("meta.json"))
        arrays = {}
        for name in zf.namelist():
            if name.startswith("params/") and name.endswith(".npy"):
                arrays[name[len("params/"):-len(".npy")]] = _load_npy(zf.read(name))
    return config, arrays, meta


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> DenseUNet:
    """Rebuild a model from an archive; loading is bit-exact.

    If ``expected_config`` is given and differs from the stored one, raise
    instead of producing a silently mismatched model.
    """
    config, arrays, _ = read_checkpoint(path)
    if expected_config is not None and expected_config != config:
        raise ConfigurationError(
            f"checkpoint config {config} does not match expected {expected_config}"
        )
    model = build_model(config)
    state = {name: torch.from_numpy(arr.copy()) for name, arr in arrays.items()}
    model.load_state_dict(state, strict=True)
    model.eval()
    return model


def read_train_extras(path):
    """Return (train_state dict or None, optimizer payload or None)."""
    with zipfile.ZipFile(Path(path), "r") as zf:
        names = set(zf.namelist())
        train_state = json.loads(zf.read("train_state.json")) if "train_state.json" in names else None
        optimizer = None
        if "optimizer.json" in names:
            skeleton = json.loads(zf.read("optimizer.json"))
            state = {}
            for idx, keys in skeleton["state_keys"].items():
                state[int(idx)] = {
                    key: torch.from_numpy(_load_npy(zf.read(f"optimizer/{idx}/{key}.npy")).copy())
                    for key in keys
                }
            optimizer = {"param_groups": skeleton["param_groups"], "state": state}
    return train_state, optimizer


def model_digest(model: DenseUNet) -> str:
    """Content digest of a live model's parameters (provenance id)."""
    return checkpoint_digest(state_dict_arrays(model))
