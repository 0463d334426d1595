"""Checkpoint container: a one-line JSON header (config, array manifest,
format version, training-heads flag) followed by raw little-endian arrays in
manifest order. The same container backs model checkpoints and the extra
arrays of training resume states.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .model import Model, ModelConfig

FORMAT_VERSION = 1
_HEAD_PREFIXES = ("type_head.", "desc_head.")


class CheckpointError(RuntimeError):
    """Raised for unreadable or inconsistent checkpoint files."""


def _is_head_array(name: str) -> bool:
    return name.startswith(_HEAD_PREFIXES)


def write_container(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    manifest = [
        {"name": name, "shape": list(arr.shape), "dtype": "<f8"}
        for name, arr in arrays.items()
    ]
    header = dict(header, format_version=FORMAT_VERSION, arrays=manifest)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header in {path}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version in {path}")
    arrays = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"truncated array {entry['name']!r} in {path}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"trailing bytes after arrays in {path}")
    return header, arrays


def model_arrays(model: Model, include_training_heads: bool) -> dict[str, np.ndarray]:
    arrays = {}
    for name, tensor in model.state_dict().items():
        if _is_head_array(name) and not include_training_heads:
            continue
        arrays[name] = tensor.detach().numpy().astype("<f8")
    return arrays


def fingerprint(model: Model) -> str:
    """Hash of the inference parameters (training heads excluded), so a
    full training checkpoint and its stripped copy share one fingerprint."""
    digest = hashlib.sha256()
    arrays = model_arrays(model, include_training_heads=False)
    for name in sorted(arrays):
        arr = arrays[name]
        digest.update(name.encode("utf-8"))
        digest.update(str(arr.shape).encode("utf-8"))
        digest.update(arr.tobytes())
    return digest.hexdigest()


def save_checkpoint(
    model: Model, path: str | Path, include_training_heads: bool | None = None
) -> None:
    """Write a model checkpoint; training heads are dropped when requested
    (or absent), producing an inference-only file."""
    if include_training_heads is None:
        include_training_heads = model.has_training_heads
    if include_training_heads and not model.has_training_heads:
        raise CheckpointError("model has no training heads to save")
    header = {
        "kind": "model",
        "config": asdict(model.config),
        "training_heads": include_training_heads,
    }
    write_container(path, header, model_arrays(model, include_training_heads))


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    header, arrays = read_container(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path} is not a model checkpoint")
    config = ModelConfig(**header["config"])
    model = Model(config, with_training_heads=header["training_heads"])
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    missing = set(model.state_dict()) - set(state)
    extra = set(state) - set(model.state_dict())
    if missing or extra:
        raise CheckpointError(
            f"checkpoint arrays do not match the model (missing {sorted(missing)}, "
            f"extra {sorted(extra)})"
        )
    model.load_state_dict(state)
    return model, header
