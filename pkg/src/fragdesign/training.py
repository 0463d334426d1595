"""Training loop: gradient accumulation to an effective batch, global-norm
clipping, decoupled-weight-decay adaptive-moment updates, and a linear
warmup / plateau / "1-sqrt" decay learning-rate schedule.

Runs are deterministic given a seed, and a serialized state resumes the
exact trajectory (bitwise, in double precision).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import read_container, save_checkpoint, write_container
from .corpus import CorpusError, ProteinRecord, compute_type_weights
from .model import Model, ModelConfig, build_training_batch


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Optimization settings.

    ``freeze_text_encoder`` pins the text encoder itself; the text projection
    and the description head stay trainable either way.
    """

    total_steps: int = 500
    max_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    warmup_fraction: float = 0.05
    decay_fraction: float = 0.10
    microbatch_size: int = 4
    batch_size: int = 64
    seed: int = 0
    freeze_text_encoder: bool = True
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValueError("total_steps must be at least 1")
        if not 0.0 < self.warmup_fraction + self.decay_fraction <= 1.0:
            raise ValueError("warmup_fraction + decay_fraction must lie in (0, 1]")
        if self.batch_size % self.microbatch_size != 0:
            raise ValueError("batch_size must be divisible by microbatch_size")


def lr_at(step: int, config: TrainConfig) -> float:
    """Learning rate at a 0-based step: linear warmup over the first
    warmup_fraction of steps, constant plateau, then
    max_lr * (1 - sqrt((step - d0) / (total - d0))) over the final
    decay_fraction."""
    total = config.total_steps
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    warmup_steps = int(round(config.warmup_fraction * total))
    decay_start = total - int(round(config.decay_fraction * total))
    if step < warmup_steps:
        return config.max_lr * (step + 1) / warmup_steps
    if step < decay_start:
        return config.max_lr
    return config.max_lr * (1.0 - math.sqrt((step - decay_start) / (total - decay_start)))


@dataclass
class TrainState:
    model: Model
    optimizer: torch.optim.AdamW
    step: int
    rng: np.random.Generator
    queue: list[int] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)


def _trainable_parameters(model: Model) -> list[torch.nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def init_train_state(model_config: ModelConfig, config: TrainConfig) -> TrainState:
    torch.manual_seed(config.seed)
    model = Model(model_config, with_training_heads=True)
    if config.freeze_text_encoder:
        model.text_encoder.requires_grad_(False)
    optimizer = torch.optim.AdamW(
        _trainable_parameters(model),
        lr=config.max_lr,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )
    return TrainState(
        model=model,
        optimizer=optimizer,
        step=0,
        rng=np.random.default_rng(config.seed),
    )


def _draw_indices(state: TrainState, n_records: int, count: int) -> list[int]:
    # Epoch-style sampling: refill the queue with fresh permutations so every
    # record is visited evenly even when the corpus is tiny.
    while len(state.queue) < count:
        state.queue.extend(int(i) for i in state.rng.permutation(n_records))
    drawn, state.queue = state.queue[:count], state.queue[count:]
    return drawn


def train_step(
    state: TrainState,
    microbatches: list[list[ProteinRecord]],
    config: TrainConfig,
    type_weights: dict[str, float] | None = None,
) -> dict:
    """One effective optimization step over pre-split microbatches."""
    model = state.model
    model.train()
    state.optimizer.zero_grad(set_to_none=True)
    n_micro = len(microbatches)
    sums = {"total": 0.0, "ntp": 0.0, "type": 0.0, "desc": 0.0}
    for records in microbatches:
        batch = build_training_batch(records)
        out = model(batch, type_weights=type_weights)
        total = out["total"]
        if not torch.isfinite(total):
            ids = [r.id for r in records]
            raise TrainingError(f"non-finite loss at step {state.step} on records {ids}")
        (total / n_micro).backward()
        for key in sums:
            value = out[key]
            sums[key] += float(value.detach() if torch.is_tensor(value) else value) / n_micro
    torch.nn.utils.clip_grad_norm_(_trainable_parameters(model), config.grad_clip)
    lr = lr_at(state.step, config)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    record = {
        "step": state.step,
        "lr": lr,
        "loss": sums["total"],
        "loss_ntp": sums["ntp"],
        "loss_type": sums["type"],
        "loss_desc": sums["desc"],
    }
    state.step += 1
    state.loss_history.append(sums["total"])
    return record


def save_train_state(state: TrainState, config: TrainConfig, path: str | Path) -> None:
    arrays = {
        f"model.{name}": tensor.detach().numpy().astype("<f8")
        for name, tensor in state.model.state_dict().items()
    }
    opt_state = state.optimizer.state_dict()["state"]
    for idx, entry in opt_state.items():
        arrays[f"opt.{idx}.step"] = np.asarray([float(entry["step"])], dtype="<f8")
        arrays[f"opt.{idx}.exp_avg"] = entry["exp_avg"].numpy().astype("<f8")
        arrays[f"opt.{idx}.exp_avg_sq"] = entry["exp_avg_sq"].numpy().astype("<f8")
    header = {
        "kind": "train_state",
        "model_config": asdict(state.model.config),
        "train_config": asdict(config),
        "step": state.step,
        "queue": state.queue,
        "loss_history": state.loss_history,
        "np_rng_state": state.rng.bit_generator.state,
        "torch_rng_state": torch.get_rng_state().numpy().tobytes().hex(),
        "opt_param_count": len(state.optimizer.param_groups[0]["params"]),
    }
    write_container(path, header, arrays)


def load_train_state(path: str | Path) -> tuple[TrainState, TrainConfig]:
    header, arrays = read_container(path)
    if header.get("kind") != "train_state":
        raise TrainingError(f"{path} is not a training state file")
    config = TrainConfig(**header["train_config"])
    state = init_train_state(ModelConfig(**header["model_config"]), config)
    model_state = {
        name[len("model."):]: torch.from_numpy(arr)
        for name, arr in arrays.items()
        if name.startswith("model.")
    }
    state.model.load_state_dict(model_state)
    opt_entries = {}
    for idx in range(header["opt_param_count"]):
        key = f"opt.{idx}.exp_avg"
        if key not in arrays:
            continue
        opt_entries[idx] = {
            "step": torch.tensor(float(arrays[f"opt.{idx}.step"][0])),
            "exp_avg": torch.from_numpy(arrays[key]),
            "exp_avg_sq": torch.from_numpy(arrays[f"opt.{idx}.exp_avg_sq"]),
        }
    if opt_entries:
        groups = state.optimizer.state_dict()["param_groups"]
        state.optimizer.load_state_dict({"state": opt_entries, "param_groups": groups})
    state.step = header["step"]
    state.queue = list(header["queue"])
    state.loss_history = list(header["loss_history"])
    rng_state = header["np_rng_state"]
    state.rng = np.random.default_rng()
    state.rng.bit_generator.state = rng_state
    torch.set_rng_state(torch.tensor(bytearray.fromhex(header["torch_rng_state"]), dtype=torch.uint8))
    return state, config


def train(
    model_config: ModelConfig,
    config: TrainConfig,
    records: list[ProteinRecord],
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> tuple[Model, list[dict]]:
    """Run the full loop, emitting a JSONL loss log, periodic checkpoints
    when configured, and final model / resume-state files."""
    if not records:
        raise TrainingError("corpus is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        state, config = load_train_state(resume_from)
    else:
        state = init_train_state(model_config, config)

    try:
        type_weights = compute_type_weights(records)
    except CorpusError:
        type_weights = None

    log_path = out_dir / "train_log.jsonl"
    history: list[dict] = []
    mode = "a" if resume_from is not None else "w"
    with open(log_path, mode, encoding="utf-8") as log:
        while state.step < config.total_steps:
            indices = _draw_indices(state, len(records), config.batch_size)
            chosen = [records[i] for i in indices]
            micro = [
                chosen[i:i + config.microbatch_size]
                for i in range(0, len(chosen), config.microbatch_size)
            ]
            record = train_step(state, micro, config, type_weights)
            history.append(record)
            log.write(json.dumps(record, sort_keys=True) + "\n")
            if config.checkpoint_every and state.step % config.checkpoint_every == 0 \
                    and state.step < config.total_steps:
                save_checkpoint(state.model, out_dir / f"model_step{state.step}.ckpt")
                save_train_state(state, config, out_dir / f"state_step{state.step}.ckpt")

    save_checkpoint(state.model, out_dir / "model.ckpt")
    save_train_state(state, config, out_dir / "train_state.ckpt")
    return state.model, history
