"""Flow-matching objective, base pre-training and LoRA fine-tuning."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from crossflow.core.optim import Adam, AdamState, adam_update
from crossflow.core.tensor import Tensor, no_grad
from crossflow.errors import ConfigurationError, ContractError, DimensionError, TrainingError
from crossflow.flowmatch.model import FlowConfig, FlowModel, to_model_space
from crossflow.lora import AttachPlan, LoraAdapter, adapter_parameters, init_adapters

IDENTITY_INSTRUCTION = 0
LUMINANCE_INSTRUCTION = 1
INVERTED_LUMINANCE_INSTRUCTION = 2
PRETEXT_INSTRUCTIONS = (IDENTITY_INSTRUCTION, LUMINANCE_INSTRUCTION, INVERTED_LUMINANCE_INSTRUCTION)


def pretext_target(images: np.ndarray, instruction: int) -> np.ndarray:
    """Generic edit applied to source-style images in [0, 1], (B, C, H, W)."""
    if instruction == IDENTITY_INSTRUCTION:
        return images
    lum = images.mean(axis=1, keepdims=True) if images.shape[1] != 3 else (
        0.299 * images[:, 0:1] + 0.587 * images[:, 1:2] + 0.114 * images[:, 2:3]
    )
    if instruction == LUMINANCE_INSTRUCTION:
        return np.repeat(lum, images.shape[1], axis=1)
    if instruction == INVERTED_LUMINANCE_INSTRUCTION:
        return np.repeat(1.0 - lum, images.shape[1], axis=1)
    raise ConfigurationError(f"no pretext edit for instruction {instruction}")


def interpolate(x0: np.ndarray, x1: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
    """Straight path z_t = (1 - t) x0 + t x1 with target velocity x1 - x0.

    ``t`` is a scalar or one value per leading-axis sample.
    """
    x0 = np.asarray(x0, dtype=np.float32)
    x1 = np.asarray(x1, dtype=np.float32)
    if x0.shape != x1.shape:
        raise DimensionError(f"noise {x0.shape} and data {x1.shape} differ in shape")
    t_arr = np.asarray(t, dtype=np.float32)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ContractError(f"t must lie in [0, 1], got {t}")
    if t_arr.ndim == 1:
        t_arr = t_arr.reshape((-1,) + (1,) * (x0.ndim - 1))
    z = (1.0 - t_arr) * x0 + t_arr * x1
    return z.astype(np.float32), (x1 - x0).astype(np.float32)


def fm_loss(model, x1, cond, instruction, x0, t, adapters=None) -> Tensor:
    """Mean squared error between predicted and straight-line velocity.

    All images are in model space, shaped (B, C, H, W); ``t`` has one
    entry per sample. ``model`` is any callable with the FlowModel
    signature.
    """
    t = np.asarray(t, dtype=np.float32).reshape(-1)
    z, u = interpolate(x0, x1, t)
    pred = model(Tensor(z), t, cond, instruction, adapters)
    if pred.shape != u.shape:
        raise DimensionError(f"model output {pred.shape} does not match target {u.shape}")
    diff = pred - Tensor(u)
    return (diff * diff).mean()


class LossLog:
    """Per-step (step, loss) rows, written as CSV when a path is given."""

    def __init__(self, path: str | os.PathLike | None):
        self.path = Path(path) if path is not None else None
        self.rows: list[tuple[int, float]] = []

    def append(self, step: int, loss: float) -> None:
        self.rows.append((step, loss))

    def flush(self) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            for step, loss in self.rows:
                writer.writerow([step, f"{loss:.8g}"])
        os.replace(tmp, self.path)


# -- pre-training ------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 16
    learning_rate: float = 1e-3
    warmup: int = 50
    holdout_fraction: float = 0.1
    pretext: tuple[int, ...] = PRETEXT_INSTRUCTIONS

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError(f"bad pre-training schedule: steps={self.steps}, batch_size={self.batch_size}")
        if not self.pretext or any(i not in PRETEXT_INSTRUCTIONS for i in self.pretext):
            raise ConfigurationError(f"pretext instructions must be drawn from {PRETEXT_INSTRUCTIONS}")


def _lr_at(step: int, cfg: PretrainConfig) -> float:
    if step < cfg.warmup:
        return cfg.learning_rate * (step + 1) / cfg.warmup
    progress = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * progress)))


def heldout_loss(model: FlowModel, images: np.ndarray, seed: int, adapters=None, instruction=IDENTITY_INSTRUCTION, targets=None) -> float:
    """Flow-matching loss on fixed (noise, t) draws; comparable across checkpoints."""
    rng = np.random.default_rng(seed)
    cond = to_model_space(images, model.config.channels)
    x1 = cond if targets is None else to_model_space(targets, model.config.channels)
    x0 = rng.standard_normal(x1.shape).astype(np.float32)
    t = rng.uniform(size=len(x1)).astype(np.float32)
    with no_grad():
        loss = fm_loss(model, x1, Tensor(cond), np.full(len(x1), instruction), x0, t, adapters)
    return float(loss.data)


def _pretext_loss(model: FlowModel, images: np.ndarray, seed: int, pretext: Sequence[int]) -> float:
    return float(np.mean([
        heldout_loss(model, images, seed, None, k, pretext_target(images, k)) for k in pretext
    ]))


def pretrain_base(
    corpus: np.ndarray,
    config: PretrainConfig = PretrainConfig(),
    seed: int = 0,
    model_config: FlowConfig = FlowConfig(),
    log_path: str | os.PathLike | None = None,
) -> FlowModel:
    """Train the base on source-style images with generic edit pretexts.

    Every sample is conditioned on a corpus image and asked for one of a
    few fixed edits of it (identity, luminance, inverted luminance), chosen
    per sample. The base thereby learns to carry the conditioning image
    through the flow and to follow the instruction embedding.
    """
    corpus = np.asarray(corpus, dtype=np.float32)
    if len(corpus) == 0:
        raise ConfigurationError("pre-training corpus is empty")
    if max(config.pretext) >= model_config.n_instructions:
        raise ConfigurationError("pretext instruction outside the model's instruction table")
    rng = np.random.default_rng(seed)
    n_hold = int(len(corpus) * config.holdout_fraction) if len(corpus) > 1 else 0
    order = rng.permutation(len(corpus))
    held, train = corpus[order[:n_hold]], corpus[order[n_hold:]]
    if len(train) == 0:
        raise ConfigurationError("pre-training corpus too small after hold-out")
    channels = model_config.channels
    pretext = np.asarray(config.pretext)
    cond_all = to_model_space(train, channels)
    targets_all = {int(k): to_model_space(pretext_target(train, int(k)), channels) for k in pretext}

    model = FlowModel(model_config, seed=seed)
    model.set_trainable(True)
    opt = Adam(model.parameters(), lr=config.learning_rate)
    log = LossLog(log_path)
    eval_seed = seed + 1
    start_loss = _pretext_loss(model, held, eval_seed, config.pretext) if n_hold else None

    for step in range(config.steps):
        idx = rng.integers(0, len(train), size=config.batch_size)
        instr = pretext[rng.integers(0, len(pretext), size=config.batch_size)]
        x1 = np.stack([targets_all[int(k)][i] for i, k in zip(idx, instr)])
        cond = cond_all[idx]
        x0 = rng.standard_normal(x1.shape).astype(np.float32)
        t = rng.uniform(size=len(x1)).astype(np.float32)
        loss = fm_loss(model, x1, Tensor(cond), instr, x0, t)
        value = float(loss.data)
        if not math.isfinite(value):
            log.flush()
            raise TrainingError("pre-training loss is not finite", step)
        log.append(step, value)
        loss.backward()
        opt.lr = _lr_at(step, config)
        opt.step()

    model.freeze()
    log.flush()
    model.meta["pretrain"] = {
        "steps": config.steps,
        "batch_size": config.batch_size,
        "learning_rate": config.learning_rate,
        "pretext": [int(k) for k in config.pretext],
        "heldout_start": start_loss,
        "heldout_end": _pretext_loss(model, held, eval_seed, config.pretext) if n_hold else None,
        "final_train_loss": log.rows[-1][1] if log.rows else None,
    }
    return model


# -- LoRA fine-tuning --------------------------------------------------

@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float
    steps: int
    seed: int
    rank: int = 16
    alpha: float | None = None
    instruction: int = 1

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.learning_rate}")

    @property
    def scale_alpha(self) -> float:
        return float(self.rank if self.alpha is None else self.alpha)


def train_lora(
    base: FlowModel,
    plan: AttachPlan,
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    hyper: TrainHyper,
    log_path: str | os.PathLike | None = None,
) -> dict[str, LoraAdapter]:
    """Fit fresh adapters on (source, target) pairs with batch size 1.

    Each step draws (pair index, t ~ U[0,1], x0 ~ N(0, I)) from the job's
    seeded stream and applies one Adam update to the adapter matrices
    only; the base stays frozen.
    """
    if len(pairs) == 0:
        raise ConfigurationError("LoRA training needs at least one pair")
    base.freeze()
    channels = base.config.channels
    sources = to_model_space(np.stack([p[0] for p in pairs]), channels)
    targets = to_model_space(np.stack([p[1] for p in pairs]), channels)
    if sources.shape != targets.shape:
        raise DimensionError(f"sources {sources.shape} and targets {targets.shape} are not pixel-aligned")

    init_seed, stream_seed = np.random.SeedSequence(hyper.seed).generate_state(2)
    adapters = init_adapters(base.projection_shapes(), plan, hyper.rank, hyper.scale_alpha, int(init_seed))
    params = adapter_parameters(adapters)
    states = [AdamState.for_param(p) for p in params]
    rng = np.random.default_rng(int(stream_seed))
    log = LossLog(log_path)
    instr = np.array([hyper.instruction])

    for step in range(hyper.steps):
        i = int(rng.integers(0, len(pairs)))
        t = np.array([rng.uniform()], dtype=np.float32)
        x0 = rng.standard_normal((1,) + targets.shape[1:]).astype(np.float32)
        loss = fm_loss(base, targets[i:i + 1], Tensor(sources[i:i + 1]), instr, x0, t, adapters)
        value = float(loss.data)
        if not math.isfinite(value):
            log.flush()
            raise TrainingError("LoRA loss is not finite", step)
        log.append(step, value)
        loss.backward()
        for p, s in zip(params, states):
            if p.grad is not None:
                adam_update(p, s, hyper.learning_rate)
    log.flush()
    return adapters
