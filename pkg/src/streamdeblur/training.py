"""Training: sequence objective, Adam with staircase-exponential decay,
batch sampling, and the truncated-unroll optimization loop.

The objective is the per-frame-normalized squared error summed over the
sequence plus an L2 penalty on convolution weights. Gradients flow through
the recurrent state across the entire unrolled sequence.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from streamdeblur.frameio import PairSequence
from streamdeblur.model import (
    ModelConfig,
    ModelParams,
    init_params,
    init_state,
    step,
    window_indices,
)
from streamdeblur.tensor import ShapeError, Tensor, backward, mul, scalar_mul, sub, tsum


class NumericError(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass(frozen=True)
class LossConfig:
    """Weight-decay strength for the training objective."""

    weight_decay: float = 1e-5

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")


@dataclass
class TrainBatch:
    """Aligned (batch, seq, 3, crop, crop) blurry/sharp crops."""

    blurry: np.ndarray
    sharp: np.ndarray


@dataclass
class OptimState:
    """Adam moments plus the decayed-learning-rate bookkeeping."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    iteration: int = 0
    base_lr: float = 1e-4
    decay_rate: float = 0.96
    decay_every: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clamp01_names: tuple[str, ...] = ()


def init_optimizer(
    params: ModelParams,
    base_lr: float = 1e-4,
    decay_rate: float = 0.96,
    decay_every: int = 1000,
) -> OptimState:
    clamped = tuple(n for n in ("dtb.beta",) if n in params)
    return OptimState(
        m={n: np.zeros_like(t.data) for n, t in params.items()},
        v={n: np.zeros_like(t.data) for n, t in params.items()},
        base_lr=base_lr,
        decay_rate=decay_rate,
        decay_every=decay_every,
        clamp01_names=clamped,
    )


def lr_schedule(
    iteration: int,
    base_lr: float = 1e-4,
    decay_rate: float = 0.96,
    decay_every: int = 1000,
) -> float:
    """Staircase exponential decay: one decay application per decay_every iterations."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    return base_lr * decay_rate ** (iteration // decay_every)


def adam_step(params: ModelParams, opt: OptimState) -> float:
    """One Adam update over all parameters; returns the learning rate used.

    Constrained parameters listed in ``clamp01_names`` are projected back
    into [0, 1] after the update.
    """
    lr = lr_schedule(opt.iteration, opt.base_lr, opt.decay_rate, opt.decay_every)
    opt.iteration += 1
    t = opt.iteration
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise ValueError(f"adam_step: parameter {name} has no gradient")
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + opt.eps)
        p.data = p.data - lr * update.astype(p.data.dtype)
    for name in opt.clamp01_names:
        p = params[name]
        p.data = np.clip(p.data, 0.0, 1.0)
    return lr


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def sequence_mse(latents: list[Tensor], sharps: list[Tensor]) -> Tensor:
    """Squared error summed over the sequence, divided by one frame's element
    count (and averaged over the batch)."""
    if len(latents) != len(sharps) or not latents:
        raise ShapeError(
            f"latent/sharp sequence lengths differ: {len(latents)} vs {len(sharps)}"
        )
    total = None
    for latent, sharp in zip(latents, sharps):
        if latent.shape != sharp.shape:
            raise ShapeError(f"frame shapes differ: {latent.shape} vs {sharp.shape}")
        d = sub(latent, sharp)
        sq = tsum(mul(d, d))
        total = sq if total is None else total + sq
    batch, c, h, w = latents[0].shape
    return scalar_mul(total, 1.0 / (c * h * w * batch))


def weight_norm(params: ModelParams) -> Tensor:
    """Sum of squared convolution weights (biases and the blend bias excluded)."""
    total = None
    for name in params.weight_names():
        w = params[name]
        sq = tsum(mul(w, w))
        total = sq if total is None else total + sq
    if total is None:
        return Tensor.scalar(0.0)
    return total


def sequence_loss(
    latents: list[Tensor], sharps: list[Tensor], params: ModelParams, cfg: LossConfig
) -> Tensor:
    loss = sequence_mse(latents, sharps)
    if cfg.weight_decay > 0:
        loss = loss + scalar_mul(weight_norm(params), cfg.weight_decay)
    return loss


# ---------------------------------------------------------------------------
# Batch sampling
# ---------------------------------------------------------------------------


def sample_batch(
    dataset: list[PairSequence],
    rng: np.random.Generator,
    batch_size: int,
    seq_len: int = 13,
    crop: int = 128,
) -> TrainBatch:
    """Per sequence: one uniform start step and one crop origin shared by all frames."""
    if not dataset:
        raise ValueError("dataset is empty")
    usable = [s for s in dataset if len(s) >= seq_len]
    if not usable:
        raise ValueError(f"no sequence has >= {seq_len} pairs")
    h, w = usable[0].blurry.shape[2], usable[0].blurry.shape[3]
    if h < crop or w < crop:
        raise ValueError(f"frames {h}x{w} are smaller than the {crop}x{crop} crop")
    blurry = np.empty((batch_size, seq_len, 3, crop, crop), dtype=np.float32)
    sharp = np.empty_like(blurry)
    for b in range(batch_size):
        seq = usable[int(rng.integers(len(usable)))]
        start = int(rng.integers(len(seq) - seq_len + 1))
        y0 = int(rng.integers(seq.blurry.shape[2] - crop + 1))
        x0 = int(rng.integers(seq.blurry.shape[3] - crop + 1))
        sl = (slice(start, start + seq_len), slice(None), slice(y0, y0 + crop), slice(x0, x0 + crop))
        blurry[b] = seq.blurry[sl]
        sharp[b] = seq.sharp[sl]
    return TrainBatch(blurry=blurry, sharp=sharp)


# ---------------------------------------------------------------------------
# Optimization loop
# ---------------------------------------------------------------------------


def train_sequence_step(
    batch: TrainBatch,
    params: ModelParams,
    opt: OptimState,
    config: ModelConfig,
    loss_cfg: LossConfig,
) -> tuple[float, float]:
    """Forward the unrolled sequence, backprop through every step, update once.

    Returns the pre-update loss and its data term.
    """
    b, seq_len, _, h, w = batch.blurry.shape
    state = init_state(config, (h, w), batch=b)
    latents = []
    sharps = []
    for n in range(seq_len):
        window = [Tensor(batch.blurry[:, i]) for i in window_indices(n, config.window_m, seq_len)]
        latent, state = step(window, state, params, config)
        latents.append(latent)
        sharps.append(Tensor(batch.sharp[:, n]))
    e_mse = sequence_mse(latents, sharps)
    loss = e_mse
    if loss_cfg.weight_decay > 0:
        loss = loss + scalar_mul(weight_norm(params), loss_cfg.weight_decay)
    loss_value = loss.item()
    if not np.isfinite(loss_value):
        raise NumericError(f"loss became non-finite at iteration {opt.iteration}")
    params.zero_grad()
    backward(loss)
    adam_step(params, opt)
    return loss_value, e_mse.item()


@dataclass
class TrainResult:
    params: ModelParams
    config: ModelConfig
    log: list[dict] = field(default_factory=list)


def run_training(
    dataset: list[PairSequence],
    config: ModelConfig,
    iterations: int,
    batch_size: int = 8,
    seed: int = 0,
    loss_cfg: LossConfig = LossConfig(),
    base_lr: float = 1e-4,
    decay_rate: float = 0.96,
    decay_every: int = 1000,
    seq_len: int = 13,
    crop: int = 128,
    log_every: int = 10,
    progress=None,
) -> TrainResult:
    """Seed-deterministic training from scratch on synthesized pair sequences."""
    rng = np.random.default_rng(seed)
    params = init_params(config, rng)
    opt = init_optimizer(params, base_lr=base_lr, decay_rate=decay_rate, decay_every=decay_every)
    log: list[dict] = []
    for it in range(iterations):
        batch = sample_batch(dataset, rng, batch_size, seq_len=seq_len, crop=crop)
        lr = lr_schedule(opt.iteration, base_lr, decay_rate, decay_every)
        loss, e_mse = train_sequence_step(batch, params, opt, config, loss_cfg)
        if it % log_every == 0 or it == iterations - 1:
            row = {"iteration": it, "lr": lr, "loss": loss, "e_mse": e_mse}
            log.append(row)
            if progress is not None:
                progress(row)
    return TrainResult(params=params, config=config, log=log)


def write_training_log(path: str | Path, log: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iteration", "lr", "loss", "e_mse"])
        writer.writeheader()
        writer.writerows(log)
