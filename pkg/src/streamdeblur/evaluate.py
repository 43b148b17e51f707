"""Strictly online stream deblurring with PSNR evaluation and benchmarking.

A stream session sees frames one at a time, keeps only the recurrent state
and a small lookahead window, and emits output n once frame n+m has
arrived. Per-frame timing wraps only the network step, never image
decode/encode.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from streamdeblur.frameio import PairSequence
from streamdeblur.model import (
    ModelConfig,
    ModelParams,
    RecurrentState,
    init_state,
    step,
)
from streamdeblur.tensor import ShapeError, Tensor, no_grad

PSNR_CAP_DB = 120.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for frames in [0, 1] (peak 1.0).

    Zero-MSE comparisons (below 1e-12) report the 120 dB cap.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: frame shapes differ, {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse < 1e-12:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


@dataclass
class EvalReport:
    """Quality and throughput measurements for one streamed video."""

    variant: str
    config: dict
    frame_count: int
    lookahead_frames: int
    per_frame_seconds: list[float] = field(default_factory=list)
    psnr_per_frame: list[float] | None = None

    @property
    def total_seconds(self) -> float:
        return float(sum(self.per_frame_seconds))

    @property
    def fps(self) -> float:
        total = self.total_seconds
        return self.frame_count / total if total > 0 else float("inf")

    @property
    def mean_psnr(self) -> float | None:
        if not self.psnr_per_frame:
            return None
        return float(np.mean(self.psnr_per_frame))

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "config": self.config,
            "frame_count": self.frame_count,
            "lookahead_frames": self.lookahead_frames,
            "per_frame_seconds": self.per_frame_seconds,
            "total_seconds": self.total_seconds,
            "fps": self.fps,
            "psnr_per_frame": self.psnr_per_frame,
            "mean_psnr": self.mean_psnr,
        }


class StreamSession:
    """Stateful online deblurring of one stream, one frame at a time.

    ``push`` accepts (3, H, W) frames in [0, 1] and returns the outputs that
    became available; ``flush`` drains the last lookahead_frames outputs by
    replicating the final frame. Output n is a pure function of frames
    0..n+m, the checkpoint, and the zero initial state.
    """

    def __init__(self, params: ModelParams, config: ModelConfig, frame_hw: tuple[int, int]):
        self.params = params
        self.config = config
        self.frame_hw = frame_hw
        self.state: RecurrentState = init_state(config, frame_hw)
        self._buffer: deque[tuple[int, np.ndarray]] = deque()
        self._received = 0
        self._emitted = 0
        self._finished = False
        self.step_seconds: list[float] = []

    def push(self, frame: np.ndarray) -> list[np.ndarray]:
        if self._finished:
            raise RuntimeError("session already flushed")
        if frame.shape != (3, *self.frame_hw):
            raise ShapeError(
                f"frame shape {frame.shape} does not match session {(3, *self.frame_hw)}"
            )
        self._buffer.append((self._received, np.asarray(frame, dtype=np.float32)))
        self._received += 1
        outputs = []
        while self._emitted + self.config.window_m < self._received:
            outputs.append(self._emit())
        return outputs

    def flush(self) -> list[np.ndarray]:
        self._finished = True
        outputs = []
        while self._emitted < self._received:
            outputs.append(self._emit())
        return outputs

    def _emit(self) -> np.ndarray:
        n = self._emitted
        m = self.config.window_m
        by_index = dict(self._buffer)
        last = self._received - 1
        window_np = [by_index[min(max(i, 0), last)] for i in range(n - m, n + m + 1)]
        window = [Tensor(f[None]) for f in window_np]
        start = time.perf_counter()
        with no_grad():
            latent, self.state = step(window, self.state, self.params, self.config, inference=True)
        self.step_seconds.append(time.perf_counter() - start)
        self._emitted += 1
        while self._buffer and self._buffer[0][0] < self._emitted - m:
            self._buffer.popleft()
        return latent.data[0]


def run_stream(
    frames: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    sharps: np.ndarray | None = None,
) -> tuple[np.ndarray, EvalReport]:
    """Deblur (T, 3, H, W) frames online; one output per input frame.

    Timing covers network compute only. When sharp references are supplied
    the report carries per-frame PSNR of the clamped outputs.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ShapeError(f"expected (T, 3, H, W) frames, got {frames.shape}")
    h, w = frames.shape[2], frames.shape[3]
    session = StreamSession(params, config, (h, w))
    outputs: list[np.ndarray] = []
    for t in range(frames.shape[0]):
        outputs.extend(session.push(frames[t]))
    outputs.extend(session.flush())
    assert len(outputs) == frames.shape[0]
    report = EvalReport(
        variant=config.variant,
        config=asdict(config),
        frame_count=len(outputs),
        lookahead_frames=config.window_m,
        per_frame_seconds=list(session.step_seconds),
    )
    stacked = np.stack(outputs)
    if sharps is not None:
        report.psnr_per_frame = [
            psnr(out, ref) for out, ref in zip(stacked, np.asarray(sharps, dtype=np.float32))
        ]
    return stacked, report


def evaluate_pairs(
    pairs: PairSequence, params: ModelParams, config: ModelConfig
) -> tuple[np.ndarray, EvalReport]:
    return run_stream(pairs.blurry, params, config, sharps=pairs.sharp)


# ---------------------------------------------------------------------------
# Ablation protocol
# ---------------------------------------------------------------------------


@dataclass
class AblationTable:
    """Mean PSNR per (variant, window size) on a shared evaluation set."""

    window_sizes: list[int]
    variants: list[str]
    cells: dict[tuple[str, int], float]

    def render(self) -> str:
        header = ["inputs"] + [str(w) for w in self.window_sizes]
        rows = [header]
        for v in self.variants:
            rows.append([v] + [f"{self.cells[(v, w)]:.2f}" for w in self.window_sizes])
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in rows]
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "window_sizes": self.window_sizes,
            "variants": self.variants,
            "cells": {f"{v}/{w}": p for (v, w), p in self.cells.items()},
        }


def ablation_suite(
    models: dict[tuple[str, int], tuple[ModelParams, ModelConfig]],
    eval_sets: list[PairSequence],
) -> AblationTable:
    """Evaluate each (variant, window-size) model on the same pair sequences.

    Callers are responsible for training the models under identical seeds
    and budgets; this only measures.
    """
    if not models:
        raise ValueError("no models supplied")
    if not eval_sets:
        raise ValueError("no evaluation sequences supplied")
    variants = sorted({v for v, _ in models}, key=lambda v: ("cnn", "strcnn", "strcnn-dtb").index(v))
    window_sizes = sorted({w for _, w in models})
    cells: dict[tuple[str, int], float] = {}
    for (variant, wsize), (params, config) in models.items():
        if config.window_size != wsize:
            raise ValueError(
                f"model keyed ({variant}, {wsize}) has window size {config.window_size}"
            )
        scores = []
        for pairs in eval_sets:
            _, report = evaluate_pairs(pairs, params, config)
            scores.append(report.mean_psnr)
        cells[(variant, wsize)] = float(np.mean(scores))
    return AblationTable(window_sizes=window_sizes, variants=variants, cells=cells)


def framewise_curve(
    eval_sets: list[PairSequence], params: ModelParams, config: ModelConfig
) -> list[float]:
    """PSNR by stream step, averaged over sequences (truncated to the shortest)."""
    if not eval_sets:
        raise ValueError("no evaluation sequences supplied")
    per_seq = []
    for pairs in eval_sets:
        _, report = evaluate_pairs(pairs, params, config)
        per_seq.append(report.psnr_per_frame)
    steps = min(len(c) for c in per_seq)
    return [float(np.mean([c[i] for c in per_seq])) for i in range(steps)]


def benchmark(
    params: ModelParams,
    config: ModelConfig,
    resolution: tuple[int, int],
    frame_count: int,
    seed: int = 0,
    warmup: int = 1,
) -> EvalReport:
    """Throughput on random frames at a given (width, height) resolution."""
    w, h = resolution
    rng = np.random.default_rng(seed)
    frames = rng.uniform(0, 1, (frame_count + warmup, 3, h, w)).astype(np.float32)
    if warmup:
        run_stream(frames[:warmup], params, config)
    _, report = run_stream(frames[warmup:], params, config)
    return report
