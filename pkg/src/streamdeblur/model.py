"""Deblurring network variants built as one configurable recurrent step.

Three variants share an encoder/decoder trunk: a stateless feedforward
baseline ("cnn"), a spatio-temporal recurrent network that re-ingests the
previous step's feature map ("strcnn"), and the recurrent network with a
dynamic temporal blending cell between encoder and decoder ("strcnn-dtb").

The blending cell generates a per-element weight map at run time,
w = min(1, |tanh(conv(prev_blend, current))| + beta), and mixes the current
encoder features with the previously blended ones as a convex combination.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from streamdeblur.tensor import (
    ConvSpec,
    ShapeError,
    Tensor,
    absolute,
    backward,
    clamp_upper,
    concat_channels,
    conv2d,
    mul,
    nearest_upsample,
    relu,
    same_spec,
    sub,
    tanh,
    tsum,
)

VARIANTS = ("cnn", "strcnn", "strcnn-dtb")

CHECKPOINT_FORMAT = "streamdeblur-checkpoint/1"


def normalize_variant(name: str) -> str:
    v = name.strip().lower().replace("_", "-")
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}, expected one of {VARIANTS}")
    return v


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; channel counts are multiplied by ``scale``."""

    variant: str = "strcnn-dtb"
    window_m: int = 2
    encoder_blocks: int = 5
    decoder_blocks: int = 4
    channels: int = 64
    feature_channels: int = 32
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "variant", normalize_variant(self.variant))
        if self.window_m < 0:
            raise ValueError(f"window_m must be >= 0, got {self.window_m}")
        if self.encoder_blocks < 1 or self.decoder_blocks < 1:
            raise ValueError("block counts must be >= 1")
        if self.channels < self.feature_channels:
            raise ValueError(
                f"channels ({self.channels}) must be >= feature_channels ({self.feature_channels})"
            )
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.trunk_channels < self.feat_channels:
            raise ValueError("scaled channels fell below scaled feature channels")

    @property
    def window_size(self) -> int:
        return 2 * self.window_m + 1

    @property
    def trunk_channels(self) -> int:
        return max(1, round(self.channels * self.scale))

    @property
    def feat_channels(self) -> int:
        return max(1, round(self.feature_channels * self.scale))


@dataclass
class RecurrentState:
    """Per-stream carryover: previous output features and blended features."""

    f_prev: Tensor
    h_blend_prev: Tensor


class ModelParams:
    """Named trainable tensors; weight tensors end in ``.w``, biases in ``.b``."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def weight_names(self) -> list[str]:
        return [k for k in self.tensors if k.endswith(".w")]

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            {k: Tensor(t.data.astype(dtype), requires_grad=True) for k, t in self.items()}
        )

    def clone(self) -> "ModelParams":
        return ModelParams(
            {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.items()}
        )


@lru_cache(maxsize=None)
def conv_layout(config: ModelConfig) -> dict[str, ConvSpec]:
    """Every convolution in the network, keyed by layer name."""
    f, c = config.feat_channels, config.trunk_channels
    layout: dict[str, ConvSpec] = {}
    layout["enc_in"] = same_spec(3 * config.window_size, f, 5, stride=2)
    layout["enc_fuse"] = same_spec(2 * f, c, 3)
    for i in range(config.encoder_blocks):
        layout[f"enc_res{i}_a"] = same_spec(c, c, 3)
        layout[f"enc_res{i}_b"] = same_spec(c, c, 3)
    if config.variant == "strcnn-dtb":
        layout["dtb"] = same_spec(2 * c, c, 5)
    for i in range(config.decoder_blocks):
        layout[f"dec_res{i}_a"] = same_spec(c, c, 3)
        layout[f"dec_res{i}_b"] = same_spec(c, c, 3)
    layout["dec_feat"] = same_spec(c, f, 3)
    layout["dec_out"] = same_spec(c, 3, 3)
    return layout


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    """Variance-scaled Gaussian weights, zero biases, blend bias at 0.5.

    Per-layer scale keeps both the residual trunk and the feature feedback
    loop near unit gain at initialization: ReLU-followed convolutions get
    the 2/fan_in gain, linear heads and the blending cell get 1/fan_in, and
    the second convolution of each residual block is additionally divided
    by the total block count. Uniform 2/fan_in everywhere makes the
    recurrence amplify activations several-fold per time step.
    """
    total_blocks = config.encoder_blocks + config.decoder_blocks
    tensors: dict[str, Tensor] = {}
    for name, spec in conv_layout(config).items():
        fan_in = spec.in_channels * spec.kernel_height * spec.kernel_width
        if name.endswith("_b"):
            std = np.sqrt(1.0 / fan_in) / total_blocks
        elif name in ("dec_feat", "dec_out", "dtb"):
            std = np.sqrt(1.0 / fan_in)
        else:
            std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, spec.weight_shape()).astype(dtype)
        tensors[f"{name}.w"] = Tensor(w, requires_grad=True)
        tensors[f"{name}.b"] = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True)
    if config.variant == "strcnn-dtb":
        tensors["dtb.beta"] = Tensor(np.asarray(0.5, dtype=dtype), requires_grad=True)
    return ModelParams(tensors)


def init_state(config: ModelConfig, frame_hw: tuple[int, int], batch: int = 1, dtype=np.float32) -> RecurrentState:
    """All-zero carryover for a stream start."""
    h, w = frame_hw
    _check_even(h, w)
    return RecurrentState(
        f_prev=Tensor.zeros((batch, config.feat_channels, h // 2, w // 2), dtype=dtype),
        h_blend_prev=Tensor.zeros((batch, config.trunk_channels, h // 2, w // 2), dtype=dtype),
    )


def _check_even(h: int, w: int) -> None:
    if h % 2 or w % 2:
        raise ShapeError(f"frame extents must be even, got {h}x{w} (pad to even first)")


def _conv(t: Tensor, params: ModelParams, layout, name: str) -> Tensor:
    return conv2d(t, params[f"{name}.w"], params[f"{name}.b"], layout[name])


def _residual(t: Tensor, params: ModelParams, layout, name: str) -> Tensor:
    inner = _conv(relu(_conv(t, params, layout, f"{name}_a")), params, layout, f"{name}_b")
    return t + inner


def encoder_forward(window: list[Tensor], f_prev: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """Stack the frame window, downsample, fuse with carried features, refine."""
    if len(window) != config.window_size:
        raise ShapeError(f"window has {len(window)} frames, config expects {config.window_size}")
    _check_even(window[0].shape[2], window[0].shape[3])
    layout = conv_layout(config)
    x = concat_channels(list(window))
    t = relu(_conv(x, params, layout, "enc_in"))
    t = concat_channels([t, f_prev])
    t = relu(_conv(t, params, layout, "enc_fuse"))
    for i in range(config.encoder_blocks):
        t = _residual(t, params, layout, f"enc_res{i}")
    return t


def dtb_forward(h: Tensor, h_blend_prev: Tensor, params: ModelParams, config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Generate the blend weight map and mix current with carried features."""
    if h.shape != h_blend_prev.shape:
        raise ShapeError(f"feature shapes differ: {h.shape} vs {h_blend_prev.shape}")
    layout = conv_layout(config)
    z = _conv(concat_channels([h_blend_prev, h]), params, layout, "dtb")
    w = clamp_upper(absolute(tanh(z)) + params["dtb.beta"], 1.0)
    blend = mul(w, h) + mul(sub(1.0, w), h_blend_prev)
    return w, blend


def decoder_forward(h_blend: Tensor, params: ModelParams, config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Refine blended features; emit the latent frame and the carry features."""
    layout = conv_layout(config)
    t = h_blend
    for i in range(config.decoder_blocks):
        t = _residual(t, params, layout, f"dec_res{i}")
    f_next = _conv(t, params, layout, "dec_feat")
    latent = _conv(nearest_upsample(t, 2), params, layout, "dec_out")
    return latent, f_next


def step(
    window: list[Tensor],
    state: RecurrentState,
    params: ModelParams,
    config: ModelConfig,
    inference: bool = False,
) -> tuple[Tensor, RecurrentState]:
    """One recurrent time step: frames + carryover -> latent frame + carryover.

    The baseline variant ignores the carried state entirely; the plain
    recurrent variant skips the blending cell. At inference the latent frame
    is clamped to [0, 1]; during training it is left free for gradient flow.
    """
    if config.variant == "cnn":
        n, _, h, w = window[0].shape
        f_prev = Tensor.zeros((n, config.feat_channels, h // 2, w // 2), dtype=window[0].dtype)
    else:
        f_prev = state.f_prev
    h_n = encoder_forward(window, f_prev, params, config)
    if config.variant == "strcnn-dtb":
        _, h_blend = dtb_forward(h_n, state.h_blend_prev, params, config)
    else:
        h_blend = h_n
    latent, f_next = decoder_forward(h_blend, params, config)
    if inference:
        latent = Tensor(np.clip(latent.data, 0.0, 1.0))
    return latent, RecurrentState(f_prev=f_next, h_blend_prev=h_blend)


def window_indices(n: int, m: int, length: int) -> list[int]:
    """Frame indices n-m .. n+m with edge replication at stream boundaries."""
    if length < 1:
        raise ValueError("empty stream")
    return [min(max(i, 0), length - 1) for i in range(n - m, n + m + 1)]


# ---------------------------------------------------------------------------
# Receptive-field measurement
# ---------------------------------------------------------------------------


def receptive_field_probe(
    params: ModelParams,
    config: ModelConfig,
    steps: int,
    frame_hw: tuple[int, int] = (16, 160),
    seed: int = 0,
) -> list[int]:
    """Measured spatial support growth of the first frame's influence.

    Runs ``steps`` recurrent steps on random float64 frames and, for each
    step k, measures the bounding-box width of the nonzero gradient of the
    center output pixel of step k with respect to the very first frame.
    """
    h, w = frame_hw
    _check_even(h, w)
    rng = np.random.default_rng(seed)
    p64 = params.astype(np.float64)
    m = config.window_m
    frames = [
        Tensor(rng.uniform(0.2, 0.8, (1, 3, h, w)), requires_grad=True)
        for _ in range(steps + m)
    ]

    def frame_at(i: int) -> Tensor:
        return frames[min(max(i, 0), len(frames) - 1)]

    state = init_state(config, frame_hw, batch=1, dtype=np.float64)
    widths: list[int] = []
    mask = np.zeros((1, 3, h, w))
    mask[0, :, h // 2, w // 2] = 1.0
    probe_mask = Tensor(mask)
    for k in range(steps):
        window = [frame_at(k + j) for j in range(-m, m + 1)]
        latent, state = step(window, state, p64, config)
        backward(tsum(mul(latent, probe_mask)))
        g = frames[0].grad
        if g is None:
            widths.append(0)  # no path from the first frame to this step
        else:
            cols = np.nonzero(np.abs(g).max(axis=(0, 1, 2)) > 0)[0]
            widths.append(0 if cols.size == 0 else int(cols[-1] - cols[0] + 1))
        for f in frames:
            f.zero_grad()
        p64.zero_grad()
    return widths


def count_parameters(params: ModelParams) -> int:
    return params.count()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, params: ModelParams, config: ModelConfig) -> None:
    """JSON manifest (config, names, shapes, offsets) plus one float32 LE blob."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    entries = []
    chunks = []
    offset = 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data.astype("<f4")).tobytes()
        entries.append(
            {"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(config),
        "dtype": "<f4",
        "blob": blob_path.name,
        "total_bytes": offset,
        "tensors": entries,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig]:
    """Load and validate a checkpoint; shapes must match the stored config."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} manifest")
    config = ModelConfig(**manifest["config"])
    blob = (path.parent / manifest["blob"]).read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise ValueError(
            f"checkpoint blob has {len(blob)} bytes, manifest says {manifest['total_bytes']}"
        )
    tensors: dict[str, Tensor] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        tensors[entry["name"]] = Tensor(data, requires_grad=True)
    params = ModelParams(tensors)
    expected: dict[str, tuple[int, ...]] = {}
    for name, spec in conv_layout(config).items():
        expected[f"{name}.w"] = spec.weight_shape()
        expected[f"{name}.b"] = (spec.out_channels,)
    if config.variant == "strcnn-dtb":
        expected["dtb.beta"] = ()
    for key, shape in expected.items():
        if key not in params:
            raise ValueError(f"checkpoint/config mismatch: missing tensor {key}")
        if params[key].shape != shape:
            raise ValueError(
                f"checkpoint/config mismatch: {key} has shape {params[key].shape}, "
                f"config expects {shape}"
            )
    for key in params.names():
        if key not in expected:
            raise ValueError(f"checkpoint/config mismatch: unexpected tensor {key}")
    return params, config
