"""Blur-pair synthesis from high-speed frame sequences.

A long shutter is simulated by averaging tau consecutive short-exposure
frames; the center frame of the averaged window is kept as the sharp
reference. The stride between synthesized frames controls the output frame
rate and duty cycle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TAU_CHOICES = (7, 9, 11, 13, 15)


@dataclass
class FrameSequence:
    """Ordered color frames (T, H, W, 3) in [0, 1] plus rate metadata."""

    frames: np.ndarray
    fps: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[3] != 3:
            raise ValueError(f"frames must be (T, H, W, 3), got {self.frames.shape}")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class SynthConfig:
    """Shutter/interval pair: tau frames averaged, stride interval between pairs."""

    tau: int
    interval: int

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError(f"tau must be a positive integer, got {self.tau}")
        if self.interval < self.tau:
            raise ValueError(
                f"interval must satisfy interval >= tau, got interval={self.interval}, tau={self.tau}"
            )


@dataclass
class BlurPair:
    """One synthesized blurry frame with its sharp reference."""

    blurry: np.ndarray
    sharp: np.ndarray
    index: int


@dataclass
class BlurVideo:
    """All pairs synthesized from one sequence, at rate fps_in / interval."""

    pairs: list[BlurPair]
    fps: float
    config: SynthConfig

    def __len__(self) -> int:
        return len(self.pairs)


def synthesize_pair(seq: FrameSequence, n: int, cfg: SynthConfig) -> BlurPair:
    """Average the tau-frame window starting at n*interval; keep its center sharp.

    Offsets are 0-based: the mean runs over offsets 0..tau-1 and the sharp
    frame sits at offset tau//2, the central element for odd tau.
    """
    start = n * cfg.interval
    stop = start + cfg.tau
    if n < 0 or stop > len(seq):
        raise ValueError(
            f"window [{start}, {stop}) for pair {n} is outside the {len(seq)}-frame sequence"
        )
    window = seq.frames[start:stop]
    blurry = window.mean(axis=0, dtype=np.float64).astype(np.float32)
    sharp = seq.frames[start + cfg.tau // 2].copy()
    return BlurPair(blurry=blurry, sharp=sharp, index=n)


def synthesize_video(seq: FrameSequence, cfg: SynthConfig) -> BlurVideo:
    count = 0
    if len(seq) >= cfg.tau:
        count = (len(seq) - cfg.tau) // cfg.interval + 1
    pairs = [synthesize_pair(seq, n, cfg) for n in range(count)]
    return BlurVideo(pairs=pairs, fps=seq.fps / cfg.interval, config=cfg)


def sample_config(rng: np.random.Generator) -> SynthConfig:
    """Draw tau uniformly from {7, 9, 11, 13, 15} and interval from [tau, 2*tau)."""
    tau = int(rng.choice(TAU_CHOICES))
    interval = int(rng.integers(tau, 2 * tau))
    return SynthConfig(tau=tau, interval=interval)


# ---------------------------------------------------------------------------
# Synthetic high-speed sources (desk-scale stand-ins for camera capture)
# ---------------------------------------------------------------------------

GENERATOR_KINDS = ("shifting-texture", "moving-square", "rotating-pattern")


def generate_synthetic_highspeed(kind: str, params: dict, rng: np.random.Generator) -> FrameSequence:
    """Deterministic synthetic footage with sub-pixel per-frame motion.

    ``params`` may set frame_count, height, width, fps, and per-kind knobs
    (velocity for translations, omega for rotation). Per-frame displacement
    is capped at 1 pixel. Ground-truth motion lands in the metadata.
    """
    if kind not in GENERATOR_KINDS:
        raise ValueError(f"unknown generator kind {kind!r}, expected one of {GENERATOR_KINDS}")
    p = dict(params or {})
    frame_count = int(p.pop("frame_count", 48))
    height = int(p.pop("height", 64))
    width = int(p.pop("width", 64))
    fps = float(p.pop("fps", 240.0))
    if kind == "shifting-texture":
        seq = _shifting_texture(frame_count, height, width, fps, p, rng)
    elif kind == "moving-square":
        seq = _moving_square(frame_count, height, width, fps, p, rng)
    else:
        seq = _rotating_pattern(frame_count, height, width, fps, p, rng)
    seq.metadata["kind"] = kind
    return seq


def _check_velocity(velocity) -> tuple[float, float]:
    vx, vy = float(velocity[0]), float(velocity[1])
    if abs(vx) > 1.0 or abs(vy) > 1.0:
        raise ValueError(f"per-frame motion must be <= 1 pixel on each axis, got {(vx, vy)}")
    return vx, vy


def _smooth_texture(height: int, width: int, rng: np.random.Generator, passes: int = 3) -> np.ndarray:
    tex = rng.uniform(0.0, 1.0, (height, width, 3))
    for _ in range(passes):
        # periodic 3x3 box smoothing keeps the texture tileable for shifts
        acc = np.zeros_like(tex)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                acc += np.roll(tex, (dy, dx), axis=(0, 1))
        tex = acc / 9.0
    lo, hi = tex.min(), tex.max()
    return (0.1 + 0.8 * (tex - lo) / max(hi - lo, 1e-9)).astype(np.float64)


def _periodic_shift(tex: np.ndarray, sy: float, sx: float) -> np.ndarray:
    """Sample tex at coordinates displaced by (sy, sx), wrapping at the borders."""
    iy, ix = int(np.floor(sy)), int(np.floor(sx))
    fy, fx = sy - iy, sx - ix
    a = np.roll(tex, (iy, ix), axis=(0, 1))
    if fy == 0.0 and fx == 0.0:
        return a
    b = np.roll(tex, (iy + 1, ix), axis=(0, 1))
    c = np.roll(tex, (iy, ix + 1), axis=(0, 1))
    d = np.roll(tex, (iy + 1, ix + 1), axis=(0, 1))
    return (1 - fy) * (1 - fx) * a + fy * (1 - fx) * b + (1 - fy) * fx * c + fy * fx * d


def _shifting_texture(frame_count, height, width, fps, p, rng) -> FrameSequence:
    vx, vy = _check_velocity(p.get("velocity", (1.0, 0.0)))
    passes = int(p.get("smooth_passes", 3))
    if "texture" in p:
        tex = np.asarray(p["texture"], dtype=np.float64)
        if tex.shape != (height, width, 3):
            raise ValueError(f"texture shape {tex.shape} != {(height, width, 3)}")
    else:
        tex = _smooth_texture(height, width, rng, passes)
    frames = np.empty((frame_count, height, width, 3), dtype=np.float32)
    for t in range(frame_count):
        frames[t] = _periodic_shift(tex, t * vy, t * vx).astype(np.float32)
    return FrameSequence(frames, fps, {"velocity": (vx, vy)})


def _bounce(pos: float, v: float, lo: float, hi: float) -> tuple[float, float]:
    if pos < lo:
        return lo + (lo - pos), -v
    if pos > hi:
        return hi - (pos - hi), -v
    return pos, v


def _moving_square(frame_count, height, width, fps, p, rng) -> FrameSequence:
    vx, vy = _check_velocity(p.get("velocity", (0.8, 0.3)))
    size = float(p.get("size", min(height, width) / 4))
    fg = float(p.get("foreground", 0.9))
    bg = float(p.get("background", 0.15))
    if size + 4 > min(height, width):
        raise ValueError(f"square of size {size} does not fit a {height}x{width} frame")
    x = float(p.get("x0", rng.uniform(1, width - size - 1)))
    y = float(p.get("y0", rng.uniform(1, height - size - 1)))

    ys = np.arange(height, dtype=np.float64)
    xs = np.arange(width, dtype=np.float64)
    frames = np.empty((frame_count, height, width, 3), dtype=np.float32)
    origin = (y, x)
    for t in range(frame_count):
        # per-pixel coverage of the square, exact for an axis-aligned box
        cy = np.clip(np.minimum(ys + 1, y + size) - np.maximum(ys, y), 0.0, 1.0)
        cx = np.clip(np.minimum(xs + 1, x + size) - np.maximum(xs, x), 0.0, 1.0)
        cover = np.outer(cy, cx)
        frames[t] = (bg + (fg - bg) * cover)[..., None].astype(np.float32)
        # reflect at the borders; per-frame displacement stays <= |v|
        x, vx = _bounce(x + vx, vx, 1.0, width - size - 1.0)
        y, vy = _bounce(y + vy, vy, 1.0, height - size - 1.0)
    return FrameSequence(frames, fps, {"velocity": (vx, vy), "origin": origin, "size": size})


def _rotating_pattern(frame_count, height, width, fps, p, rng) -> FrameSequence:
    r_max = float(np.hypot(height, width)) / 2.0
    omega = float(p.get("omega", 0.9 / r_max))
    if abs(omega) * r_max > 1.0:
        raise ValueError(
            f"angular step {omega} moves the corner more than 1 pixel per frame (r_max {r_max:.1f})"
        )
    lam = float(p.get("wavelength", 11.0))
    phase = float(rng.uniform(0, 2 * np.pi))
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    yy, xx = np.mgrid[0:height, 0:width]
    dy, dx = yy - cy, xx - cx
    frames = np.empty((frame_count, height, width, 3), dtype=np.float32)
    for t in range(frame_count):
        ang = omega * t
        u = np.cos(ang) * dx + np.sin(ang) * dy
        v = -np.sin(ang) * dx + np.cos(ang) * dy
        base = 0.5 + 0.22 * np.sin(2 * np.pi * u / lam + phase) + 0.22 * np.cos(2 * np.pi * v / lam)
        for ch, gain in enumerate((1.0, 0.9, 0.8)):
            frames[t, :, :, ch] = (0.5 + gain * (base - 0.5)).astype(np.float32)
    return FrameSequence(frames, fps, {"omega": omega, "wavelength": lam})


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def _axis_weights(n_in: int, n_out: int) -> np.ndarray:
    scale = n_in / n_out
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        a, b = i * scale, (i + 1) * scale
        for j in range(int(np.floor(a)), int(np.ceil(b))):
            m[i, j] = min(b, j + 1) - max(a, j)
    return m / scale


def area_downsample(frames: np.ndarray, ratio: float = 0.75) -> np.ndarray:
    """Box-average resampling of (T, H, W, 3) or (H, W, 3) frames by ratio < 1."""
    if not 0 < ratio < 1:
        raise ValueError(f"downsample ratio must be in (0, 1), got {ratio}")
    single = frames.ndim == 3
    stack = frames[None] if single else frames
    t, h, w, c = stack.shape
    oh, ow = int(round(h * ratio)), int(round(w * ratio))
    mh = _axis_weights(h, oh)
    mw = _axis_weights(w, ow)
    out = np.einsum("oy,tyxc,px->topc", mh, stack.astype(np.float64), mw)
    out = out.astype(np.float32)
    return out[0] if single else out
