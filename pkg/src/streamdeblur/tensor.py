"""Dense tensors with reverse-mode automatic differentiation.

Arrays are float32 by default (float64 is supported so numerical oracles can
recompute in higher precision). The canonical image layout is
(batch, channels, height, width). There is no implicit broadcasting: binary
ops require equal shapes, with the single exception of 0-d scalar tensors
and plain Python numbers.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "ConvSpec",
    "same_spec",
    "no_grad",
    "grad_enabled",
    "KinkTrace",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "tanh",
    "absolute",
    "relu",
    "clamp_upper",
    "tsum",
    "concat_channels",
    "slice_channels",
    "nearest_upsample",
    "conv2d",
    "backward",
    "finite_diff_grad",
]


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


_GRAD_ENABLED = True
_KINK_TRACE: "KinkTrace | None" = None


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / oracles)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class KinkTrace:
    """Records which side of its kink every abs/relu/clamp input falls on.

    Finite-difference gradient checks are unreliable when a perturbation
    moves an activation across a non-smooth point. Running the same function
    twice under two traces and comparing them detects exactly that: if any
    sign pattern differs between the theta+eps and theta-eps evaluations,
    the perturbed coordinate crossed a kink and should be excluded.
    """

    def __init__(self):
        self.patterns: list[np.ndarray] = []

    def __enter__(self):
        global _KINK_TRACE
        self._prev = _KINK_TRACE
        _KINK_TRACE = self
        return self

    def __exit__(self, *exc):
        global _KINK_TRACE
        _KINK_TRACE = self._prev
        return False

    def record(self, pattern: np.ndarray) -> None:
        self.patterns.append(pattern)

    def matches(self, other: "KinkTrace") -> bool:
        if len(self.patterns) != len(other.patterns):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.patterns, other.patterns))


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class Tensor:
    """A dense array plus an optional backward-graph record.

    Leaves created with ``requires_grad=True`` accumulate into ``.grad`` when
    ``backward`` runs; repeated backward calls keep accumulating until
    ``zero_grad``. Intermediate results never retain gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def scalar(value, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.asarray(value, dtype=dtype), requires_grad=requires_grad)

    # -- basic accessors -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- graph plumbing ---------------------------------------------------------

    def _is_leaf(self) -> bool:
        return not self._parents

    # operator sugar over the op set below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def tanh(self):
        return tanh(self)

    def abs(self):
        return absolute(self)

    def relu(self):
        return relu(self)

    def clamp_upper(self, limit: float):
        return clamp_upper(self, limit)

    def sum(self):
        return tsum(self)

    def backward(self) -> None:
        backward(self)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result, attaching graph edges only when tracking is on."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} do not match")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: operand dtypes {a.data.dtype} and {b.data.dtype} do not match")


def _coerce_operands(a, b, op: str):
    """Resolve the scalar-operand exception for a binary op.

    Returns (a, b, mode) where mode is 'tt' for equal-shape tensors,
    'ts'/'st' when the second/first operand is a scalar (Python number or
    0-d tensor).
    """
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if a_t and b_t:
        if a.data.ndim == 0 and b.data.ndim > 0:
            return a, b, "st"
        if b.data.ndim == 0 and a.data.ndim > 0:
            return a, b, "ts"
        _check_same_shape(a, b, op)
        return a, b, "tt"
    if a_t and isinstance(b, (int, float)):
        return a, Tensor.scalar(b, dtype=a.data.dtype), "ts"
    if b_t and isinstance(a, (int, float)):
        return Tensor.scalar(a, dtype=b.data.dtype), b, "st"
    raise TypeError(f"{op}: unsupported operand types {type(a)} and {type(b)}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if shape == ():
        return np.asarray(grad.sum(), dtype=grad.dtype)
    return grad


# -- elementwise ops -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b, _ = _coerce_operands(a, b, "add")

    def vjp(g):
        return (_reduce_to(g, a.shape), _reduce_to(g, b.shape))

    return _node(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b, _ = _coerce_operands(a, b, "sub")

    def vjp(g):
        return (_reduce_to(g, a.shape), _reduce_to(-g, b.shape))

    return _node(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b, _ = _coerce_operands(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return (_reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape))

    return _node(ad * bd, (a, b), vjp)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def vjp(g):
        return (g * c,)

    return _node(a.data * c, (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), vjp)


def absolute(a: Tensor) -> Tensor:
    if _KINK_TRACE is not None:
        _KINK_TRACE.record(np.sign(a.data).astype(np.int8))
    sign = np.sign(a.data)  # subgradient at 0 is 0

    def vjp(g):
        return (g * sign,)

    return _node(np.abs(a.data), (a,), vjp)


def relu(a: Tensor) -> Tensor:
    if _KINK_TRACE is not None:
        _KINK_TRACE.record(a.data > 0)
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _node(np.where(mask, a.data, a.data.dtype.type(0)), (a,), vjp)


def clamp_upper(a: Tensor, limit: float) -> Tensor:
    limit = a.data.dtype.type(limit)
    if _KINK_TRACE is not None:
        _KINK_TRACE.record(a.data < limit)
    mask = a.data < limit  # gradient passes only strictly below the limit

    def vjp(g):
        return (g * mask,)

    return _node(np.minimum(a.data, limit), (a,), vjp)


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    dtype = a.data.dtype

    def vjp(g):
        return (np.full(shape, g, dtype=dtype),)

    return _node(np.asarray(a.data.sum(), dtype=dtype), (a,), vjp)


# -- structural ops ------------------------------------------------------------


def concat_channels(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels: need at least one part")
    first = parts[0]
    for p in parts[1:]:
        if p.data.ndim != 4 or first.data.ndim != 4:
            raise ShapeError("concat_channels: parts must be 4-d (N, C, H, W)")
        same = (
            p.shape[0] == first.shape[0]
            and p.shape[2] == first.shape[2]
            and p.shape[3] == first.shape[3]
        )
        if not same:
            raise ShapeError(
                f"concat_channels: spatial/batch extents differ, {first.shape} vs {p.shape}"
            )
    if len(parts) == 1:
        p = parts[0]
        return _node(p.data, (p,), lambda g: (g,))
    data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def vjp(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return _node(data, tuple(parts), vjp)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 4:
        raise ShapeError("slice_channels: input must be 4-d (N, C, H, W)")
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"slice_channels: range [{start}, {stop}) invalid for {a.shape[1]} channels")

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _node(a.data[:, start:stop].copy(), (a,), vjp)


def nearest_upsample(a: Tensor, factor: int) -> Tensor:
    if a.data.ndim != 4:
        raise ShapeError("nearest_upsample: input must be 4-d (N, C, H, W)")
    if factor < 1:
        raise ShapeError(f"nearest_upsample: factor must be >= 1, got {factor}")
    if factor == 1:
        return _node(a.data, (a,), lambda g: (g,))
    n, c, h, w = a.shape
    data = np.repeat(np.repeat(a.data, factor, axis=2), factor, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _node(data, (a,), vjp)


# -- convolution ---------------------------------------------------------------


def _normalize_padding(padding) -> tuple[int, int, int, int]:
    if isinstance(padding, int):
        return (padding,) * 4
    padding = tuple(int(p) for p in padding)
    if len(padding) == 2:
        return (padding[0], padding[0], padding[1], padding[1])
    if len(padding) == 4:
        return padding
    raise ShapeError(f"padding must be an int, (ph, pw), or 4 per-side counts, got {padding}")


@dataclass(frozen=True)
class ConvSpec:
    """Shape contract of one 2-d convolution.

    ``padding`` holds explicit per-side zero-pad counts (top, bottom, left,
    right); an int or an (ph, pw) pair is expanded symmetrically. Kernel
    extents must be odd. Output extents follow
    (in + pad_lo + pad_hi - k) // stride + 1 and must be positive.
    """

    out_channels: int
    in_channels: int
    kernel_height: int
    kernel_width: int
    stride: int = 1
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "padding", _normalize_padding(self.padding))
        for k in (self.kernel_height, self.kernel_width):
            if k < 1 or k % 2 == 0:
                raise ShapeError(f"kernel extents must be odd and >= 1, got {k}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.out_channels < 1 or self.in_channels < 1:
            raise ShapeError("channel counts must be positive")
        if any(p < 0 for p in self.padding):
            raise ShapeError(f"padding counts must be non-negative, got {self.padding}")

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_height, self.kernel_width)

    def out_extent(self, in_h: int, in_w: int) -> tuple[int, int]:
        pt, pb, pl, pr = self.padding
        return (
            _out_extent(in_h, pt, pb, self.kernel_height, self.stride, "height"),
            _out_extent(in_w, pl, pr, self.kernel_width, self.stride, "width"),
        )

    def parameter_count(self) -> int:
        return self.out_channels * (self.in_channels * self.kernel_height * self.kernel_width + 1)


def same_spec(in_channels: int, out_channels: int, kernel: int, stride: int = 1) -> ConvSpec:
    """ConvSpec with pad (k-1)/2 per side: output extent is in/stride for even inputs."""
    pad = (kernel - 1) // 2
    return ConvSpec(out_channels, in_channels, kernel, kernel, stride, pad)


def _out_extent(extent: int, plo: int, phi: int, k: int, stride: int, axis: str) -> int:
    span = extent + plo + phi - k
    if span < 0:
        raise ShapeError(
            f"conv2d: {axis} extent {extent} with padding ({plo}, {phi}) is smaller "
            f"than the kernel extent {k}"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, oh * ow)


def conv2d(x: Tensor, weights: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Zero-padded strided cross-correlation over (N, C, H, W) tensors."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d (N, C, H, W), got shape {x.shape}")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(
            f"conv2d: input has {c} channels (shape {x.shape}) but spec expects "
            f"{spec.in_channels} (weights shape {tuple(spec.weight_shape())})"
        )
    if weights.shape != spec.weight_shape():
        raise ShapeError(
            f"conv2d: weights shape {weights.shape} does not match spec {spec.weight_shape()}"
        )
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(
            f"conv2d: bias shape {bias.shape} does not match ({spec.out_channels},)"
        )
    kh, kw, stride = spec.kernel_height, spec.kernel_width, spec.stride
    pt, pb, pl, pr = spec.padding
    oh, ow = spec.out_extent(h, w)

    if any(spec.padding):
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = weights.data.reshape(spec.out_channels, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.reshape(n, spec.out_channels, oh, ow)

    parents = (x, weights) if bias is None else (x, weights, bias)
    x_tracked = x.requires_grad
    w_tracked = weights.requires_grad
    hp, wp = xp.shape[2], xp.shape[3]

    def vjp(g):
        gm = g.reshape(n, spec.out_channels, oh * ow)
        gw = None
        if w_tracked:
            gw = np.einsum("nol,nkl->ok", gm, cols, optimize=True).reshape(weights.shape)
        gx = None
        if x_tracked:
            gcols = np.matmul(wmat.T, gm).reshape(n, c, kh, kw, oh, ow)
            gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[
                        :, :, i, j
                    ]
            gx = gxp[:, :, pt : hp - pb, pl : wp - pr]
        if bias is None:
            return (gx, gw)
        gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    return _node(out, parents, vjp)


# -- backward pass ---------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked leaf reachable from a scalar loss.

    Repeated calls accumulate; intermediates never retain gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss was not produced by tracked operations")
    order = _toposort(loss)
    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        if node._is_leaf():
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            held = flows.get(key)
            flows[key] = pg if held is None else held + pg


# -- finite differences --------------------------------------------------------


def finite_diff_grad(f, x: Tensor, eps: float = 1e-3) -> Tensor:
    """Central-difference estimate of d f(x) / dx, elementwise.

    ``f`` must be deterministic and return a single-element tensor. The
    estimate is computed at the dtype of ``x``; pass a float64 tensor for an
    oracle-grade result.
    """
    base = x.data.copy()
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    probe = Tensor(base)
    pf = probe.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            pf[i] = orig + eps
            hi = f(probe).item()
            pf[i] = orig - eps
            lo = f(probe).item()
            pf[i] = orig
            grad[i] = (hi - lo) / (2.0 * eps)
    return Tensor(grad.reshape(x.shape))
