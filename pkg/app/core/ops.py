"""Differentiable primitives over :class:`~app.core.tensor.Tensor`.

Every primitive validates its operands, refuses non-finite results, charges its
cost to the active :class:`~app.core.flop_counter.FlopCounter` and, when a
gradient tape tracks one of its inputs, records a backward closure.

Costing convention: conv2d and matmul count 2 FLOPs per multiply-add, bias adds
and elementwise arithmetic 1 per output element, sigmoid 4 and softmax 5 per
element; pure data movement (reshape, transpose, split, concat, gather,
resampling, argmax) is free.
"""
import builtins
import logging
import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.exceptions import NonFiniteError, ShapeError
from app.core.flop_counter import record_flops
from app.core.tensor import BackwardFn, Tensor, active_tape

logger = logging.getLogger(__name__)

SIGMOID_FLOPS = 4
SOFTMAX_FLOPS = 5

Operand = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: Operand) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn, flops: int = 0) -> Tensor:
    if not np.all(np.isfinite(data)):
        logger.error(f"{op} produced non-finite values (output shape {np.shape(data)})")
        raise NonFiniteError(f"{op} produced non-finite values (output shape {np.shape(data)})")
    out = Tensor._wrap(data)
    if flops:
        record_flops(op, int(flops))
    tape = active_tape()
    if tape is not None and builtins.any(tape.tracks(t) for t in inputs):
        tape.record(op, tuple(inputs), out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------- elementwise

def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), backward, flops=math.prod(shape))


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), backward, flops=math.prod(shape))


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", a.data * b.data, (a, b), backward, flops=math.prod(shape))


def div(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise NonFiniteError(f"div: zero divisor in operand of shape {b.shape}")

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _emit("div", a.data / b.data, (a, b), backward, flops=math.prod(shape))


def neg(a: Operand) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,), flops=a.size)


def relu(a: Operand) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), flops=a.size)


def exp(a: Operand) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,), flops=a.size)


def log(a: Operand) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError(f"log: non-positive entries in operand of shape {a.shape}")
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,), flops=a.size)


def sigmoid(a: Operand) -> Tensor:
    a = as_tensor(a)
    # tanh form is overflow-free and exact at 0
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),), flops=SIGMOID_FLOPS * a.size)


def softmax(a: Operand, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] < 1:
        raise ShapeError(f"softmax needs a non-empty axis {axis}, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (a,), backward, flops=SOFTMAX_FLOPS * a.size)


def binary_cross_entropy_with_logits(logits: Operand, targets: Operand) -> Tensor:
    """Per-element BCE between ``sigmoid(logits)`` and constant ``targets``."""
    logits, targets = as_tensor(logits), as_tensor(targets)
    if logits.shape != targets.shape:
        raise ShapeError(f"bce: logits {logits.shape} vs targets {targets.shape}")
    x, t = logits.data, targets.data
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    prob = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _emit("bce", out, (logits,), lambda g: (g * (prob - t),), flops=logits.size)


# ---------------------------------------------------------------- reductions

def sum(a: Operand, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), backward, flops=a.size)


def mean(a: Operand, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else math.prod(
        a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))
    )
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- data movement

def reshape(a: Operand, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}")
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Operand, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tensors, backward)


def split(a: Operand, sections: Union[int, Sequence[int]], axis: int = 0) -> List[Tensor]:
    """Split along ``axis`` into ``sections`` equal parts or parts of the given sizes."""
    a = as_tensor(a)
    extent = a.shape[axis]
    if isinstance(sections, int):
        if sections < 1 or extent % sections:
            raise ShapeError(f"split: extent {extent} on axis {axis} is not divisible by {sections}")
        sizes = [extent // sections] * sections
    else:
        sizes = list(sections)
        if builtins.sum(sizes) != extent or builtins.any(s < 0 for s in sizes):
            raise ShapeError(f"split: sizes {sizes} do not partition extent {extent}")
    outputs = []
    start = 0
    for size in sizes:
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + size)
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros(a.shape)
            full[index] = g
            return (full,)

        outputs.append(_emit("split", a.data[index], (a,), backward))
        start += size
    return outputs


def split_channels(a: Operand, n: int) -> List[Tensor]:
    """Split an N×C×H×W tensor into ``n`` equal-channel tensors."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"split_channels needs a channel axis, got shape {a.shape}")
    return split(a, n, axis=1)


# ---------------------------------------------------------------- contraction

def matmul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast")
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    flops = 2 * m * k * n * math.prod(batch)
    return _emit("matmul", np.matmul(a.data, b.data), (a, b), backward, flops=flops)


def conv_output_extent(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(
    input: Operand,
    weight: Operand,
    bias: Optional[Operand] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1
) -> Tensor:
    """Zero-padded 2-D cross-correlation, N×Cin×H×W with Cout×Cin×kh×kw."""
    x, w = as_tensor(input), as_tensor(weight)
    b = as_tensor(bias) if bias is not None else None
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride}, padding={padding}, dilation={dilation}")
    N, C, H, W = x.shape
    O, Cin, kh, kw = w.shape
    if Cin != C:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Cin}")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {O} output channels")
    Ho = conv_output_extent(H, kh, stride, padding, dilation)
    Wo = conv_output_extent(W, kw, stride, padding, dilation)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent {Ho}x{Wo} for input {H}x{W}")

    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = []
    for i in range(kh):
        for j in range(kw):
            r, c = i * dilation, j * dilation
            windows.append((
                slice(r, r + stride * (Ho - 1) + 1, stride),
                slice(c, c + stride * (Wo - 1) + 1, stride),
            ))
    cols = np.empty((N, C, kh * kw, Ho, Wo))
    for t, (rows, columns) in enumerate(windows):
        cols[:, :, t] = xp[:, :, rows, columns]
    cols = cols.reshape(N, C * kh * kw, Ho * Wo)
    wmat = w.data.reshape(O, C * kh * kw)
    out = np.matmul(wmat, cols).reshape(N, O, Ho, Wo)
    if b is not None:
        out = out + b.data.reshape(1, O, 1, 1)

    def backward(g):
        g2 = g.reshape(N, O, Ho * Wo)
        gw = np.matmul(g2, np.swapaxes(cols, 1, 2)).sum(axis=0).reshape(w.shape)
        gcols = np.matmul(wmat.T, g2).reshape(N, C, kh * kw, Ho, Wo)
        gxp = np.zeros(xp.shape)
        for t, (rows, columns) in enumerate(windows):
            gxp[:, :, rows, columns] += gcols[:, :, t]
        gx = gxp[:, :, p:p + H, p:p + W]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    flops = 2 * kh * kw * C * O * Ho * Wo * N + (O * Ho * Wo * N if b is not None else 0)
    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", out, inputs, backward, flops=flops)


# ---------------------------------------------------------------- resampling

def upsample_nearest(input: Operand, factor: int) -> Tensor:
    x = as_tensor(input)
    if factor < 1:
        raise ShapeError(f"upsample_nearest: factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest expects N×C×H×W, got {x.shape}")
    N, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(N, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return _emit("upsample_nearest", out, (x,), backward)


def avgpool_down(input: Operand, factor: int) -> Tensor:
    x = as_tensor(input)
    if factor < 1:
        raise ShapeError(f"avgpool_down: factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"avgpool_down expects N×C×H×W, got {x.shape}")
    N, C, H, W = x.shape
    if H % factor or W % factor:
        raise ShapeError(f"avgpool_down: extents {H}x{W} are not divisible by {factor}")
    out = x.data.reshape(N, C, H // factor, factor, W // factor, factor).mean(axis=(3, 5))

    def backward(g):
        spread = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        return (spread / (factor * factor),)

    return _emit("avgpool_down", out, (x,), backward)


# ---------------------------------------------------------------- selection

def spatial_argmax(input: Operand) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Global max over the trailing H×W axes.

    Returns the maxima (differentiable, routed to the selected cell only) and
    integer row/column indices. Ties go to the lowest row-major index.
    """
    x = as_tensor(input)
    if x.ndim < 2 or x.shape[-1] * x.shape[-2] == 0:
        raise ShapeError(f"spatial_argmax needs a non-empty H×W map, got shape {x.shape}")
    H, W = x.shape[-2:]
    lead = x.shape[:-2]
    flat = x.data.reshape(-1, H * W)
    index = np.argmax(flat, axis=1)
    rows = np.arange(flat.shape[0])
    values = flat[rows, index].reshape(lead)

    def backward(g):
        full = np.zeros(flat.shape)
        full[rows, index] = np.reshape(g, -1)
        return (full.reshape(x.shape),)

    out = _emit("argmax", values, (x,), backward)
    return out, (index // W).reshape(lead), (index % W).reshape(lead)


def global_max_argmax(map: Operand) -> Tuple[Tensor, int, int]:
    """Maximum of an H×W map with its column ``x`` and row ``y``."""
    m = as_tensor(map)
    if m.ndim != 2:
        raise ShapeError(f"global_max_argmax expects an H×W map, got shape {m.shape}")
    value, ys, xs = spatial_argmax(m)
    return value, int(xs), int(ys)


def gather_points(input: Operand, ys: np.ndarray, xs: np.ndarray) -> Tensor:
    """Collect ``input[n, :, ys[n, k], xs[n, k]]`` into an N×n×C tensor."""
    x = as_tensor(input)
    ys = np.asarray(ys, dtype=np.int64)
    xs = np.asarray(xs, dtype=np.int64)
    if x.ndim != 4:
        raise ShapeError(f"gather_points expects N×C×H×W, got {x.shape}")
    N, C, H, W = x.shape
    if ys.shape != xs.shape or ys.ndim != 2 or ys.shape[0] != N:
        raise ShapeError(f"gather_points: location arrays {ys.shape}/{xs.shape} do not match batch {N}")
    if np.any(ys < 0) or np.any(ys >= H) or np.any(xs < 0) or np.any(xs >= W):
        raise ShapeError(f"gather_points: location out of range for {H}x{W} map")
    batch = np.arange(N)[:, None]
    out = x.data[batch, :, ys, xs]

    def backward(g):
        full = np.zeros(x.shape)
        np.add.at(full, (batch, slice(None), ys, xs), g)
        return (full,)

    return _emit("gather", out, (x,), backward)
