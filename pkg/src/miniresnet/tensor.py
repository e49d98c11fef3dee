"""Dense tensors with reverse-mode automatic differentiation.

Operations record themselves on the active :class:`Tape` (if any) when at least
one input requires a gradient. ``Tape.backward`` replays the records in reverse
order, so every operation is visited exactly once.

Feature maps use NCHW layout. Values keep the dtype of their inputs: float32
for training and inference, float64 for gradient checks.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, DegenerateBatchError, ShapeError

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "conv2d",
    "batch_norm",
    "tanh",
    "max_pool",
    "global_avg_pool",
    "dense",
    "add",
    "mul",
    "sum",
    "mean",
    "mse_loss",
    "same_padding",
    "conv_output_size",
]


class Tensor:
    """An n-dimensional array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)


class Parameter(Tensor):
    """A learnable leaf tensor. ``decay`` marks it for L2 weight decay."""

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = False, name: str | None = None, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)
        self.decay = decay


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class _Record:
    __slots__ = ("output", "inputs", "rule")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], rule: Callable):
        self.output = output
        self.inputs = inputs
        self.rule = rule


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes are per-thread, so two threads can record
    independent graphs at the same time::

        with Tape() as tape:
            loss = mse_loss(net.forward(x), y)
        tape.backward(loss)
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, output: Tensor, inputs: Sequence[Tensor], rule: Callable) -> None:
        self.records.append(_Record(output, tuple(inputs), rule))
        self._produced.add(id(output))

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and id(t) not in self._produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every requires-grad leaf reached by this tape.

        Leaves recorded on the tape but not connected to ``loss`` get zeros.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            if self.records or not loss.requires_grad:
                raise ContractError("loss was not produced on this tape")
            loss.grad = np.ones_like(loss.data)
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.rule(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for leaf in self.leaves():
            g = grads.get(id(leaf))
            leaf.grad = np.zeros_like(leaf.data) if g is None else g


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _track(inputs: Sequence[Tensor]) -> Tape | None:
    tape = _active_tape()
    if tape is None:
        return None
    if any(t.requires_grad for t in inputs):
        return tape
    return None


def _emit(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    tape = _track(inputs)
    out = Tensor(data, requires_grad=tape is not None)
    if tape is not None:
        tape.record(out, inputs, rule)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Sizing helpers
# ---------------------------------------------------------------------------


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """(before, after) zero padding for "same"; odd remainders go after."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        before, after = same_padding(size, kernel, stride)
        total = before + after
    elif padding == "valid":
        total = 0
    else:
        raise ConfigError(f"padding must be 'same' or 'valid', got {padding!r}")
    return (size + total - kernel) // stride + 1


def _pads(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if padding == "same":
        return same_padding(h, kh, stride), same_padding(w, kw, stride)
    if padding == "valid":
        return (0, 0), (0, 0)
    raise ConfigError(f"padding must be 'same' or 'valid', got {padding!r}")


def _check_stride(stride: int) -> None:
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ConfigError(f"stride must be a positive integer, got {stride!r}")


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-d cross-correlation of an NCHW map with an [out, in, kh, kw] kernel.

    Implemented as im2col (a strided window view) followed by one tensordot.
    """
    _check_stride(stride)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    (pt, pb), (pl, pr) = _pads(h, w, kh, kw, stride, padding)
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xd = x.data
    if pt or pb or pl or pr:
        xd = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    if kh == 1 and kw == 1:
        cols = xd[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
        out = np.tensordot(kernel.data[:, :, 0, 0], cols, axes=([1], [1])).transpose(1, 0, 2, 3)
    else:
        cols = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        out = np.tensordot(cols, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def rule(g):
        gk = gx = None
        if kh == 1 and kw == 1:
            if kernel.requires_grad:
                gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            if x.requires_grad:
                dcols = np.tensordot(kernel.data[:, :, 0, 0], g, axes=([0], [1])).transpose(1, 0, 2, 3)
                dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
                dxp[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride] = dcols
                gx = dxp[:, :, pt : pt + h, pl : pl + w]
        else:
            if kernel.requires_grad:
                gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            if x.requires_grad:
                # dcols: N, Ho, Wo, C, kh, kw
                dcols = np.tensordot(g, kernel.data, axes=([1], [0]))
                dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
                gx = dxp[:, :, pt : pt + h, pl : pl + w]
        return gx, gk

    return _emit(out, (x, kernel), rule)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = 0.99,
    epsilon: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization for (N, C) or (N, C, H, W) inputs.

    In train mode batch statistics are used and the running statistics are
    updated in place (``running = momentum * running + (1 - momentum) * batch``,
    biased batch variance). In infer mode only the running statistics are read.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects 2-d or 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    xd = x.data
    gd = gamma.data.reshape(bshape)
    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateBatchError("batch_norm in train mode needs a batch of at least 2")
        m = xd.size // c
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = np.mean(xc * xc, axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + epsilon)
        xhat = xc * inv_std
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.reshape(c).astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.reshape(c).astype(running_var.dtype)
    elif mode == "infer":
        inv_std = (1.0 / np.sqrt(running_var + epsilon)).astype(xd.dtype).reshape(bshape)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(bshape)) * inv_std
    else:
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    out = xhat * gd + beta.data.reshape(bshape)

    def rule(g):
        gg = np.sum(g * xhat, axis=axes) if gamma.requires_grad else None
        gb = np.sum(g, axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if mode == "train":
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = np.sum(dxhat * xhat, axis=axes, keepdims=True)
                gx = (inv_std / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std
        return gx, gg, gb

    return _emit(out, (x, gamma, beta), rule)


def tanh(x: Tensor) -> Tensor:
    """Elementwise tanh, clamped to the open interval (-1, 1).

    The clamp only touches |x| large enough that tanh rounds to exactly ±1.
    """
    one_below = np.nextafter(np.array(1.0, dtype=x.dtype), np.array(0.0, dtype=x.dtype))
    y = np.clip(np.tanh(x.data), -one_below, one_below)

    def rule(g):
        return (g * (1.0 - y * y),)

    return _emit(y, (x,), rule)


def max_pool(x: Tensor, window=(3, 3), stride: int = 2, padding: str = "same") -> Tensor:
    """Max over sliding windows; "same" padding pads with -inf."""
    _check_stride(stride)
    if x.ndim != 4:
        raise ShapeError(f"max_pool expects 4-d input, got {x.shape}")
    if isinstance(window, (int, np.integer)):
        window = (int(window), int(window))
    kh, kw = window
    n, c, h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"pool window {kh}x{kw} larger than input {h}x{w}")
    (pt, pb), (pl, pr) = _pads(h, w, kh, kw, stride, padding)
    hp, wp = h + pt + pb, w + pl + pr
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xd = x.data
    if pt or pb or pl or pr:
        xd = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=-np.inf)
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, kh * kw)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for k in range(kh * kw):
            i, j = divmod(k, kw)
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.where(arg == k, g, 0)
        return (dxp[:, :, pt : pt + h, pl : pl + w],)

    return _emit(np.ascontiguousarray(out), (x,), rule)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial positions: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def rule(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).copy(),)

    return _emit(out, (x,), rule)


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ W.T + b`` with W of shape (out, in).

    A 1-d input is treated as a single sample and a 1-d result is returned.
    """
    if weights.ndim != 2:
        raise ShapeError(f"dense weights must be 2-d, got {weights.shape}")
    vector = x.ndim == 1
    if x.ndim not in (1, 2) or x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if bias is not None and bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} does not match {weights.shape[0]} outputs")
    xd = x.data[None, :] if vector else x.data
    out = xd @ weights.data.T
    if bias is not None:
        out = out + bias.data
    if vector:
        out = out[0]
    inputs = (x, weights) if bias is None else (x, weights, bias)

    def rule(g):
        g2 = g[None, :] if vector else g
        gx = g2 @ weights.data if x.requires_grad else None
        if gx is not None and vector:
            gx = gx[0]
        gw = g2.T @ xd if weights.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _emit(out, inputs, rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of equal-shaped tensors.

    Backward hands the incoming gradient, unchanged, to both addends.
    """
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def rule(g):
        return g, g

    return _emit(a.data + b.data, (a, b), rule)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a constant array or a tensor."""
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def rule(g):
        return (g * b.data if a.requires_grad else None, g * a.data if b.requires_grad else None)

    return _emit(a.data * b.data, (a, b), rule)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def rule(g):
        return (np.full(shape, g, dtype=x.dtype),)

    return _emit(np.sum(x.data), (x,), rule)


def mean(x: Tensor) -> Tensor:
    shape, size = x.shape, x.size

    def rule(g):
        return (np.full(shape, g / size, dtype=x.dtype),)

    return _emit(np.mean(x.data), (x,), rule)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error; ``target`` is a constant broadcast to ``pred``'s shape."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if t.size != pred.size:
        raise ShapeError(f"mse_loss: {pred.size} predictions vs {t.size} targets")
    t = t.reshape(pred.shape)
    diff = pred.data - t
    n = diff.size

    def rule(g):
        return ((2.0 / n) * g * diff,)

    return _emit(np.mean(diff * diff), (pred,), rule)
