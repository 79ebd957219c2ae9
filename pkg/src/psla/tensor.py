"""Dense-tensor substrate with the exact forward/backward ops the library needs.

Feature maps are rank-3 tensors laid out (channels, height, width) in a
C-contiguous float32 buffer, i.e. channel-major then row-major. Gradients are
recorded on an explicit tape so a backward pass replays the executed ops in
strict reverse order; accumulation order is therefore deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, InvalidInputError, UnsupportedError, UsageError


class Tensor:
    """A dense array plus identity for gradient bookkeeping.

    Storage is float32 by default; verification paths may construct float64
    tensors and every op computes in the dtype of its inputs.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=np.float32):
        self.data = np.ascontiguousarray(data, dtype=dtype)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    # Rank-3 feature-map accessors
    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[-2]

    @property
    def width(self):
        return self.data.shape[-1]

    def copy(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def feature_map(channels, height, width, data=None, dtype=np.float32):
    """Build a rank-3 (C, H, W) tensor, validating the flat-length invariant."""
    if height < 1 or width < 1 or channels < 0:
        raise ConfigurationError(
            f"invalid feature map dims ({channels}, {height}, {width})"
        )
    if data is None:
        return Tensor(np.zeros((channels, height, width)), dtype=dtype)
    arr = np.asarray(data, dtype=dtype)
    if arr.size != channels * height * width:
        raise ConfigurationError(
            f"data length {arr.size} != {channels}*{height}*{width}"
        )
    return Tensor(arr.reshape(channels, height, width), dtype=dtype)


@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    backward: Callable


class Gradients:
    """Accumulated gradients from one backward pass, keyed by tensor identity."""

    def __init__(self):
        self._by_id = {}

    def accumulate(self, tensor, grad):
        key = id(tensor)
        entry = self._by_id.get(key)
        if entry is None:
            # Hold the tensor itself so its id stays live for the dict's lifetime.
            self._by_id[key] = [tensor, grad.astype(tensor.data.dtype, copy=True)]
        else:
            entry[1] += grad

    def get(self, tensor):
        entry = self._by_id.get(id(tensor))
        return None if entry is None else entry[1]

    def __getitem__(self, tensor):
        grad = self.get(tensor)
        if grad is None:
            raise KeyError("no gradient recorded for this tensor")
        return grad

    def __contains__(self, tensor):
        return id(tensor) in self._by_id


class GradTape:
    """Ordered record of executed ops enabling a deterministic backward pass.

    Single-writer: one tape per training step, never shared across concurrent
    steps. Forward ops append; backward replays in strict reverse order and
    accumulates additively when an output feeds multiple consumers.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __len__(self):
        return len(self._records)

    def record(self, inputs, output, backward):
        """Append one op: `backward(out_grad)` must return one gradient array
        (or None) per input, in input order."""
        self._records.append(_Record(tuple(inputs), output, backward))

    def backward(self, output: Tensor, seed=None) -> Gradients:
        """Propagate from `output` back through the tape.

        Raises UsageError if `output` was never produced by a recorded op.
        """
        if not any(rec.output is output for rec in self._records):
            raise UsageError("backward requested for a tensor with no recorded forward")
        grads = Gradients()
        if seed is None:
            seed = np.ones_like(output.data)
        grads.accumulate(output, np.asarray(seed, dtype=output.data.dtype))
        for rec in reversed(self._records):
            out_grad = grads.get(rec.output)
            if out_grad is None:
                continue
            input_grads = rec.backward(out_grad)
            for tensor, grad in zip(rec.inputs, input_grads):
                if grad is not None:
                    grads.accumulate(tensor, grad)
        return grads


@dataclass
class ConvParams:
    """Weights of one convolution layer: weight (out, in, k, k), bias (out,)."""

    weight: Tensor
    bias: Optional[Tensor] = None

    def __post_init__(self):
        w = self.weight.data
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ConfigurationError(f"conv weight must be (out, in, k, k), got {w.shape}")
        if w.shape[2] not in (1, 3):
            raise UnsupportedError(f"kernel size {w.shape[2]} not supported (use 1 or 3)")
        if self.bias is not None and self.bias.data.shape != (w.shape[0],):
            raise ConfigurationError(
                f"bias shape {self.bias.data.shape} != ({w.shape[0]},)"
            )

    @property
    def out_channels(self):
        return self.weight.data.shape[0]

    @property
    def in_channels(self):
        return self.weight.data.shape[1]

    @property
    def kernel_size(self):
        return self.weight.data.shape[2]

    def param_tensors(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    @staticmethod
    def init(in_channels, out_channels, kernel_size, rng, bias=True, zero=False):
        """Fan-in scaled uniform init; `zero=True` starts the layer at zero."""
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if zero:
            w = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(in_channels * kernel_size * kernel_size)
            w = rng.uniform(-bound, bound, size=shape)
        b = Tensor(np.zeros(out_channels)) if bias else None
        return ConvParams(Tensor(w), b)

    @staticmethod
    def identity(channels):
        """1x1 conv passing its input through unchanged (no bias)."""
        w = np.eye(channels).reshape(channels, channels, 1, 1)
        return ConvParams(Tensor(w), None)


def _conv2d_forward(x, w, b):
    out_c, in_c, k, _ = w.shape
    h, wid = x.shape[1], x.shape[2]
    if k == 1:
        out = np.tensordot(w[:, :, 0, 0], x, axes=([1], [0]))
    else:
        pad = (k - 1) // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        out = np.zeros((out_c, h, wid), dtype=np.result_type(x, w))
        for dy in range(k):
            for dx in range(k):
                out += np.tensordot(
                    w[:, :, dy, dx], xp[:, dy : dy + h, dx : dx + wid], axes=([1], [0])
                )
    if b is not None:
        out = out + b[:, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d(x: Tensor, params: ConvParams, padding=None, *, tape: GradTape | None = None) -> Tensor:
    """Cross-correlation with zero padding that preserves spatial dims.

    `padding` must equal (kernel_size - 1) / 2; pass None to use that value.
    """
    k = params.kernel_size
    same = (k - 1) // 2
    if padding is not None and padding != same:
        raise ConfigurationError(f"padding must be {same} for kernel {k}, got {padding}")
    if x.ndim != 3:
        raise ConfigurationError(f"conv2d expects a (C, H, W) map, got rank {x.ndim}")
    if params.in_channels != x.channels:
        raise ConfigurationError(
            f"in_channels {params.in_channels} != input channels {x.channels}"
        )
    w, b = params.weight, params.bias
    out = Tensor(
        _conv2d_forward(x.data, w.data, None if b is None else b.data),
        dtype=x.data.dtype,
    )

    if tape is not None:
        x_data, w_data = x.data, w.data

        def backward(g):
            out_c, in_c, kk, _ = w_data.shape
            h, wid = x_data.shape[1], x_data.shape[2]
            if kk == 1:
                dx = np.tensordot(w_data[:, :, 0, 0].T, g, axes=([1], [0]))
                dw = np.einsum("ihw,ohw->oi", x_data, g)[:, :, None, None]
            else:
                pad = (kk - 1) // 2
                xp = np.pad(x_data, ((0, 0), (pad, pad), (pad, pad)))
                dxp = np.zeros_like(xp)
                dw = np.empty_like(w_data)
                for dy in range(kk):
                    for dxo in range(kk):
                        dxp[:, dy : dy + h, dxo : dxo + wid] += np.tensordot(
                            w_data[:, :, dy, dxo].T, g, axes=([1], [0])
                        )
                        dw[:, :, dy, dxo] = np.einsum(
                            "ihw,ohw->oi", xp[:, dy : dy + h, dxo : dxo + wid], g
                        )
                dx = dxp[:, pad : pad + h, pad : pad + wid]
            grads = [dx, dw]
            if b is not None:
                grads.append(g.sum(axis=(1, 2)))
            return grads

        inputs = [x, w] if b is None else [x, w, b]
        tape.record(inputs, out, backward)
    return out


def relu(x: Tensor, *, tape: GradTape | None = None) -> Tensor:
    """Elementwise max(0, x)."""
    out = Tensor(np.maximum(x.data, 0), dtype=x.data.dtype)
    if tape is not None:
        positive = x.data > 0

        def backward(g):
            return (g * positive,)

        tape.record([x], out, backward)
    return out


def masked_softmax_array(values, mask, axis=-1, temperature=1.0):
    """Stable softmax over `axis` with masked-out entries exactly zero.

    Rows with no valid entry yield NaN; callers must guarantee at least one
    valid entry per row.
    """
    scaled = values / temperature if temperature != 1.0 else values
    neg = np.where(mask, scaled, -np.inf)
    m = np.max(neg, axis=axis, keepdims=True)
    e = np.exp(neg - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def masked_softmax_backward(prob, grad, axis=-1, temperature=1.0):
    inner = np.sum(grad * prob, axis=axis, keepdims=True)
    d = prob * (grad - inner)
    return d / temperature if temperature != 1.0 else d


def softmax_masked(values, mask, *, tape: GradTape | None = None) -> Tensor:
    """Probability vector over the valid entries of `values`.

    Masked-out entries are exactly 0; valid entries are exp(v - max)/sum and
    sum to 1. Raises InvalidInputError when no entry is valid.
    """
    v = values if isinstance(values, Tensor) else Tensor(values)
    m = np.asarray(mask, dtype=bool)
    if v.data.shape != m.shape:
        raise InvalidInputError(f"values shape {v.data.shape} != mask shape {m.shape}")
    if not m.any():
        raise InvalidInputError("softmax_masked requires at least one valid entry")
    out = Tensor(masked_softmax_array(v.data, m, axis=-1), dtype=v.data.dtype)
    if tape is not None:
        prob = out.data

        def backward(g):
            return (masked_softmax_backward(prob, g, axis=-1),)

        tape.record([v], out, backward)
    return out


def concat_channels(a: Tensor, b: Tensor, *, tape: GradTape | None = None) -> Tensor:
    """Stack b's channels after a's; spatial dims must match."""
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ConfigurationError(
            f"spatial mismatch {a.data.shape[1:]} vs {b.data.shape[1:]}"
        )
    out = Tensor(np.concatenate([a.data, b.data], axis=0), dtype=a.data.dtype)
    if tape is not None:
        split = a.channels

        def backward(g):
            return g[:split], g[split:]

        tape.record([a, b], out, backward)
    return out


def sum_all(x: Tensor, *, tape: GradTape | None = None) -> Tensor:
    """Scalar sum of all entries (the canonical loss reduction)."""
    out = Tensor(np.sum(x.data, dtype=np.float64), dtype=x.data.dtype)
    if tape is not None:
        shape = x.data.shape

        def backward(g):
            return (np.broadcast_to(g, shape).copy(),)

        tape.record([x], out, backward)
    return out


def mse(a: Tensor, b: Tensor, *, tape: GradTape | None = None) -> Tensor:
    """Mean squared error between two equally-shaped tensors."""
    if a.data.shape != b.data.shape:
        raise ConfigurationError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    n = diff.size
    out = Tensor(np.mean(diff.astype(np.float64) ** 2), dtype=a.data.dtype)
    if tape is not None:

        def backward(g):
            base = (2.0 / n) * diff * g
            return base, -base

        tape.record([a, b], out, backward)
    return out


def grad_check(fn, inputs: Sequence[Tensor], epsilon=1e-3) -> float:
    """Max relative error between taped gradients and central differences.

    `fn(*inputs, tape=...)` may return any tensor; a summed loss is appended
    when the output is not scalar. Both sides run in 64-bit: the analytic pass
    on float64 copies of the inputs, the numeric side by re-evaluating the
    float64 forward at +/- epsilon per entry. The error for one entry is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if not (1e-4 <= epsilon <= 1e-2):
        raise InvalidInputError(f"epsilon {epsilon} outside [1e-4, 1e-2]")
    work = [Tensor(t.data, dtype=np.float64) for t in inputs]
    tape = GradTape()
    out = fn(*work, tape=tape)
    loss = out if out.data.ndim == 0 else sum_all(out, tape=tape)
    grads = tape.backward(loss)

    def loss_value():
        o = fn(*work, tape=None)
        return float(np.sum(o.data, dtype=np.float64))

    worst = 0.0
    for t in work:
        flat = t.data.reshape(-1)
        g = grads.get(t)
        analytic = np.zeros(flat.size) if g is None else g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_value()
            flat[i] = orig - epsilon
            down = loss_value()
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            denom = max(1.0, abs(analytic[i]), abs(numeric))
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
