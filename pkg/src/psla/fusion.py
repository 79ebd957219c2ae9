"""Small conv stacks that blend feature streams, plus parameter accounting.

Two nets share one architecture (TwoStreamFusionNet): reduce the concatenated
streams with a 1x1 conv, refine with a 3x3 conv, and emit two logit maps that
a per-location softmax turns into blending weights summing to one. One
instance updates the temporal feature at key frames, a second complements
propagated features with encoded detail on non-key frames. TransformNet lifts
low-level features to the high-level channel count through a bottleneck.

A rectifier follows every hidden conv layer and never the final layer of a
net. Head layers initialize to zero so blending starts at an unbiased 50/50.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .tensor import ConvParams, GradTape, Tensor, concat_channels, conv2d, relu


@dataclass
class TwoStreamFusionNet:
    """reduce (1x1, 2C -> reduce width) -> hidden (3x3) -> head (3x3, 2 maps)."""

    reduce: ConvParams
    hidden: ConvParams
    head: ConvParams

    def __post_init__(self):
        if self.reduce.kernel_size != 1:
            raise ConfigurationError("fusion reduce layer must be 1x1")
        if self.head.out_channels != 2:
            raise ConfigurationError("fusion head must emit exactly 2 channels")

    @property
    def feature_channels(self):
        return self.reduce.in_channels // 2

    def param_tensors(self):
        return (
            self.reduce.param_tensors()
            + self.hidden.param_tensors()
            + self.head.param_tensors()
        )

    @staticmethod
    def init(feature_channels, rng, reduce_width=256, hidden_width=16, bias=True):
        return TwoStreamFusionNet(
            reduce=ConvParams.init(2 * feature_channels, reduce_width, 1, rng, bias=bias),
            hidden=ConvParams.init(reduce_width, hidden_width, 3, rng, bias=bias),
            head=ConvParams.init(hidden_width, 2, 3, rng, bias=bias, zero=True),
        )


@dataclass
class TransformNet:
    """reduce (1x1, C_low -> bottleneck) -> mid (3x3) -> out (3x3, C_feat)."""

    reduce: ConvParams
    mid: ConvParams
    out: ConvParams

    @property
    def low_channels(self):
        return self.reduce.in_channels

    @property
    def feature_channels(self):
        return self.out.out_channels

    def param_tensors(self):
        return (
            self.reduce.param_tensors()
            + self.mid.param_tensors()
            + self.out.param_tensors()
        )

    @staticmethod
    def init(low_channels, feature_channels, rng, bottleneck=256, mid_width=256, bias=True):
        return TransformNet(
            reduce=ConvParams.init(low_channels, bottleneck, 1, rng, bias=bias),
            mid=ConvParams.init(bottleneck, mid_width, 3, rng, bias=bias),
            out=ConvParams.init(mid_width, feature_channels, 3, rng, bias=bias),
        )

    @staticmethod
    def identity(channels):
        """Pass-through stack (center-tap kernels); exact on nonnegative inputs
        only, because of the rectifiers between layers."""
        eye1 = ConvParams.identity(channels)
        w3 = np.zeros((channels, channels, 3, 3))
        for c in range(channels):
            w3[c, c, 1, 1] = 1.0
        return TransformNet(
            reduce=eye1,
            mid=ConvParams(Tensor(w3.copy()), None),
            out=ConvParams(Tensor(w3.copy()), None),
        )


@dataclass
class FusionWeights:
    """Two (1, H, W) weight maps summing to one at every location."""

    w_hat: Tensor  # weight of the aligned / propagated stream
    w: Tensor  # weight of the current / detail stream


def _two_way_softmax(logits: Tensor, *, tape: GradTape | None = None):
    """Per-location softmax across the 2 head channels, split into two maps."""
    x = logits.data
    m = x.max(axis=0, keepdims=True)
    e = np.exp(x - m)
    prob = e / e.sum(axis=0, keepdims=True)
    w_hat = Tensor(prob[0:1], dtype=x.dtype)
    w = Tensor(prob[1:2], dtype=x.dtype)
    if tape is not None:

        def backward_hat(g):
            full = np.concatenate([g, np.zeros_like(g)], axis=0)
            inner = np.sum(full * prob, axis=0, keepdims=True)
            return (prob * (full - inner),)

        def backward_w(g):
            full = np.concatenate([np.zeros_like(g), g], axis=0)
            inner = np.sum(full * prob, axis=0, keepdims=True)
            return (prob * (full - inner),)

        tape.record([logits], w_hat, backward_hat)
        tape.record([logits], w, backward_w)
    return w_hat, w


def update_net_forward(
    aligned: Tensor,
    current: Tensor,
    net: TwoStreamFusionNet,
    *,
    tape: GradTape | None = None,
) -> FusionWeights:
    """Adaptive per-location blending weights for two feature streams."""
    if aligned.data.shape != current.data.shape:
        raise ConfigurationError(
            f"stream shapes differ: {aligned.data.shape} vs {current.data.shape}"
        )
    if net.reduce.in_channels != aligned.channels + current.channels:
        raise ConfigurationError(
            f"net expects {net.reduce.in_channels} concatenated channels, "
            f"got {aligned.channels + current.channels}"
        )
    x = concat_channels(aligned, current, tape=tape)
    x = relu(conv2d(x, net.reduce, tape=tape), tape=tape)
    x = relu(conv2d(x, net.hidden, tape=tape), tape=tape)
    logits = conv2d(x, net.head, tape=tape)
    w_hat, w = _two_way_softmax(logits, tape=tape)
    return FusionWeights(w_hat=w_hat, w=w)


def fuse(
    weights: FusionWeights,
    aligned: Tensor,
    current: Tensor,
    *,
    tape: GradTape | None = None,
) -> Tensor:
    """Per-location convex blend: w_hat * aligned + w * current."""
    if aligned.data.shape != current.data.shape:
        raise ConfigurationError(
            f"stream shapes differ: {aligned.data.shape} vs {current.data.shape}"
        )
    wh, wc = weights.w_hat.data, weights.w.data
    out = Tensor(wh * aligned.data + wc * current.data, dtype=aligned.data.dtype)
    if tape is not None:
        a, c = aligned.data, current.data

        def backward(g):
            return (
                np.sum(g * a, axis=0, keepdims=True),
                np.sum(g * c, axis=0, keepdims=True),
                g * wh,
                g * wc,
            )

        tape.record([weights.w_hat, weights.w, aligned, current], out, backward)
    return out


def transform_net_forward(
    low: Tensor,
    net: TransformNet,
    *,
    stop_input_gradient: bool = False,
    tape: GradTape | None = None,
) -> Tensor:
    """Encode low-level features up to the high-level channel count.

    `stop_input_gradient=True` detaches the input so no gradient flows back
    into whatever produced the low-level features.
    """
    if low.channels != net.low_channels:
        raise ConfigurationError(
            f"transform net expects {net.low_channels} channels, got {low.channels}"
        )
    x = Tensor(low.data) if stop_input_gradient else low
    x = relu(conv2d(x, net.reduce, tape=tape), tape=tape)
    x = relu(conv2d(x, net.mid, tape=tape), tape=tape)
    return conv2d(x, net.out, tape=tape)


def quality_net_forward(
    propagated: Tensor,
    encoded_low: Tensor,
    net: TwoStreamFusionNet,
    *,
    tape: GradTape | None = None,
) -> Tensor:
    """Blend propagated semantics with encoded detail, same mechanism as the
    update path."""
    weights = update_net_forward(propagated, encoded_low, net, tape=tape)
    return fuse(weights, propagated, encoded_low, tape=tape)


def swap_streams(net: TwoStreamFusionNet) -> TwoStreamFusionNet:
    """The parameter transform realizing the architecture's stream symmetry:
    swap the reduce layer's input-channel blocks and the head's two output
    channels. Feeding the swapped net with swapped inputs reproduces the
    original output exactly."""
    c = net.feature_channels
    rw = net.reduce.weight.data
    swapped_reduce = np.concatenate([rw[:, c:], rw[:, :c]], axis=1)
    hw = net.head.weight.data[::-1].copy()
    hb = None if net.head.bias is None else Tensor(net.head.bias.data[::-1].copy())
    return TwoStreamFusionNet(
        reduce=ConvParams(Tensor(swapped_reduce), _copy_opt(net.reduce.bias)),
        hidden=ConvParams(net.hidden.weight.copy(), _copy_opt(net.hidden.bias)),
        head=ConvParams(Tensor(hw), hb),
    )


def _copy_opt(t: Optional[Tensor]):
    return None if t is None else t.copy()


def param_count(obj) -> int:
    """Exact number of scalar parameters (weights plus biases) in `obj`.

    Accepts ConvParams, nets, embedding pairs, tensors, sequences thereof,
    and None (counted as zero).
    """
    if obj is None:
        return 0
    if isinstance(obj, Tensor):
        return int(obj.size)
    if isinstance(obj, (list, tuple)):
        return sum(param_count(item) for item in obj)
    return sum(int(t.size) for t in obj.param_tensors())
