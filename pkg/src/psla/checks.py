"""Gradient-check suite run by the CLI and the acceptance tests.

Each check compares the taped analytic gradient of one operator (or one
composed path) against central differences at seeded small sizes.
"""

from __future__ import annotations

import numpy as np

from .attention import (
    AttentionWeights,
    EmbeddingPair,
    aggregate,
    compute_affinities,
    nonlocal_align,
    normalize_matchtrans,
    normalize_psla,
    psla_align,
)
from .fusion import (
    TransformNet,
    TwoStreamFusionNet,
    fuse,
    quality_net_forward,
    transform_net_forward,
    update_net_forward,
)
from .neighborhood import build_progressive, make_mask
from .tensor import (
    ConvParams,
    Tensor,
    concat_channels,
    conv2d,
    grad_check,
    mse,
    relu,
    softmax_masked,
)


def _rand_map(rng, c, h, w, scale=1.0):
    return Tensor(scale * rng.normal(size=(c, h, w)))


def _conv_check(kernel):
    def build(rng, size):
        c, h, w = size
        x = _rand_map(rng, c, h, w)
        out_c = c + 1
        params = ConvParams.init(c, out_c, kernel, rng)
        params.weight.data[...] = rng.normal(
            size=params.weight.data.shape, scale=0.5
        ).astype(np.float32)
        params.bias.data[...] = rng.normal(size=out_c, scale=0.2).astype(np.float32)

        def fn(xv, wv, bv, tape=None):
            return conv2d(xv, ConvParams(wv, bv), tape=tape)

        return fn, [x, params.weight, params.bias]

    return build


def _relu_check(rng, size):
    c, h, w = size
    x = _rand_map(rng, c, h, w)
    # Keep entries away from the kink so central differences stay valid.
    x.data[np.abs(x.data) < 0.05] += 0.1

    def fn(xv, tape=None):
        return relu(xv, tape=tape)

    return fn, [x]


def _softmax_check(rng, size):
    # A plain summed loss is degenerate here (the outputs always sum to one),
    # so the check scores the softmax through a sum-of-squares loss.
    k = 33
    values = Tensor(rng.normal(size=k))
    mask = rng.random(k) > 0.3
    mask[0] = True
    zeros = Tensor(np.zeros(k))

    def fn(v, tape=None):
        return mse(softmax_masked(v, mask, tape=tape), zeros, tape=tape)

    return fn, [values]


def _concat_check(rng, size):
    c, h, w = size
    a = _rand_map(rng, c, h, w)
    b = _rand_map(rng, c + 1, h, w)

    def fn(av, bv, tape=None):
        return concat_channels(av, bv, tape=tape)

    return fn, [a, b]


def _affinity_check(rng, size):
    c, h, w = size
    spec = build_progressive(2)
    t = _rand_map(rng, c, h, w)
    s = _rand_map(rng, c, h, w)

    def fn(tv, sv, tape=None):
        return compute_affinities(tv, sv, spec, tape=tape).raw

    return fn, [t, s]


def _normalize_psla_check(rng, size):
    _, h, w = size
    spec = build_progressive(2)
    mask = make_mask(spec, h, w)
    raw = Tensor(rng.normal(size=(h, w, len(spec))))
    target = Tensor(rng.normal(size=(h, w, len(spec))))

    def fn(rv, tape=None):
        weights = AttentionWeights(height=h, width=w, k=len(spec), raw=rv, mask=mask)
        return mse(normalize_psla(weights, tape=tape).normalized, target, tape=tape)

    return fn, [raw]


def _normalize_matchtrans_check(rng, size):
    _, h, w = size
    spec = build_progressive(2)
    mask = make_mask(spec, h, w)
    # Keep raw affinities away from the clamp boundary at zero.
    raw = rng.normal(size=(h, w, len(spec)))
    raw = np.where(raw >= 0, raw + 0.5, raw - 0.5)

    target = Tensor(rng.normal(size=(h, w, len(spec))))

    def fn(rv, tape=None):
        weights = AttentionWeights(height=h, width=w, k=len(spec), raw=rv, mask=mask)
        return mse(normalize_matchtrans(weights, tape=tape).normalized, target, tape=tape)

    return fn, [Tensor(raw)]


def _aggregate_check(rng, size):
    c, h, w = size
    spec = build_progressive(2)
    mask = make_mask(spec, h, w)
    source = _rand_map(rng, c, h, w)
    weights_values = Tensor(rng.normal(size=(h, w, len(spec))))

    def fn(sv, wv, tape=None):
        weights = AttentionWeights(
            height=h, width=w, k=len(spec), raw=wv, mask=mask, normalized=wv
        )
        return aggregate(sv, weights, spec, tape=tape)

    return fn, [source, weights_values]


def _psla_check(rng, size):
    c, h, w = size
    spec = build_progressive(2)
    target = _rand_map(rng, c, h, w)
    source = _rand_map(rng, c, h, w)
    emb = EmbeddingPair.init(c, c, rng)

    reference = Tensor(rng.normal(size=(c, h, w)))

    def fn(tv, sv, fw, fb, gw, gb, tape=None):
        pair = EmbeddingPair(f=ConvParams(fw, fb), g=ConvParams(gw, gb))
        aligned, _ = psla_align(tv, sv, pair, spec, tape=tape)
        return mse(aligned, reference, tape=tape)

    return fn, [target, source, emb.f.weight, emb.f.bias, emb.g.weight, emb.g.bias]


def _nonlocal_check(rng, size):
    c, h, w = size
    target = _rand_map(rng, c, h, w, scale=0.5)
    source = _rand_map(rng, c, h, w, scale=0.5)
    emb = EmbeddingPair.init(c, c, rng)

    def fn(tv, sv, fw, gw, tape=None):
        pair = EmbeddingPair(f=ConvParams(fw, None), g=ConvParams(gw, None))
        return nonlocal_align(tv, sv, pair, tape=tape)

    return fn, [target, source, emb.f.weight, emb.g.weight]


def _retry_margin(build_once, margin=8e-3, attempts=500):
    """Redraw until every rectifier pre-activation clears `margin`.

    Central differences are invalid across the rectifier kink; the analytic
    gradient is only meant to match at differentiable points, so the check
    keeps resampling (deterministically, from the seeded rng) until the
    probe sits safely away from every kink.
    """
    fallback = None
    for _ in range(attempts):
        fn, inputs, preacts = build_once()
        fallback = (fn, inputs)
        if min(float(np.abs(p).min()) for p in preacts) > margin:
            return fn, inputs
    return fallback


def _kink_safe_conv(rng, in_channels, out_channels, kernel, gain=2.0):
    fan = in_channels * kernel * kernel
    w = rng.normal(0.0, gain / np.sqrt(fan), size=(out_channels, in_channels, kernel, kernel))
    b = rng.normal(0.0, 0.2, size=out_channels)
    return ConvParams(Tensor(w), Tensor(b))


def _update_net_check(rng, size):
    c, h, w = size

    def build_once():
        net = TwoStreamFusionNet(
            reduce=_kink_safe_conv(rng, 2 * c, 6, 1),
            hidden=_kink_safe_conv(rng, 6, 4, 3),
            head=_kink_safe_conv(rng, 4, 2, 3, gain=0.5),
        )
        aligned = _rand_map(rng, c, h, w)
        current = _rand_map(rng, c, h, w)
        x = concat_channels(aligned, current)
        p1 = conv2d(x, net.reduce)
        p2 = conv2d(relu(p1), net.hidden)

        def fn(av, cv, rw, rb, hw, hb, ow, ob, tape=None):
            netv = TwoStreamFusionNet(
                reduce=ConvParams(rw, rb), hidden=ConvParams(hw, hb), head=ConvParams(ow, ob)
            )
            weights = update_net_forward(av, cv, netv, tape=tape)
            return fuse(weights, av, cv, tape=tape)

        return fn, [aligned, current] + net.param_tensors(), [p1.data, p2.data]

    return _retry_margin(build_once)


def _transform_check(rng, size):
    c, h, w = size
    low_c = max(2, c - 1)

    def build_once():
        net = TransformNet(
            reduce=_kink_safe_conv(rng, low_c, 4, 1),
            mid=_kink_safe_conv(rng, 4, 4, 3),
            out=_kink_safe_conv(rng, 4, c, 3),
        )
        low = _rand_map(rng, low_c, h, w)
        p1 = conv2d(low, net.reduce)
        p2 = conv2d(relu(p1), net.mid)

        def fn(lv, rw, rb, mw, mb, ow, ob, tape=None):
            netv = TransformNet(
                reduce=ConvParams(rw, rb), mid=ConvParams(mw, mb), out=ConvParams(ow, ob)
            )
            return transform_net_forward(lv, netv, tape=tape)

        return fn, [low] + net.param_tensors(), [p1.data, p2.data]

    return _retry_margin(build_once)


def _denseft_path_check(rng, size):
    c, h, w = size
    low_c = max(2, c - 1)
    spec = build_progressive(2)

    def build_once():
        transform = TransformNet(
            reduce=_kink_safe_conv(rng, low_c, 4, 1),
            mid=_kink_safe_conv(rng, 4, 4, 3),
            out=_kink_safe_conv(rng, 4, c, 3, gain=1.0),
        )
        quality = TwoStreamFusionNet(
            reduce=_kink_safe_conv(rng, 2 * c, 6, 1),
            hidden=_kink_safe_conv(rng, 6, 4, 3),
            head=_kink_safe_conv(rng, 4, 2, 3, gain=0.5),
        )
        emb = EmbeddingPair.init(c, c, rng)
        low = _rand_map(rng, low_c, h, w)
        f_t = _rand_map(rng, c, h, w)

        p1 = conv2d(low, transform.reduce)
        p2 = conv2d(relu(p1), transform.mid)
        encoded = conv2d(relu(p2), transform.out)
        propagated, _ = psla_align(encoded, f_t, emb, spec)
        x = concat_channels(propagated, encoded)
        q1 = conv2d(x, quality.reduce)
        q2 = conv2d(relu(q1), quality.hidden)

        def fn(lv, ftv, tape=None):
            enc = transform_net_forward(lv, transform, tape=tape)
            prop, _ = psla_align(enc, ftv, emb, spec, tape=tape)
            return quality_net_forward(prop, enc, quality, tape=tape)

        return fn, [low, f_t], [p1.data, p2.data, q1.data, q2.data]

    return _retry_margin(build_once)


CHECKS = [
    ("conv2d_1x1", _conv_check(1)),
    ("conv2d_3x3", _conv_check(3)),
    ("relu", _relu_check),
    ("softmax_masked", _softmax_check),
    ("concat_channels", _concat_check),
    ("affinity", _affinity_check),
    ("normalize_psla", _normalize_psla_check),
    ("normalize_matchtrans", _normalize_matchtrans_check),
    ("aggregate", _aggregate_check),
    ("psla_align", _psla_check),
    ("nonlocal_align", _nonlocal_check),
    ("update_net", _update_net_check),
    ("transform_net", _transform_check),
    ("denseft_path", _denseft_path_check),
]


def gradient_check_suite(seed=0, size=(3, 6, 6), epsilon=1e-3):
    """Run every check; returns a list of (name, max relative error)."""
    results = []
    for name, build in CHECKS:
        rng = np.random.default_rng(seed)
        fn, inputs = build(rng, size)
        results.append((name, grad_check(fn, inputs, epsilon)))
    return results
