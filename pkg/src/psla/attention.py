"""Alignment operators: progressive sparse local attention plus ablation baselines.

Every operator matches each target-feature cell against source cells (at
neighborhood offsets, or globally for the nonlocal baseline), normalizes the
affinities into per-location weights, and aggregates the original source
cells with those weights. Weights are laid out (H, W, K) with the offset axis
innermost so the normalization and aggregation inner loops are contiguous.

Invalid (out-of-bounds) offsets are excluded from normalization through the
validity mask; the stored raw affinity there is a meaningless 0, never an
actual -inf, so tensors stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, UsageError
from .neighborhood import NeighborhoodSpec, ValidityMask, build_dense, build_progressive, make_mask
from .tensor import (
    ConvParams,
    GradTape,
    Tensor,
    conv2d,
    masked_softmax_array,
    masked_softmax_backward,
)

VARIANTS = ("psla", "dense", "matchtrans", "nonlocal")


@dataclass
class EmbeddingPair:
    """1x1 embeddings reducing channel width before affinity computation.

    `f` embeds the source side, `g` the target side; the two never share
    parameters.
    """

    f: ConvParams
    g: ConvParams

    def __post_init__(self):
        if self.f.kernel_size != 1 or self.g.kernel_size != 1:
            raise ConfigurationError("embeddings must be 1x1 convolutions")
        if self.f.out_channels != self.g.out_channels:
            raise ConfigurationError(
                f"embedding widths differ: f={self.f.out_channels} g={self.g.out_channels}"
            )

    @property
    def embed_channels(self):
        return self.f.out_channels

    def param_tensors(self):
        return self.f.param_tensors() + self.g.param_tensors()

    @staticmethod
    def init(in_channels, embed_channels, rng, bias=True):
        return EmbeddingPair(
            f=ConvParams.init(in_channels, embed_channels, 1, rng, bias=bias),
            g=ConvParams.init(in_channels, embed_channels, 1, rng, bias=bias),
        )

    @staticmethod
    def identity(channels):
        return EmbeddingPair(f=ConvParams.identity(channels), g=ConvParams.identity(channels))


@dataclass
class AttentionWeights:
    """Per-location affinities over neighborhood offsets.

    `raw` holds pre-normalization affinities, `normalized` the weight
    distribution (zero at masked-out offsets, summing to one over valid ones).
    """

    height: int
    width: int
    k: int
    raw: Tensor
    mask: ValidityMask
    normalized: Optional[Tensor] = None

    def argmax_indices(self):
        """Per-location index of the strongest normalized weight.

        Ties break toward the lowest offset index (the center first).
        """
        if self.normalized is None:
            raise UsageError("normalize weights before taking the argmax")
        return np.argmax(self.normalized.data, axis=2)


def _offset_slices(dy, dx, h, w):
    """Target-region slice bounds for which (y+dy, x+dx) stays in bounds."""
    ty0, ty1 = max(0, -dy), h - max(0, dy)
    tx0, tx1 = max(0, -dx), w - max(0, dx)
    return ty0, ty1, tx0, tx1


def compute_affinities(
    target_emb: Tensor,
    source_emb: Tensor,
    spec: NeighborhoodSpec,
    *,
    tape: GradTape | None = None,
) -> AttentionWeights:
    """Channel inner products between each target cell and its offset cells."""
    if target_emb.data.shape != source_emb.data.shape:
        raise ConfigurationError(
            f"embedded maps differ: {target_emb.data.shape} vs {source_emb.data.shape}"
        )
    _, h, w = target_emb.data.shape
    k = len(spec)
    mask = make_mask(spec, h, w)
    raw = np.zeros((h, w, k), dtype=target_emb.data.dtype)
    t, s = target_emb.data, source_emb.data
    for i, (dy, dx) in enumerate(spec.offsets):
        ty0, ty1, tx0, tx1 = _offset_slices(dy, dx, h, w)
        if ty0 >= ty1 or tx0 >= tx1:
            continue
        raw[ty0:ty1, tx0:tx1, i] = np.einsum(
            "chw,chw->hw",
            t[:, ty0:ty1, tx0:tx1],
            s[:, ty0 + dy : ty1 + dy, tx0 + dx : tx1 + dx],
        )
    out = Tensor(raw, dtype=raw.dtype)

    if tape is not None:

        def backward(g):
            dt = np.zeros_like(t)
            ds = np.zeros_like(s)
            for i, (dy, dx) in enumerate(spec.offsets):
                ty0, ty1, tx0, tx1 = _offset_slices(dy, dx, h, w)
                if ty0 >= ty1 or tx0 >= tx1:
                    continue
                gi = g[ty0:ty1, tx0:tx1, i][None]
                dt[:, ty0:ty1, tx0:tx1] += gi * s[:, ty0 + dy : ty1 + dy, tx0 + dx : tx1 + dx]
                ds[:, ty0 + dy : ty1 + dy, tx0 + dx : tx1 + dx] += gi * t[:, ty0:ty1, tx0:tx1]
            return dt, ds

        tape.record([target_emb, source_emb], out, backward)
    return AttentionWeights(height=h, width=w, k=k, raw=out, mask=mask)


def normalize_psla(
    weights: AttentionWeights,
    *,
    temperature: float = 1.0,
    tape: GradTape | None = None,
) -> AttentionWeights:
    """Masked softmax over the offset axis, forcing weights to compete."""
    prob = masked_softmax_array(
        weights.raw.data, weights.mask.valid, axis=2, temperature=temperature
    )
    normalized = Tensor(prob, dtype=weights.raw.data.dtype)
    if tape is not None:
        p = normalized.data

        def backward(g):
            return (masked_softmax_backward(p, g, axis=2, temperature=temperature),)

        tape.record([weights.raw], normalized, backward)
    return AttentionWeights(
        height=weights.height,
        width=weights.width,
        k=weights.k,
        raw=weights.raw,
        mask=weights.mask,
        normalized=normalized,
    )


def normalize_matchtrans(
    weights: AttentionWeights,
    *,
    tape: GradTape | None = None,
) -> AttentionWeights:
    """Sum-normalized nonnegative affinities over the valid window.

    Affinities are clamped at zero before normalization; when every clamped
    affinity at a location is zero, the weight falls back to a one-hot on the
    center offset (which is valid everywhere).
    """
    raw = weights.raw.data
    valid = weights.mask.valid
    clamped = np.where(valid, np.maximum(raw, 0), 0)
    total = clamped.sum(axis=2, keepdims=True)
    fallback = total <= 0
    safe_total = np.where(fallback, 1, total)
    prob = clamped / safe_total
    center = np.zeros(weights.k, dtype=raw.dtype)
    center[0] = 1.0
    prob = np.where(fallback, center[None, None, :], prob)
    normalized = Tensor(prob, dtype=raw.dtype)

    if tape is not None:
        active = valid & (raw > 0) & ~fallback
        p = normalized.data
        st = safe_total[:, :, 0]

        def backward(g):
            inner = np.sum(g * p, axis=2, keepdims=True)
            d = (g - inner) / st[:, :, None]
            return (np.where(active, d, 0),)

        tape.record([weights.raw], normalized, backward)
    return AttentionWeights(
        height=weights.height,
        width=weights.width,
        k=weights.k,
        raw=weights.raw,
        mask=weights.mask,
        normalized=normalized,
    )


def aggregate(
    source: Tensor,
    weights: AttentionWeights,
    spec: NeighborhoodSpec,
    *,
    tape: GradTape | None = None,
) -> Tensor:
    """Weighted gather of source cells at the neighborhood offsets."""
    if weights.normalized is None:
        raise UsageError("aggregate requires normalized weights")
    _, h, w = source.data.shape
    if (weights.height, weights.width) != (h, w):
        raise ConfigurationError(
            f"weights are {weights.height}x{weights.width}, source is {h}x{w}"
        )
    p = weights.normalized.data
    s = source.data
    out_data = np.zeros_like(s)
    for i, (dy, dx) in enumerate(spec.offsets):
        ty0, ty1, tx0, tx1 = _offset_slices(dy, dx, h, w)
        if ty0 >= ty1 or tx0 >= tx1:
            continue
        out_data[:, ty0:ty1, tx0:tx1] += (
            p[ty0:ty1, tx0:tx1, i][None] * s[:, ty0 + dy : ty1 + dy, tx0 + dx : tx1 + dx]
        )
    out = Tensor(out_data, dtype=s.dtype)

    if tape is not None:

        def backward(g):
            ds = np.zeros_like(s)
            dp = np.zeros_like(p)
            for i, (dy, dx) in enumerate(spec.offsets):
                ty0, ty1, tx0, tx1 = _offset_slices(dy, dx, h, w)
                if ty0 >= ty1 or tx0 >= tx1:
                    continue
                src = s[:, ty0 + dy : ty1 + dy, tx0 + dx : tx1 + dx]
                ds[:, ty0 + dy : ty1 + dy, tx0 + dx : tx1 + dx] += (
                    p[ty0:ty1, tx0:tx1, i][None] * g[:, ty0:ty1, tx0:tx1]
                )
                dp[ty0:ty1, tx0:tx1, i] = np.einsum(
                    "chw,chw->hw", g[:, ty0:ty1, tx0:tx1], src
                )
            return ds, dp

        tape.record([source, weights.normalized], out, backward)
    return out


def psla_align(
    target: Tensor,
    source: Tensor,
    emb: EmbeddingPair | None,
    spec: NeighborhoodSpec,
    *,
    temperature: float = 1.0,
    tape: GradTape | None = None,
):
    """Align `source` onto `target`: embed, correlate, softmax, aggregate.

    Returns the aligned map together with the attention weights for
    diagnostics. Pass `emb=None` to correlate the raw feature maps.
    """
    if target.data.shape != source.data.shape:
        raise ConfigurationError(
            f"target {target.data.shape} and source {source.data.shape} differ"
        )
    t_emb = target if emb is None else conv2d(target, emb.g, tape=tape)
    s_emb = source if emb is None else conv2d(source, emb.f, tape=tape)
    weights = compute_affinities(t_emb, s_emb, spec, tape=tape)
    weights = normalize_psla(weights, temperature=temperature, tape=tape)
    aligned = aggregate(source, weights, spec, tape=tape)
    return aligned, weights


def matchtrans_align(
    target: Tensor,
    source: Tensor,
    emb: EmbeddingPair | None,
    spec: NeighborhoodSpec,
    *,
    tape: GradTape | None = None,
):
    """Sum-normalized local alignment over a dense window (ablation baseline)."""
    if target.data.shape != source.data.shape:
        raise ConfigurationError(
            f"target {target.data.shape} and source {source.data.shape} differ"
        )
    t_emb = target if emb is None else conv2d(target, emb.g, tape=tape)
    s_emb = source if emb is None else conv2d(source, emb.f, tape=tape)
    weights = compute_affinities(t_emb, s_emb, spec, tape=tape)
    weights = normalize_matchtrans(weights, tape=tape)
    aligned = aggregate(source, weights, spec, tape=tape)
    return aligned, weights


def nonlocal_align(
    target: Tensor,
    source: Tensor,
    emb: EmbeddingPair | None,
    *,
    tape: GradTape | None = None,
) -> Tensor:
    """Global softmax attention over every source position (ablation baseline)."""
    if target.data.shape != source.data.shape:
        raise ConfigurationError(
            f"target {target.data.shape} and source {source.data.shape} differ"
        )
    t_emb = target if emb is None else conv2d(target, emb.g, tape=tape)
    s_emb = source if emb is None else conv2d(source, emb.f, tape=tape)
    c, h, w = source.data.shape
    hw = h * w
    mt = t_emb.data.reshape(-1, hw).T  # (HW, C_emb)
    ms = s_emb.data.reshape(-1, hw)  # (C_emb, HW)
    affinity = mt @ ms
    affinity -= affinity.max(axis=1, keepdims=True)
    e = np.exp(affinity)
    prob = e / e.sum(axis=1, keepdims=True)
    values = source.data.reshape(c, hw).T  # (HW, C)
    out = Tensor((prob @ values).T.reshape(c, h, w), dtype=source.data.dtype)

    if tape is not None:

        def backward(g):
            gm = g.reshape(c, hw).T  # (HW, C)
            dprob = gm @ values.T
            dvalues = prob.T @ gm
            inner = np.sum(dprob * prob, axis=1, keepdims=True)
            daff = prob * (dprob - inner)
            dmt = daff @ ms.T
            dms = mt.T @ daff
            return (
                dmt.T.reshape(t_emb.data.shape),
                dms.reshape(s_emb.data.shape),
                dvalues.T.reshape(source.data.shape),
            )

        tape.record([t_emb, s_emb, source], out, backward)
    return out


def align_features(
    target: Tensor,
    source: Tensor,
    emb: EmbeddingPair | None,
    variant: str,
    spec: NeighborhoodSpec | None = None,
    *,
    temperature: float = 1.0,
    tape: GradTape | None = None,
):
    """Variant dispatcher used by the pipeline and the benchmark harness.

    Returns (aligned map, weights); weights are None for the nonlocal variant.
    """
    if variant == "psla" or variant == "dense":
        return psla_align(target, source, emb, spec, temperature=temperature, tape=tape)
    if variant == "matchtrans":
        return matchtrans_align(target, source, emb, spec, tape=tape)
    if variant == "nonlocal":
        return nonlocal_align(target, source, emb, tape=tape), None
    raise ConfigurationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def variant_spec(variant: str, d: int) -> NeighborhoodSpec | None:
    """The neighborhood a variant operates on (None for nonlocal)."""
    if variant == "psla":
        return build_progressive(d)
    if variant in ("dense", "matchtrans"):
        return build_dense(d)
    if variant == "nonlocal":
        return None
    raise ConfigurationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def brute_force_align(target, source, emb=None, offsets=None):
    """Loop-based reference for the full align path; shares no code with the
    vectorized kernels.

    `offsets` is a list of (dy, dx) pairs; None means every source position
    (the global-attention case). Arithmetic is float64 throughout. Small maps
    only.
    """
    t = np.asarray(target.data, dtype=np.float64)
    s = np.asarray(source.data, dtype=np.float64)
    c, h, w = s.shape
    if h > 16 or w > 16:
        raise ConfigurationError("brute-force oracle is restricted to maps <= 16x16")

    def embed(arr, params):
        if params is None:
            return arr
        wts = np.asarray(params.weight.data, dtype=np.float64)
        bias = None if params.bias is None else np.asarray(params.bias.data, dtype=np.float64)
        out_c = wts.shape[0]
        out = np.zeros((out_c, h, w))
        for o in range(out_c):
            for y in range(h):
                for x in range(w):
                    acc = 0.0 if bias is None else bias[o]
                    for i in range(arr.shape[0]):
                        acc += wts[o, i, 0, 0] * arr[i, y, x]
                    out[o, y, x] = acc
        return out

    te = embed(t, None if emb is None else emb.g)
    se = embed(s, None if emb is None else emb.f)
    ec = te.shape[0]
    result = np.zeros((c, h, w))
    for y in range(h):
        for x in range(w):
            if offsets is None:
                positions = [(yy, xx) for yy in range(h) for xx in range(w)]
            else:
                positions = [
                    (y + dy, x + dx)
                    for (dy, dx) in offsets
                    if 0 <= y + dy < h and 0 <= x + dx < w
                ]
            affs = []
            for (sy, sx) in positions:
                acc = 0.0
                for ch in range(ec):
                    acc += te[ch, y, x] * se[ch, sy, sx]
                affs.append(acc)
            peak = max(affs)
            exps = [np.exp(a - peak) for a in affs]
            denom = sum(exps)
            for (sy, sx), e in zip(positions, exps):
                weight = e / denom
                for ch in range(c):
                    result[ch, y, x] += weight * s[ch, sy, sx]
    return Tensor(result, dtype=np.float64)
