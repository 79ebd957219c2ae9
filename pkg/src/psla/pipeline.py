"""Video-level orchestration over synthetic feature streams.

Key frames update a maintained temporal feature (align it to the new key
frame, then blend with learned per-location weights); non-key frames receive
semantics propagated from that temporal feature onto their encoded low-level
features. Frames are processed causally: every non-key frame uses the nearest
preceding key frame's state, except the frames before the first key frame of
a video, which use the first key (the mid-segment schedule leaves them
nothing earlier).

A video run is single-threaded by definition (the temporal state is
sequential); independent videos may run concurrently with independent states.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import EmbeddingPair, align_features, variant_spec
from .errors import ConfigurationError, TrainingError, UsageError
from .fusion import (
    TransformNet,
    TwoStreamFusionNet,
    fuse,
    param_count,
    quality_net_forward,
    transform_net_forward,
    update_net_forward,
)
from .neighborhood import NeighborhoodSpec
from .tensor import ConvParams, GradTape, Tensor, conv2d, mse

MODES = ("S", "F")


@dataclass(frozen=True)
class FrameSchedule:
    """Contiguous segments of `interval` frames (last may be shorter), one key
    frame per segment at the segment's middle."""

    total_frames: int
    interval: int
    key_indices: tuple
    segments: tuple  # (start, end) pairs, end exclusive

    def segment_of(self, t):
        return min(t // self.interval, len(self.segments) - 1)

    def key_for(self, t):
        return self.key_indices[self.segment_of(t)]


def schedule(total_frames: int, interval: int) -> FrameSchedule:
    """Deterministic key-frame schedule: segment middles at the given interval."""
    if total_frames < 1 or interval < 1:
        raise ConfigurationError(
            f"need total_frames >= 1 and interval >= 1, got {total_frames}, {interval}"
        )
    segments = []
    keys = []
    start = 0
    while start < total_frames:
        end = min(start + interval, total_frames)
        segments.append((start, end))
        keys.append(start + (end - start) // 2)
        start = end
    return FrameSchedule(
        total_frames=total_frames,
        interval=interval,
        key_indices=tuple(keys),
        segments=tuple(segments),
    )


@dataclass
class TemporalState:
    """The maintained temporal feature and which key frame last updated it."""

    f_t: Optional[Tensor] = None
    last_key_index: int = -1
    update_count: int = 0

    @property
    def initialized(self):
        return self.f_t is not None


@dataclass
class TrainingTriplet:
    k1: int
    k2: int
    i: int


def sample_triplet(i: int, interval: int, total_frames: int, rng) -> TrainingTriplet:
    """Sample two key-frame indices around non-key frame `i`.

    k1 is drawn uniformly from [i - l, i - l//2], k2 from [i - l//2, i + l//2],
    both windows clamped to the video bounds.
    """
    if not 0 <= i < total_frames:
        raise ConfigurationError(f"frame {i} outside [0, {total_frames})")
    half = interval // 2
    last = total_frames - 1

    def window(lo, hi):
        lo = min(max(lo, 0), last)
        hi = min(max(hi, 0), last)
        return lo, hi

    k1_lo, k1_hi = window(i - interval, i - half)
    k2_lo, k2_hi = window(i - half, i + half)
    return TrainingTriplet(
        k1=int(rng.integers(k1_lo, k1_hi + 1)),
        k2=int(rng.integers(k2_lo, k2_hi + 1)),
        i=i,
    )


@dataclass
class SyntheticVideo:
    """Feature streams with exactly known correspondence ground truth.

    Frame t's content is frame 0's content translated by the cumulative
    displacement `shifts[t]` with replicate-edge fill, so the true
    correspondence offset between a source frame a and a target frame b is
    shifts[a] - shifts[b].
    """

    seed: int
    frames: int
    shifts: list  # cumulative (dy, dx) per frame; shifts[0] == (0, 0)
    high: list  # (C_feat, H, W) per frame
    low: list  # (C_low, H, W) per frame
    heatmaps: list  # (1, H, W) per frame

    @property
    def height(self):
        return self.high[0].height

    @property
    def width(self):
        return self.high[0].width

    def relative_shift(self, source_frame, target_frame):
        sa, sb = self.shifts[source_frame], self.shifts[target_frame]
        return (sa[0] - sb[0], sa[1] - sb[1])


def translate(arr: np.ndarray, shift) -> np.ndarray:
    """Move content by (dy, dx) with replicate-edge fill."""
    dy, dx = shift
    h, w = arr.shape[-2], arr.shape[-1]
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    return np.ascontiguousarray(arr[..., ys[:, None], xs[None, :]])


def _blob(height, width, center, sigma):
    ys = np.arange(height)[:, None]
    xs = np.arange(width)[None, :]
    return np.exp(-(((ys - center[0]) ** 2) + ((xs - center[1]) ** 2)) / (2.0 * sigma**2))


def generate_video(
    seed,
    frames,
    height,
    width,
    c_feat,
    c_low,
    step_choices=((0, 0),),
    steps=None,
    max_cumulative=None,
    feature_noise=0.0,
    low_noise=0.0,
    distinct_boost=0.0,
    cell_normalize=0.0,
    nonnegative=False,
    low_projection="random",
    low_blob_gain=1.0,
    low_decoys=0,
    blob_sigma=None,
    blob_gain=2.0,
) -> SyntheticVideo:
    """Build a drifting synthetic video.

    The first high-level channel carries the task pattern (a Gaussian blob)
    so a 1x1 head can read the target straight off well-aligned features;
    remaining channels carry random content that gives every cell a
    distinctive signature for correspondence. `steps` fixes the per-frame
    displacement sequence explicitly; otherwise steps are drawn uniformly
    from `step_choices`. A positive `cell_normalize` rescales every base cell
    to that norm, which makes the true correspondence the unique affinity
    maximum (cosine 1 against itself) regardless of content collisions.
    """
    rng = np.random.default_rng(seed)
    if c_feat < 1:
        raise ConfigurationError("need at least one high-level channel")
    sigma = blob_sigma if blob_sigma is not None else max(height, width) / 8.0
    blob = _blob(height, width, (height / 2.0, width / 2.0), sigma)

    base = rng.normal(0.0, 1.0, size=(c_feat, height, width))
    base[0] = blob * blob_gain
    if distinct_boost > 0 and c_feat > 1:
        for y in range(height):
            for x in range(width):
                base[1 + (y * width + x) % (c_feat - 1), y, x] += distinct_boost
    if nonnegative:
        base = np.abs(base)
    if cell_normalize > 0:
        base = cell_normalize * base / np.linalg.norm(base, axis=0, keepdims=True)

    if low_projection == "identity":
        if c_low != c_feat:
            raise ConfigurationError("identity low projection needs c_low == c_feat")
        base_low = base.copy()
    elif low_projection == "structured":
        # Channel 0 carries an attenuated copy of the task pattern (a second,
        # independent route to the target), optionally polluted with decoy
        # blobs that only the high-level stream can rule out; the remaining
        # channels mix the distractor content.
        if c_low < 2:
            raise ConfigurationError("structured low projection needs c_low >= 2")
        task = base[0:1].copy()
        for _ in range(low_decoys):
            center = (float(rng.integers(height)), float(rng.integers(width)))
            task[0] += blob_gain * _blob(height, width, center, sigma)
        proj = rng.normal(0.0, 1.0 / np.sqrt(c_feat), size=(c_low - 1, c_feat - 1))
        base_low = np.concatenate(
            [low_blob_gain * task, np.tensordot(proj, base[1:], axes=([1], [0]))],
            axis=0,
        )
    elif low_projection == "random":
        proj = rng.normal(0.0, 1.0 / np.sqrt(c_feat), size=(c_low, c_feat))
        base_low = np.tensordot(proj, base, axes=([1], [0]))
        if nonnegative:
            base_low = np.abs(base_low)
    else:
        raise ConfigurationError(f"unknown low_projection {low_projection!r}")

    if steps is not None:
        if len(steps) != frames - 1:
            raise ConfigurationError(f"need {frames - 1} steps, got {len(steps)}")
        step_seq = [tuple(s) for s in steps]
    else:
        choices = [tuple(c) for c in step_choices]
        step_seq = [choices[rng.integers(len(choices))] for _ in range(frames - 1)]

    shifts = [(0, 0)]
    for dy, dx in step_seq:
        py, px = shifts[-1]
        if max_cumulative is not None:
            # Reflect steps that would push the walk outside the bound, so the
            # replicate-edge degenerate band stays inside the excluded border.
            if abs(py + dy) > max_cumulative:
                dy = -dy
            if abs(px + dx) > max_cumulative:
                dx = -dx
        shifts.append((py + dy, px + dx))

    high, low, heatmaps = [], [], []
    for t in range(frames):
        ft = translate(base, shifts[t])
        if feature_noise > 0:
            ft = ft + feature_noise * rng.normal(size=ft.shape)
        lt = translate(base_low, shifts[t])
        if low_noise > 0:
            lt = lt + low_noise * rng.normal(size=lt.shape)
        high.append(Tensor(ft))
        low.append(Tensor(lt))
        heatmaps.append(Tensor(translate(blob[None], shifts[t])))
    return SyntheticVideo(
        seed=seed, frames=frames, shifts=shifts, high=high, low=low, heatmaps=heatmaps
    )


@dataclass
class PipelineConfig:
    """Desk-scale defaults; paper_scale() gives the published channel sizes."""

    d: int = 4
    interval: int = 10
    channels_low: int = 4
    channels_feat: int = 8
    channels_embed: int = 8
    variant: str = "psla"
    mode: str = "F"
    height: int = 12
    width: int = 12
    frames: int = 20
    temperature: float = 1.0
    fusion_reduce: int = 32
    fusion_hidden: int = 16
    transform_bottleneck: int = 32
    transform_mid: int = 32
    embed_bias: bool = True
    backbone_key_ms: float = 25.0
    backbone_nonkey_ms: float = 5.0
    seed: int = 0

    @staticmethod
    def paper_scale():
        return PipelineConfig(
            channels_low=1024,
            channels_feat=1024,
            channels_embed=256,
            fusion_reduce=256,
            fusion_hidden=16,
            transform_bottleneck=256,
            transform_mid=256,
            height=38,
            width=38,
        )

    _KEYS = {
        "d",
        "interval",
        "channels",
        "variant",
        "mode",
        "height",
        "width",
        "frames",
        "temperature",
        "fusion_reduce",
        "fusion_hidden",
        "transform_bottleneck",
        "transform_mid",
        "embed_bias",
        "backbone_ms",
        "seed",
    }
    _CHANNEL_KEYS = {"low", "feat", "embed"}

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        for key in doc:
            if key not in cls._KEYS:
                raise ConfigurationError(f"unknown config key: {key}")
        kwargs = {}
        for key in ("d", "interval", "height", "width", "frames", "seed"):
            if key in doc:
                kwargs[key] = int(doc[key])
        for key in ("fusion_reduce", "fusion_hidden", "transform_bottleneck", "transform_mid"):
            if key in doc:
                kwargs[key] = int(doc[key])
        if "temperature" in doc:
            kwargs["temperature"] = float(doc["temperature"])
        if "embed_bias" in doc:
            kwargs["embed_bias"] = bool(doc["embed_bias"])
        if "channels" in doc:
            ch = doc["channels"]
            for key in ch:
                if key not in cls._CHANNEL_KEYS:
                    raise ConfigurationError(f"unknown config key: channels.{key}")
            kwargs["channels_low"] = int(ch.get("low", cls.channels_low))
            kwargs["channels_feat"] = int(ch.get("feat", cls.channels_feat))
            kwargs["channels_embed"] = int(ch.get("embed", cls.channels_embed))
        if "backbone_ms" in doc:
            bb = doc["backbone_ms"]
            for key in bb:
                if key not in {"key", "nonkey"}:
                    raise ConfigurationError(f"unknown config key: backbone_ms.{key}")
            kwargs["backbone_key_ms"] = float(bb.get("key", cls.backbone_key_ms))
            kwargs["backbone_nonkey_ms"] = float(bb.get("nonkey", cls.backbone_nonkey_ms))
        if "variant" in doc:
            kwargs["variant"] = str(doc["variant"])
        if "mode" in doc:
            if doc["mode"] not in MODES:
                raise ConfigurationError(f"mode must be one of {MODES}, got {doc['mode']!r}")
            kwargs["mode"] = str(doc["mode"])
        cfg = cls(**kwargs)
        variant_spec(cfg.variant, cfg.d)  # validates the variant name
        return cfg

    def spec(self) -> NeighborhoodSpec | None:
        return variant_spec(self.variant, self.d)


@dataclass
class PipelineNets:
    """Every trainable component of one pipeline configuration."""

    emb: Optional[EmbeddingPair]
    update_net: Optional[TwoStreamFusionNet]
    quality_net: Optional[TwoStreamFusionNet]
    transform: TransformNet
    head: Optional[ConvParams] = None

    @staticmethod
    def build(config: PipelineConfig, rng, with_head=False) -> "PipelineNets":
        emb = None
        if config.channels_embed > 0:
            emb = EmbeddingPair.init(
                config.channels_feat, config.channels_embed, rng, bias=config.embed_bias
            )
        update = TwoStreamFusionNet.init(
            config.channels_feat,
            rng,
            reduce_width=config.fusion_reduce,
            hidden_width=config.fusion_hidden,
        )
        quality = TwoStreamFusionNet.init(
            config.channels_feat,
            rng,
            reduce_width=config.fusion_reduce,
            hidden_width=config.fusion_hidden,
        )
        transform = TransformNet.init(
            config.channels_low,
            config.channels_feat,
            rng,
            bottleneck=config.transform_bottleneck,
            mid_width=config.transform_mid,
        )
        head = ConvParams.init(config.channels_feat, 1, 1, rng) if with_head else None
        return PipelineNets(
            emb=emb, update_net=update, quality_net=quality, transform=transform, head=head
        )

    def propagation_components(self):
        return {
            "embeddings": self.emb,
            "update_net": self.update_net,
            "quality_net": self.quality_net,
            "transform_net": self.transform,
        }

    def propagation_param_count(self):
        return param_count(list(self.propagation_components().values()))

    def trainable(self, mode="F"):
        """Parameter tensors the toy task optimizes for a given mode."""
        parts = [self.transform]
        if mode != "low":
            if self.emb is not None:
                parts.append(self.emb)
            if mode == "F":
                parts.extend([self.update_net, self.quality_net])
        if self.head is not None:
            parts.append(self.head)
        tensors = []
        for part in parts:
            tensors.extend(part.param_tensors())
        return tensors

    def named_arrays(self) -> dict:
        """Flat name -> array view of every parameter, for checkpoints."""
        out = {}

        def add_conv(prefix, conv):
            if conv is None:
                return
            out[f"{prefix}.weight"] = conv.weight.data
            if conv.bias is not None:
                out[f"{prefix}.bias"] = conv.bias.data

        if self.emb is not None:
            add_conv("emb.f", self.emb.f)
            add_conv("emb.g", self.emb.g)
        for name, net in (("update", self.update_net), ("quality", self.quality_net)):
            if net is None:
                continue
            add_conv(f"{name}.reduce", net.reduce)
            add_conv(f"{name}.hidden", net.hidden)
            add_conv(f"{name}.head", net.head)
        add_conv("transform.reduce", self.transform.reduce)
        add_conv("transform.mid", self.transform.mid)
        add_conv("transform.out", self.transform.out)
        add_conv("head", self.head)
        return out

    def load_arrays(self, arrays: dict):
        for name, target in self.named_arrays().items():
            if name not in arrays:
                raise ConfigurationError(f"checkpoint missing layer {name}")
            src = arrays[name]
            if src.shape != target.shape:
                raise ConfigurationError(
                    f"layer {name}: checkpoint shape {src.shape} != {target.shape}"
                )
            target[...] = src


def rfu_step(
    state: TemporalState,
    f_h_key: Tensor,
    emb,
    spec,
    update_net,
    *,
    key_index=None,
    variant="psla",
    temperature=1.0,
    tape: GradTape | None = None,
) -> TemporalState:
    """Advance the temporal feature with a new key frame's features.

    An empty state initializes the temporal feature to the key features
    verbatim. Passing update_net=None replaces the temporal feature instead
    of blending (the propagate-only framework). The updated feature is also
    the key frame's task feature.
    """
    new_state, _ = _rfu_step_detail(
        state,
        f_h_key,
        emb,
        spec,
        update_net,
        key_index=key_index,
        variant=variant,
        temperature=temperature,
        tape=tape,
    )
    return new_state


def _rfu_step_detail(
    state,
    f_h_key,
    emb,
    spec,
    update_net,
    *,
    key_index=None,
    variant="psla",
    temperature=1.0,
    tape=None,
):
    if key_index is None:
        key_index = state.last_key_index + 1
    if state.initialized and state.f_t.data.shape != f_h_key.data.shape:
        raise ConfigurationError(
            f"temporal state dims {state.f_t.data.shape} != key dims {f_h_key.data.shape}"
        )
    if not state.initialized or update_net is None:
        # Initialization, and the propagate-only framework, both take the key
        # features verbatim; no alignment happens.
        t0 = time.perf_counter()
        new_f_t = f_h_key.copy()
        update_ms = (time.perf_counter() - t0) * 1e3
        new_state = TemporalState(
            f_t=new_f_t, last_key_index=key_index, update_count=state.update_count + 1
        )
        return new_state, {
            "weights": None,
            "aligned": None,
            "align_ms": 0.0,
            "update_ms": update_ms,
        }
    t0 = time.perf_counter()
    aligned, weights = align_features(
        f_h_key, state.f_t, emb, variant, spec, temperature=temperature, tape=tape
    )
    t1 = time.perf_counter()
    fusion_weights = update_net_forward(aligned, f_h_key, update_net, tape=tape)
    new_f_t = fuse(fusion_weights, aligned, f_h_key, tape=tape)
    t2 = time.perf_counter()
    new_state = TemporalState(
        f_t=new_f_t, last_key_index=key_index, update_count=state.update_count + 1
    )
    detail = {
        "weights": weights,
        "aligned": aligned,
        "align_ms": (t1 - t0) * 1e3,
        "update_ms": (t2 - t1) * 1e3,
    }
    return new_state, detail


def denseft_step(
    state: TemporalState,
    f_l_nonkey: Tensor,
    transform_net,
    emb,
    spec,
    quality_net,
    *,
    variant="psla",
    temperature=1.0,
    stop_input_gradient=False,
    tape: GradTape | None = None,
) -> Tensor:
    """Generate a non-key frame's semantic features from the temporal state.

    Encodes the low-level features, propagates the temporal feature onto
    them, and (unless quality_net is None) blends encoded detail back in.
    """
    out, _ = _denseft_step_detail(
        state,
        f_l_nonkey,
        transform_net,
        emb,
        spec,
        quality_net,
        variant=variant,
        temperature=temperature,
        stop_input_gradient=stop_input_gradient,
        tape=tape,
    )
    return out


def _denseft_step_detail(
    state,
    f_l_nonkey,
    transform_net,
    emb,
    spec,
    quality_net,
    *,
    variant="psla",
    temperature=1.0,
    stop_input_gradient=False,
    tape=None,
):
    if not state.initialized:
        raise UsageError("denseft_step requires an initialized temporal state")
    t0 = time.perf_counter()
    encoded = transform_net_forward(
        f_l_nonkey, transform_net, stop_input_gradient=stop_input_gradient, tape=tape
    )
    t1 = time.perf_counter()
    propagated, weights = align_features(
        encoded, state.f_t, emb, variant, spec, temperature=temperature, tape=tape
    )
    t2 = time.perf_counter()
    if quality_net is None:
        output = propagated
    else:
        output = quality_net_forward(propagated, encoded, quality_net, tape=tape)
    t3 = time.perf_counter()
    detail = {
        "weights": weights,
        "encoded": encoded,
        "propagated": propagated,
        "transform_ms": (t1 - t0) * 1e3,
        "align_ms": (t2 - t1) * 1e3,
        "quality_ms": (t3 - t2) * 1e3,
    }
    return output, detail


@dataclass
class RunStats:
    frames: list = field(default_factory=list)
    fps_equivalent: float = 0.0
    params_total: int = 0

    def to_json_dict(self):
        return {
            "frames": self.frames,
            "aggregate": {
                "fps_equivalent": self.fps_equivalent,
                "params_total": self.params_total,
            },
        }

    def mean_accuracy(self):
        vals = [
            f["correspondence_accuracy"]
            for f in self.frames
            if f["correspondence_accuracy"] is not None
        ]
        return float(np.mean(vals)) if vals else None


def _accuracy(weights, spec, expected_offset, d):
    """Fraction of interior cells whose argmax weight sits at the true offset.

    Interior excludes a d-wide border band where replicate-edge fill breaks
    the translation ground truth. None when the variant exposes no offsets or
    the map has no interior.
    """
    if weights is None or spec is None:
        return None
    h, w = weights.height, weights.width
    if h <= 2 * d or w <= 2 * d:
        return None
    try:
        expected = spec.offsets.index(tuple(expected_offset))
    except ValueError:
        return 0.0
    arg = weights.argmax_indices()[d : h - d, d : w - d]
    return float(np.mean(arg == expected))


def run_video(
    video: SyntheticVideo,
    config: PipelineConfig,
    nets: PipelineNets | None = None,
    weight_sink: dict | None = None,
):
    """Process a whole synthetic video; returns (per-frame outputs, RunStats).

    fps_equivalent folds the configured backbone cost model (a per-frame
    charge standing in for the out-of-scope heavy/light feature extractors)
    into the measured per-stage times. When `weight_sink` is a dict it
    receives {frame index: normalized weight array} for every aligned frame.
    """
    if config.mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {config.mode!r}")
    spec = config.spec()
    if nets is None:
        nets = PipelineNets.build(config, np.random.default_rng(config.seed))
    update_net = nets.update_net if config.mode == "F" else None
    quality_net = nets.quality_net if config.mode == "F" else None

    sched = schedule(video.frames, config.interval)
    key_set = set(sched.key_indices)
    first_key = sched.key_indices[0]
    state = TemporalState()
    outputs = [None] * video.frames
    frame_stats = [None] * video.frames
    total_ms = 0.0

    def process_key(t):
        nonlocal state, total_ms
        prev_key = state.last_key_index if state.initialized else None
        state, detail = _rfu_step_detail(
            state,
            video.high[t],
            nets.emb,
            spec,
            update_net,
            key_index=t,
            variant=config.variant,
            temperature=config.temperature,
        )
        outputs[t] = state.f_t
        accuracy = None
        if prev_key is not None:
            accuracy = _accuracy(
                detail["weights"], spec, video.relative_shift(prev_key, t), config.d
            )
        if weight_sink is not None and detail["weights"] is not None:
            weight_sink[t] = detail["weights"].normalized.data
        stage = {
            "align": detail["align_ms"],
            "update": detail["update_ms"],
            "backbone_model": config.backbone_key_ms,
        }
        total_ms += sum(stage.values())
        frame_stats[t] = {
            "frame": t,
            "is_key": True,
            "stage_times_ms": stage,
            "correspondence_accuracy": accuracy,
        }

    def process_nonkey(t):
        nonlocal total_ms
        out, detail = _denseft_step_detail(
            state,
            video.low[t],
            nets.transform,
            nets.emb,
            spec,
            quality_net,
            variant=config.variant,
            temperature=config.temperature,
        )
        outputs[t] = out
        accuracy = _accuracy(
            detail["weights"], spec, video.relative_shift(state.last_key_index, t), config.d
        )
        if weight_sink is not None and detail["weights"] is not None:
            weight_sink[t] = detail["weights"].normalized.data
        stage = {
            "transform": detail["transform_ms"],
            "align": detail["align_ms"],
            "quality": detail["quality_ms"],
            "backbone_model": config.backbone_nonkey_ms,
        }
        total_ms += sum(stage.values())
        frame_stats[t] = {
            "frame": t,
            "is_key": False,
            "stage_times_ms": stage,
            "correspondence_accuracy": accuracy,
        }

    # The first key frame is processed ahead of the frames before it: the
    # mid-segment schedule gives those leading frames no preceding key.
    process_key(first_key)
    for t in range(video.frames):
        if t == first_key:
            continue
        if t in key_set:
            process_key(t)
        else:
            process_nonkey(t)

    stats = RunStats(
        frames=frame_stats,
        fps_equivalent=1000.0 * video.frames / total_ms if total_ms > 0 else 0.0,
        params_total=nets.propagation_param_count(),
    )
    return outputs, stats


@dataclass
class TrainResult:
    losses: list  # probe loss per step (index 0 = before any update)
    sampled_losses: list  # per-step loss on the sampled triplet
    nets: PipelineNets
    config: PipelineConfig


def _forward_toy(nets, config, video, triplet, spec, mode, tape=None):
    """One training forward: k1 initializes, k2 updates, frame i is scored."""
    if mode == "low":
        out = transform_net_forward(video.low[triplet.i], nets.transform, tape=tape)
    else:
        state = TemporalState()
        state, _ = _rfu_step_detail(
            state,
            video.high[triplet.k1],
            nets.emb,
            spec,
            None,
            key_index=triplet.k1,
            variant=config.variant,
            temperature=config.temperature,
            tape=tape,
        )
        state, _ = _rfu_step_detail(
            state,
            video.high[triplet.k2],
            nets.emb,
            spec,
            nets.update_net if mode == "F" else None,
            key_index=triplet.k2,
            variant=config.variant,
            temperature=config.temperature,
            tape=tape,
        )
        out = denseft_step(
            state,
            video.low[triplet.i],
            nets.transform,
            nets.emb,
            spec,
            nets.quality_net if mode == "F" else None,
            variant=config.variant,
            temperature=config.temperature,
            tape=tape,
        )
    pred = conv2d(out, nets.head, tape=tape)
    return mse(pred, video.heatmaps[triplet.i], tape=tape)


def train_toy(
    config: PipelineConfig,
    *,
    steps=500,
    learning_rate=0.2,
    num_videos=3,
    probe_size=4,
    video_kwargs=None,
    nets: PipelineNets | None = None,
):
    """Train embeddings, fusion nets, and a 1x1 task head on heatmap regression.

    Plain SGD; the step size drops 10x at two thirds of the run. The reported
    loss curve is evaluated on a fixed probe batch after every update, so it
    is a deterministic function of the parameters (constant at learning rate
    zero). config.mode may additionally be "low" to train the encoded-low-only
    ablation head. Raises TrainingError with the step index if the loss stops
    being finite.
    """
    mode = config.mode
    if mode not in ("F", "S", "low"):
        raise ConfigurationError(f"train mode must be F, S or low, got {mode!r}")
    rng = np.random.default_rng(config.seed)
    spec = config.spec()
    kwargs = dict(
        frames=config.frames,
        height=config.height,
        width=config.width,
        c_feat=config.channels_feat,
        c_low=config.channels_low,
    )
    kwargs.update(video_kwargs or {})
    videos = [
        generate_video(seed=int(rng.integers(2**31)), **kwargs) for _ in range(num_videos)
    ]
    if nets is None:
        nets = PipelineNets.build(config, rng, with_head=True)
    params = nets.trainable(mode)

    probe = []
    for _ in range(probe_size):
        video = videos[int(rng.integers(len(videos)))]
        i = int(rng.integers(config.frames))
        probe.append((video, sample_triplet(i, config.interval, config.frames, rng)))

    def probe_loss():
        total = 0.0
        for video, trip in probe:
            total += float(_forward_toy(nets, config, video, trip, spec, mode).data)
        return total / len(probe)

    losses = [probe_loss()]
    sampled = []
    drop_at = (2 * steps) // 3
    for step in range(steps):
        video = videos[int(rng.integers(len(videos)))]
        i = int(rng.integers(config.frames))
        trip = sample_triplet(i, config.interval, config.frames, rng)
        tape = GradTape()
        loss = _forward_toy(nets, config, video, trip, spec, mode, tape=tape)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError(f"loss diverged at step {step}", step=step)
        sampled.append(value)
        grads = tape.backward(loss)
        lr = learning_rate if step < drop_at else learning_rate / 10.0
        for p in params:
            g = grads.get(p)
            if g is not None:
                p.data -= (lr * g).astype(p.data.dtype)
        losses.append(probe_loss())
    return TrainResult(losses=losses, sampled_losses=sampled, nets=nets, config=config)


def evaluate_toy(nets: PipelineNets, config: PipelineConfig, videos) -> float:
    """Held-out loss: mean heatmap MSE over the non-key frames of the given
    videos, run through the full inference path for the config's mode.

    Non-key frames are scored because only they carry labels during training
    (the key-frame output path is never supervised); the same frame set is
    used for every mode so the comparison is like for like.
    """
    mode = config.mode
    sched = schedule(videos[0].frames, config.interval)
    key_set = set(sched.key_indices)
    total, count = 0.0, 0
    for video in videos:
        if mode == "low":
            outputs = [
                transform_net_forward(video.low[t], nets.transform)
                for t in range(video.frames)
            ]
        else:
            outputs, _ = run_video(video, config, nets=nets)
        for t, out in enumerate(outputs):
            if t in key_set:
                continue
            pred = conv2d(out, nets.head)
            total += float(mse(pred, video.heatmaps[t]).data)
            count += 1
    return total / count
