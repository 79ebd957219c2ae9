"""Benchmark grids over alignment variants and pipeline configurations.

Timing uses a monotonic clock; every cell runs a fixed warm-up that is
discarded, then `repeat` measured repetitions (at least 5), and reports
medians and p90s, never means. Grid cells may execute in parallel worker
threads (capped by the PSLA_THREADS environment variable, default 1; note
that parallel timing distorts medians, so leave it at 1 for honest numbers).
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import (
    VARIANTS,
    aggregate,
    compute_affinities,
    nonlocal_align,
    normalize_matchtrans,
    normalize_psla,
    variant_spec,
)
from .attention import EmbeddingPair
from .errors import ConfigurationError
from .pipeline import PipelineConfig, PipelineNets, generate_video, run_video, schedule
from .tensor import Tensor, conv2d

CSV_COLUMNS = [
    "variant",
    "mode",
    "d",
    "interval",
    "C",
    "H",
    "W",
    "stage",
    "median_ms",
    "p90_ms",
    "macs",
    "params",
    "corr_acc",
]

OP_STAGES = ("embed", "affinity", "normalize", "aggregate", "gather", "total")
PIPELINE_STAGES = (
    "total",
    "key",
    "nonkey",
    "align",
    "transform",
    "update",
    "quality",
    "backbone_model",
)


def _as_list(value):
    return list(value) if isinstance(value, (list, tuple)) else [value]


@dataclass
class BenchConfig:
    kind: str = "pipeline"
    variants: list = field(default_factory=lambda: ["psla"])
    d_values: list = field(default_factory=lambda: [4])
    intervals: list = field(default_factory=lambda: [10])
    modes: list = field(default_factory=lambda: ["F"])
    stages: list = field(default_factory=lambda: ["total"])
    repeat: int = 11
    warmup: int = 2
    base: PipelineConfig = field(default_factory=PipelineConfig)
    video: dict = field(default_factory=dict)

    _KEYS = {
        "kind",
        "variant",
        "d",
        "interval",
        "mode",
        "stages",
        "repeat",
        "warmup",
        "channels",
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
        "video",
    }
    _VIDEO_KEYS = {"feature_noise", "low_noise", "distinct_boost", "step_choices"}

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchConfig":
        for key in doc:
            if key not in cls._KEYS:
                raise ConfigurationError(f"unknown config key: {key}")
        kind = doc.get("kind", "pipeline")
        if kind not in ("pipeline", "op"):
            raise ConfigurationError(f"kind must be 'pipeline' or 'op', got {kind!r}")
        video = dict(doc.get("video", {}))
        for key in video:
            if key not in cls._VIDEO_KEYS:
                raise ConfigurationError(f"unknown config key: video.{key}")

        base_doc = {
            k: v
            for k, v in doc.items()
            if k
            not in {"kind", "variant", "d", "interval", "mode", "stages", "repeat", "warmup", "video"}
        }
        base = PipelineConfig.from_dict(base_doc)

        variants = [str(v) for v in _as_list(doc.get("variant", ["psla"]))]
        for v in variants:
            if v not in VARIANTS:
                raise ConfigurationError(f"unknown variant {v!r}; expected one of {VARIANTS}")
        modes = [str(m) for m in _as_list(doc.get("mode", ["F"]))]
        for m in modes:
            if m not in ("S", "F"):
                raise ConfigurationError(f"mode must be S or F, got {m!r}")
        stages = [str(s) for s in _as_list(doc.get("stages", ["total"]))]
        allowed = OP_STAGES if kind == "op" else PIPELINE_STAGES
        for s in stages:
            if s not in allowed:
                raise ConfigurationError(
                    f"unknown stage {s!r} for kind {kind!r}; expected one of {allowed}"
                )
        cfg = cls(
            kind=kind,
            variants=variants,
            d_values=[int(x) for x in _as_list(doc.get("d", [4]))],
            intervals=[int(x) for x in _as_list(doc.get("interval", [10]))],
            modes=modes,
            stages=stages,
            repeat=int(doc.get("repeat", 11)),
            warmup=int(doc.get("warmup", 2)),
            base=base,
            video=video,
        )
        if cfg.repeat < 5:
            raise ConfigurationError(f"repeat must be >= 5, got {cfg.repeat}")
        if cfg.warmup < 0:
            raise ConfigurationError(f"warmup must be >= 0, got {cfg.warmup}")
        return cfg


def conv_macs(in_channels, out_channels, kernel, height, width):
    return in_channels * out_channels * kernel * kernel * height * width


def _gather_macs(spec, c_affinity, c_aggregate, height, width):
    """Exact multiply-accumulate counts of (affinity, aggregation)."""
    from .neighborhood import make_mask

    valid = int(make_mask(spec, height, width).valid.sum())
    return valid * c_affinity, valid * c_aggregate


@dataclass
class BenchReport:
    rows: list
    cells: list
    config: dict

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)

    def write_json(self, path):
        Path(path).write_text(
            json.dumps({"config": self.config, "cells": self.cells}, indent=2, sort_keys=True)
        )


def _median_p90(samples):
    return float(np.median(samples)), float(np.percentile(samples, 90))


def _fmt_acc(value):
    return "" if value is None else f"{value:.6f}"


def _run_op_cell(cfg: BenchConfig, variant, d):
    base = cfg.base
    c = base.channels_feat
    h, w = base.height, base.width
    rng = np.random.default_rng(base.seed)
    target = Tensor(rng.normal(size=(c, h, w)))
    source = Tensor(rng.normal(size=(c, h, w)))
    emb = None
    if base.channels_embed > 0:
        emb = EmbeddingPair.init(c, base.channels_embed, rng, bias=base.embed_bias)
    spec = variant_spec(variant, d)

    samples = {stage: [] for stage in OP_STAGES}
    for rep in range(cfg.warmup + cfg.repeat):
        t0 = time.perf_counter()
        if variant == "nonlocal":
            nonlocal_align(target, source, emb)
            total = (time.perf_counter() - t0) * 1e3
            if rep >= cfg.warmup:
                samples["total"].append(total)
            continue
        te = target if emb is None else conv2d(target, emb.g)
        se = source if emb is None else conv2d(source, emb.f)
        t1 = time.perf_counter()
        weights = compute_affinities(te, se, spec)
        t2 = time.perf_counter()
        if variant == "matchtrans":
            weights = normalize_matchtrans(weights)
        else:
            weights = normalize_psla(weights, temperature=base.temperature)
        t3 = time.perf_counter()
        aggregate(source, weights, spec)
        t4 = time.perf_counter()
        if rep >= cfg.warmup:
            samples["embed"].append((t1 - t0) * 1e3)
            samples["affinity"].append((t2 - t1) * 1e3)
            samples["normalize"].append((t3 - t2) * 1e3)
            samples["aggregate"].append((t4 - t3) * 1e3)
            samples["gather"].append((t4 - t3 + t2 - t1) * 1e3)
            samples["total"].append((t4 - t0) * 1e3)

    c_emb = c if emb is None else base.channels_embed
    embed_macs = 0 if emb is None else 2 * conv_macs(c, base.channels_embed, 1, h, w)
    if variant == "nonlocal":
        hw = h * w
        macs = {"total": embed_macs + hw * hw * c_emb + hw * hw * c}
    else:
        affinity_macs, aggregate_macs = _gather_macs(spec, c_emb, c, h, w)
        macs = {
            "embed": embed_macs,
            "affinity": affinity_macs,
            "aggregate": aggregate_macs,
            "normalize": 0,
            "gather": affinity_macs + aggregate_macs,
            "total": embed_macs + affinity_macs + aggregate_macs,
        }

    rows, detail = [], {}
    for stage in cfg.stages:
        if not samples[stage]:
            continue
        med, p90 = _median_p90(samples[stage])
        detail[stage] = {"median_ms": med, "p90_ms": p90}
        rows.append(
            {
                "variant": variant,
                "mode": "",
                "d": d,
                "interval": "",
                "C": c,
                "H": h,
                "W": w,
                "stage": stage,
                "median_ms": f"{med:.6f}",
                "p90_ms": f"{p90:.6f}",
                "macs": macs.get(stage, 0),
                "params": 0 if emb is None else sum(t.size for t in emb.param_tensors()),
                "corr_acc": "",
            }
        )
    cell = {
        "kind": "op",
        "variant": variant,
        "d": d,
        "C": c,
        "H": h,
        "W": w,
        "stages": detail,
    }
    return rows, cell


def _pipeline_macs(cfg: PipelineConfig, total_frames):
    """MAC model per stage over a whole video run."""
    sched = schedule(total_frames, cfg.interval)
    n_key = len(sched.key_indices)
    n_nonkey = total_frames - n_key
    n_key_aligned = (n_key - 1) if cfg.mode == "F" else 0

    h, w = cfg.height, cfg.width
    c = cfg.channels_feat
    ce = cfg.channels_embed if cfg.channels_embed > 0 else c
    embed = 0 if cfg.channels_embed == 0 else 2 * conv_macs(c, ce, 1, h, w)
    if cfg.variant == "nonlocal":
        align = embed + (h * w) ** 2 * ce + (h * w) ** 2 * c
    else:
        affinity_macs, aggregate_macs = _gather_macs(
            variant_spec(cfg.variant, cfg.d), ce, c, h, w
        )
        align = embed + affinity_macs + aggregate_macs
    fusion = (
        conv_macs(2 * c, cfg.fusion_reduce, 1, h, w)
        + conv_macs(cfg.fusion_reduce, cfg.fusion_hidden, 3, h, w)
        + conv_macs(cfg.fusion_hidden, 2, 3, h, w)
    )
    transform = (
        conv_macs(cfg.channels_low, cfg.transform_bottleneck, 1, h, w)
        + conv_macs(cfg.transform_bottleneck, cfg.transform_mid, 3, h, w)
        + conv_macs(cfg.transform_mid, c, 3, h, w)
    )
    update = fusion if cfg.mode == "F" else 0
    quality = fusion if cfg.mode == "F" else 0
    per_stage = {
        "align": align * (n_key_aligned + n_nonkey),
        "transform": transform * n_nonkey,
        "update": update * n_key_aligned,
        "quality": quality * n_nonkey,
        "backbone_model": 0,
    }
    per_stage["key"] = align * n_key_aligned + update * n_key_aligned
    per_stage["nonkey"] = (align + transform + quality) * n_nonkey
    per_stage["total"] = per_stage["key"] + per_stage["nonkey"]
    return per_stage


def _run_pipeline_cell(cfg: BenchConfig, variant, d, interval, mode):
    run_cfg = PipelineConfig(
        **{
            **cfg.base.__dict__,
            "variant": variant,
            "d": d,
            "interval": interval,
            "mode": mode,
        }
    )
    video = generate_video(
        seed=run_cfg.seed,
        frames=run_cfg.frames,
        height=run_cfg.height,
        width=run_cfg.width,
        c_feat=run_cfg.channels_feat,
        c_low=run_cfg.channels_low,
        **cfg.video,
    )
    nets = PipelineNets.build(run_cfg, np.random.default_rng(run_cfg.seed))

    per_stage = {stage: [] for stage in PIPELINE_STAGES}
    fps_samples = []
    acc = None
    for rep in range(cfg.warmup + cfg.repeat):
        _, stats = run_video(video, run_cfg, nets=nets)
        if rep < cfg.warmup:
            continue
        sums = dict.fromkeys(PIPELINE_STAGES, 0.0)
        for frame in stats.frames:
            frame_total = sum(frame["stage_times_ms"].values())
            sums["total"] += frame_total
            sums["key" if frame["is_key"] else "nonkey"] += frame_total
            for name, ms in frame["stage_times_ms"].items():
                sums[name] += ms
        for name, value in sums.items():
            per_stage[name].append(value)
        fps_samples.append(stats.fps_equivalent)
        acc = stats.mean_accuracy()

    macs = _pipeline_macs(run_cfg, run_cfg.frames)
    params = nets.propagation_param_count()

    rows, detail = [], {}
    for stage in cfg.stages:
        med, p90 = _median_p90(per_stage[stage])
        detail[stage] = {"median_ms": med, "p90_ms": p90}
        rows.append(
            {
                "variant": variant,
                "mode": mode,
                "d": d,
                "interval": interval,
                "C": run_cfg.channels_feat,
                "H": run_cfg.height,
                "W": run_cfg.width,
                "stage": stage,
                "median_ms": f"{med:.6f}",
                "p90_ms": f"{p90:.6f}",
                "macs": macs.get(stage, 0),
                "params": params,
                "corr_acc": _fmt_acc(acc),
            }
        )
    cell = {
        "kind": "pipeline",
        "variant": variant,
        "mode": mode,
        "d": d,
        "interval": interval,
        "C": run_cfg.channels_feat,
        "H": run_cfg.height,
        "W": run_cfg.width,
        "frames": run_cfg.frames,
        "stages": detail,
        "fps_equivalent": float(np.median(fps_samples)),
        "corr_acc": acc,
        "macs": macs,
        "params": params,
    }
    return rows, cell


def run_bench(cfg: BenchConfig) -> BenchReport:
    """Execute the whole grid and assemble a report."""
    if cfg.kind == "op":
        cells_todo = [(variant, d) for variant in cfg.variants for d in cfg.d_values]
        runner = lambda cell: _run_op_cell(cfg, *cell)  # noqa: E731
    else:
        cells_todo = [
            (variant, d, interval, mode)
            for variant in cfg.variants
            for d in cfg.d_values
            for interval in cfg.intervals
            for mode in cfg.modes
        ]
        runner = lambda cell: _run_pipeline_cell(cfg, *cell)  # noqa: E731

    workers = int(os.environ.get("PSLA_THREADS", "1"))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(runner, cells_todo))
    else:
        results = [runner(cell) for cell in cells_todo]

    rows, cells = [], []
    for cell_rows, cell in results:
        rows.extend(cell_rows)
        cells.append(cell)
    return BenchReport(
        rows=rows,
        cells=cells,
        config={
            "kind": cfg.kind,
            "variant": cfg.variants,
            "d": cfg.d_values,
            "interval": cfg.intervals,
            "mode": cfg.modes,
            "stages": cfg.stages,
            "repeat": cfg.repeat,
            "warmup": cfg.warmup,
        },
    )
