"""Command-line entry point: benchmarks, gradient checks, parameter ledgers,
reproducible demo dumps, and neighborhood dumps.

Every command exits 0 on success; failures print a single machine-parseable
line `error: <message>` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .attention import EmbeddingPair
from .bench import BenchConfig, run_bench
from .checks import gradient_check_suite
from .errors import ConfigurationError, PslaError
from .fusion import TransformNet, TwoStreamFusionNet, param_count
from .neighborhood import build_dense, build_progressive
from .pipeline import PipelineConfig, PipelineNets, generate_video, run_video
from .tensorio import write_tensor


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON ({exc})") from exc


def cmd_bench(args) -> int:
    doc = _load_json(args.config) if args.config else {}
    if args.repeat is not None:
        doc["repeat"] = args.repeat
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = BenchConfig.from_dict(doc)
    report = run_bench(cfg)

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / "bench.csv"
    json_path = outdir / "bench.json"
    report.write_csv(csv_path)
    report.write_json(json_path)
    print(f"wrote {csv_path} ({len(report.rows)} rows)")
    print(f"wrote {json_path} ({len(report.cells)} cells)")
    if not args.no_figures:
        from .plots import render_bench_figures

        for fig_path in render_bench_figures(report, outdir):
            print(f"wrote {fig_path}")
    return 0


def cmd_gradcheck(args) -> int:
    try:
        c, h, w = (int(x) for x in args.sizes.lower().split("x"))
    except ValueError:
        raise ConfigurationError(f"--sizes must look like 3x6x6, got {args.sizes!r}")
    results = gradient_check_suite(seed=args.seed or 0, size=(c, h, w), epsilon=args.epsilon)
    threshold = 1e-3
    failed = 0
    print(f"{'check':<24}{'size':<10}{'max_rel_err':<14}status")
    for name, err in results:
        ok = err < threshold
        failed += 0 if ok else 1
        print(f"{name:<24}{args.sizes:<10}{err:<14.3e}{'ok' if ok else 'FAIL'}")
    if failed:
        print(f"error: {failed} gradient check(s) at or above {threshold}", file=sys.stderr)
        return 1
    return 0


def cmd_params(args) -> int:
    if args.config:
        cfg = PipelineConfig.from_dict(_load_json(args.config))
    else:
        cfg = PipelineConfig.paper_scale()
    rng = np.random.default_rng(cfg.seed)
    emb = None
    if cfg.channels_embed > 0:
        emb = EmbeddingPair.init(cfg.channels_feat, cfg.channels_embed, rng, bias=cfg.embed_bias)
    update = TwoStreamFusionNet.init(
        cfg.channels_feat, rng, reduce_width=cfg.fusion_reduce, hidden_width=cfg.fusion_hidden
    )
    quality = TwoStreamFusionNet.init(
        cfg.channels_feat, rng, reduce_width=cfg.fusion_reduce, hidden_width=cfg.fusion_hidden
    )
    transform = TransformNet.init(
        cfg.channels_low,
        cfg.channels_feat,
        rng,
        bottleneck=cfg.transform_bottleneck,
        mid_width=cfg.transform_mid,
    )
    components = {
        "embeddings": param_count(emb),
        "update_net": param_count(update),
        "quality_net": param_count(quality),
        "transform_net": param_count(transform),
    }
    total = sum(components.values())
    print(f"{'component':<16}params")
    for name, count in components.items():
        print(f"{name:<16}{count:,}")
    print(f"{'total':<16}{total:,}")
    if args.out:
        Path(args.out).write_text(
            json.dumps({"components": components, "total": total}, indent=2, sort_keys=True)
        )
        print(f"wrote {args.out}")
    return 0


def cmd_demo(args) -> int:
    outdir = Path(args.out)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        probe = outdir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ConfigurationError(f"output directory not writable: {exc}")

    cfg = PipelineConfig(
        d=args.d,
        interval=args.interval,
        frames=args.frames,
        seed=args.seed or 0,
        variant=args.variant,
    )
    video = generate_video(
        seed=cfg.seed,
        frames=cfg.frames,
        height=cfg.height,
        width=cfg.width,
        c_feat=cfg.channels_feat,
        c_low=cfg.channels_low,
        step_choices=((0, 0), (0, 1), (1, 0)),
        distinct_boost=4.0,
    )
    nets = PipelineNets.build(cfg, np.random.default_rng(cfg.seed))
    weight_sink = {}
    outputs, stats = run_video(video, cfg, nets=nets, weight_sink=weight_sink)

    for frame in stats.frames:
        t = frame["frame"]
        kind = "key" if frame["is_key"] else "denseft"
        write_tensor(outdir / f"frame_{t:03d}_{kind}.psla", outputs[t].data)
        if t in weight_sink:
            write_tensor(outdir / f"frame_{t:03d}_weights.psla", weight_sink[t])
            (outdir / f"frame_{t:03d}_weights.json").write_text(
                json.dumps({"d": cfg.d, "variant": cfg.variant}, sort_keys=True)
            )
    (outdir / "stats.json").write_text(json.dumps(stats.to_json_dict(), indent=2, sort_keys=True))
    print(f"wrote {len(stats.frames)} frames to {outdir}")
    return 0


def cmd_dump_neighborhood(args) -> int:
    spec = build_progressive(args.d) if args.variant == "psla" else build_dense(args.d)
    text = json.dumps(spec.to_json_dict(), sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psla",
        description="Sparse local attention benchmarks, gradient checks, and demo dumps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench", help="run a benchmark grid and write CSV/JSON/figures")
    p.add_argument("--config", help="JSON config path (grid over variant, d, interval)")
    p.add_argument("--out", default="bench_out", help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--repeat", type=int, default=None, help="measured repetitions (>= 5)")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="gradient-check every differentiable operator")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", default="3x6x6", help="map size as CxHxW")
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="print the propagation-machinery parameter ledger")
    p.add_argument("--config", help="JSON pipeline config (defaults to published sizes)")
    p.add_argument("--out", help="also write the ledger as JSON")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("demo", help="dump one reproducible synthetic run")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="demo_out", help="output directory")
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--interval", type=int, default=5)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--variant", default="psla", choices=["psla", "dense", "matchtrans", "nonlocal"])
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("dump-neighborhood", help="dump a neighborhood spec as JSON")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--variant", default="psla", choices=["psla", "dense"])
    p.add_argument("--out", help="write to a file instead of stdout")
    p.set_defaults(func=cmd_dump_neighborhood)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PslaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
