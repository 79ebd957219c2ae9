"""Render benchmark reports as figures next to the CSV output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _series_label(cell):
    label = cell["variant"]
    if cell.get("mode"):
        label += f"/{cell['mode']}"
    return label


def render_bench_figures(report, outdir) -> list:
    """Write one PNG per plottable view of the report; returns created paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    created = []

    stages = sorted({stage for cell in report.cells for stage in cell["stages"]})
    for stage in stages:
        series = {}
        for cell in report.cells:
            if stage not in cell["stages"]:
                continue
            label = _series_label(cell)
            series.setdefault(label, []).append(
                (cell["d"], cell["stages"][stage]["median_ms"])
            )
        if not series or all(len(points) < 1 for points in series.values()):
            continue
        fig, ax = plt.subplots(figsize=(5.5, 3.8))
        for label, points in sorted(series.items()):
            points.sort()
            ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=label)
        ax.set_xlabel("max displacement d")
        ax.set_ylabel("median ms")
        ax.set_title(f"stage: {stage}")
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = outdir / f"stage_{stage}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        created.append(path)

    fps_cells = [c for c in report.cells if "fps_equivalent" in c]
    if fps_cells and len({c["interval"] for c in fps_cells}) > 1:
        fig, ax = plt.subplots(figsize=(5.5, 3.8))
        series = {}
        for cell in fps_cells:
            series.setdefault(_series_label(cell) + f" d={cell['d']}", []).append(
                (cell["interval"], cell["fps_equivalent"])
            )
        for label, points in sorted(series.items()):
            points.sort()
            ax.plot([p[0] for p in points], [p[1] for p in points], marker="s", label=label)
        ax.set_xlabel("key frame interval")
        ax.set_ylabel("fps equivalent")
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = outdir / "fps_vs_interval.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        created.append(path)

    acc_cells = [c for c in report.cells if c.get("corr_acc") is not None]
    if acc_cells and len({c["d"] for c in acc_cells}) > 1:
        fig, ax = plt.subplots(figsize=(5.5, 3.8))
        series = {}
        for cell in acc_cells:
            series.setdefault(_series_label(cell), []).append((cell["d"], cell["corr_acc"]))
        for label, points in sorted(series.items()):
            points.sort()
            ax.plot([p[0] for p in points], [p[1] for p in points], marker="^", label=label)
        ax.set_xlabel("max displacement d")
        ax.set_ylabel("correspondence accuracy")
        ax.set_ylim(-0.02, 1.02)
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = outdir / "corr_acc.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        created.append(path)

    return created
