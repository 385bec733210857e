"""Matplotlib renderings of sweep curves, NVI series and condition-study uplifts."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .backtest import SweepPoint, condition_table  # noqa: E402
from .variation import NviConfig, NviPoint  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    # fixed metadata keeps repeated renders byte-stable
    fig.savefig(path, dpi=100, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_sweep(points: Sequence[SweepPoint], path, param_label: str, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [p.param for p in points]
    ax.plot(xs, [100 * p.mean_uplift for p in points], marker="o")
    ax.axhline(0.0, color="grey", lw=0.8)
    ax.set_xlabel(param_label)
    ax.set_ylabel("mean LLHN uplift (%)")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_nvi_series(points: Sequence[NviPoint], path, config: NviConfig = NviConfig()) -> Path:
    fig, ax = plt.subplots(figsize=(8, 4))
    by_adv: dict[str, list[NviPoint]] = {}
    for p in points:
        by_adv.setdefault(p.advertiser, []).append(p)
    m, a_lo, a_hi, x = config.boundaries
    ax.axhspan(1 - m, 1 + m, color="tab:green", alpha=0.15, label="moderate")
    ax.axhspan(1 + a_lo, 1 + a_hi, color="tab:orange", alpha=0.15, label="average")
    ax.axhspan(1 - a_hi, 1 - a_lo, color="tab:orange", alpha=0.15)
    for adv, pts in sorted(by_adv.items()):
        ax.plot([p.day for p in pts], [p.nvi for p in pts], lw=1.2, label=adv)
    ax.axhline(1 + x, color="tab:red", ls="--", lw=0.8)
    ax.axhline(max(1 - x, 0.0), color="tab:red", ls="--", lw=0.8)
    ax.set_xlabel("period start day")
    ax.set_ylabel("NVI")
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def plot_condition_study(report, path) -> Path:
    table = condition_table(report)
    levels = [lv for lv in ("extreme", "average", "moderate") if lv in table]
    fig, axes = plt.subplots(1, len(levels), figsize=(4 * len(levels), 4), sharey=True, squeeze=False)
    for ax, lv in zip(axes[0], levels):
        models = list(table[lv])
        advs = sorted({a for m in models for a in table[lv][m]})
        width = 0.8 / max(len(models), 1)
        for i, name in enumerate(models):
            vals = [100 * (table[lv][name].get(a) or 0.0) for a in advs]
            ax.bar([j + i * width for j in range(len(advs))], vals, width, label=name)
        ax.set_xticks([j + 0.4 - width / 2 for j in range(len(advs))], advs, rotation=45)
        ax.set_title(lv)
        ax.axhline(0.0, color="grey", lw=0.8)
    axes[0][0].set_ylabel("LLHN uplift (%)")
    axes[0][-1].legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_uplift_vs_extremeness(rows: Sequence[dict], models: Sequence[str], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in models:
        pts = [(r["extremeness"], 100 * r[name]) for r in rows if r.get(name) is not None]
        if pts:
            ax.scatter(*zip(*pts), label=name, s=14)
    ax.axhline(0.0, color="grey", lw=0.8)
    ax.set_xlabel("extremeness |1 - NVI|")
    ax.set_ylabel("LLHN uplift (%)")
    ax.legend(fontsize=7)
    return _save(fig, path)
