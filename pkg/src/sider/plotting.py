"""Report figures rendered to PNG files with the Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import ProtectionReport  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the PNG bytes stable across runs
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def asr_bars(reports: Sequence[ProtectionReport], path: str | Path) -> Path:
    """Grouped bars: one group per held-out model, one bar per image role."""
    models = [r.model_id for r in reports]
    roles = list(dict.fromkeys(role for r in reports for role in r.asr))
    fig, ax = plt.subplots(figsize=(2.0 + 0.35 * len(models) * len(roles), 3.2))
    width = 0.8 / max(1, len(roles))
    for j, role in enumerate(roles):
        vals = [r.asr.get(role, np.nan) for r in reports]
        ax.bar(np.arange(len(models)) + (j - (len(roles) - 1) / 2) * width, vals, width, label=role)
    ax.set_xticks(np.arange(len(models)), [f"held out: {m}" for m in models], fontsize=7)
    ax.set_ylabel("ASR (%)")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=7, ncols=2, loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def loss_traces(traces: dict[str, np.ndarray], path: str | Path) -> Path:
    """Median and interquartile band of the per-sample loss against iteration."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for label, tr in traces.items():
        tr = np.asarray(tr)
        it = np.arange(len(tr))
        med = np.median(tr, axis=1)
        lo, hi = np.percentile(tr, [25, 75], axis=1)
        ax.plot(it, med, label=label)
        ax.fill_between(it, lo, hi, alpha=0.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("ensemble loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def image_grid(rows: dict[str, np.ndarray], path: str | Path, max_cols: int = 8) -> Path:
    """One labelled row per image role; each array is (N, H, W, 3) in [0, 1]."""
    n = min(max_cols, min(len(v) for v in rows.values()))
    fig, axes = plt.subplots(len(rows), n, figsize=(1.1 * n, 1.15 * len(rows)), squeeze=False)
    for i, (label, imgs) in enumerate(rows.items()):
        for j in range(n):
            ax = axes[i][j]
            ax.imshow(np.clip(imgs[j], 0, 1), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if j == 0:
                ax.set_ylabel(label, fontsize=7)
    fig.tight_layout(pad=0.2)
    return _save(fig, path)
