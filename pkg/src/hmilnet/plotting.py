"""PR and ROC figures rendered next to the evaluation CSVs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import Metrics  # noqa: E402

# fixed metadata keeps reruns byte-identical
_META = {"Software": None}


def _save(fig, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format="png", dpi=100, metadata=_META)
    plt.close(fig)
    tmp.replace(path)


def plot_pr(metrics: Metrics, path: str | Path, label: str = "") -> Path:
    path = Path(path)
    recall, precision = metrics.pr
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.step(np.r_[0.0, recall], np.r_[precision[0], precision], where="post",
            label=f"{label} AP={metrics.ap:.3f}".strip())
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower left")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
    return path


def plot_roc(metrics: Metrics, path: str | Path, label: str = "") -> Path:
    """ROC with a logarithmic false-positive axis, where the low-FPR regime is visible."""
    path = Path(path)
    fpr, tpr = metrics.roc
    pos = fpr[fpr > 0]
    floor = pos.min() / 2 if len(pos) else 1e-4
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.step(np.maximum(fpr, floor), tpr, where="post",
            label=f"{label} AUC={metrics.auc:.3f}".strip())
    ax.set_xscale("log")
    ax.set_xlim(floor, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    _save(fig, path)
    return path
