"""Figures written next to the CSV/text outputs.

Uses the object-oriented matplotlib API on an Agg canvas so no global
pyplot state or display backend is touched.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .evaluate import EvalReport

# PNG metadata stripped so repeated runs write identical bytes
_PNG_META = {"Software": None}


def _new_figure(width: float = 6.0, height: float | None = None) -> Figure:
    if height is None:
        height = width * (np.sqrt(5.0) - 1.0) / 2.0
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    return fig


def _save(fig: Figure, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)


def plot_loss_curves(series: Mapping[str, Sequence[float]], path, title: str = "",
                     ylabel: str = "validation loss (MSE)") -> None:
    fig = _new_figure()
    ax = fig.add_subplot(1, 1, 1)
    for label, values in series.items():
        epochs = np.arange(1, len(values) + 1)
        ax.plot(epochs, values, marker="o", markersize=3, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.set_yscale("log")
    if title:
        ax.set_title(title)
    if series:
        ax.legend(frameon=False)
    _save(fig, path)


def plot_psnr_report(report: EvalReport, path, title: str = "") -> None:
    """Grouped bars: noisy input vs each configuration, one group per noise setting."""
    labels = list(dict.fromkeys(r.label for r in report.rows))
    noises = list(dict.fromkeys(r.noise for r in report.rows))
    cell = {(r.noise, r.label): r for r in report.rows}
    fig = _new_figure(max(6.0, 1.5 * len(noises) * (len(labels) + 1) / 2))
    ax = fig.add_subplot(1, 1, 1)
    width = 0.8 / (len(labels) + 1)
    x = np.arange(len(noises))
    baseline = [next(cell[(n, lab)] for lab in labels if (n, lab) in cell).input_psnr
                for n in noises]
    ax.bar(x, _finite(baseline), width, label="noisy input", color="0.7")
    for k, lab in enumerate(labels, start=1):
        vals = [cell[(n, lab)].psnr if (n, lab) in cell else np.nan for n in noises]
        ax.bar(x + k * width, _finite(vals), width, label=lab)
    ax.set_xticks(x + width * len(labels) / 2)
    ax.set_xticklabels(noises)
    ax.set_ylabel("mean PSNR (dB)")
    if title:
        ax.set_title(title)
    if report.rows:
        ax.legend(frameon=False, fontsize="small")
    _save(fig, path)


def _finite(values):
    # +inf PSNR (exact reconstruction) cannot be drawn as a bar
    return [np.nan if np.isinf(v) else v for v in values]
