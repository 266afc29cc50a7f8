"""Figures written next to the delimited reports. Headless (Agg) only."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluate import EvalReport, table_rows  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "figure.figsize": (6.4, 3.6),
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # a fixed creation date keeps PNG output byte-stable across runs
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training(log: Sequence[dict], path) -> Path:
    """Loss (left axis) and learning rate (right axis) against step."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        steps = [r["step"] for r in log]
        ax.plot(steps, [r["loss"] for r in log], color="tab:blue", lw=1.2, label="masked loss")
        ax.set_xlabel("step")
        ax.set_ylabel("response-token loss")
        ax.set_yscale("log")
        ax2 = ax.twinx()
        ax2.plot(steps, [r["lr"] for r in log], color="tab:orange", lw=1.0, ls="--", label="learning rate")
        ax2.set_ylabel("learning rate")
        ax2.spines["top"].set_visible(False)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [l.get_label() for l in lines], frameon=False, loc="upper right")
        return _save(fig, path)


def plot_accuracy(report: EvalReport, path, title: str | None = None) -> Path:
    rows = [(name.strip(), v) for name, v in table_rows(report) if v is not None]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.barh(range(len(rows)), [v for _, v in rows], color="tab:blue")
        ax.set_yticks(range(len(rows)), [n for n, _ in rows])
        ax.invert_yaxis()
        ax.set_xlim(0, 100)
        ax.set_xlabel(f"accuracy (%) - {report.mode} scoring")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_decontam_delta(delta: dict[str, float | None], path) -> Path:
    """Accuracy change (clean minus full) per benchmark, in percentage points."""
    rows = [(k, v) for k, v in delta.items() if v is not None]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        colors = ["tab:red" if v < 0 else "tab:green" for _, v in rows]
        ax.barh(range(len(rows)), [v for _, v in rows], color=colors)
        ax.set_yticks(range(len(rows)), [k for k, _ in rows])
        ax.invert_yaxis()
        ax.axvline(0.0, color="black", lw=0.8)
        ax.set_xlabel("accuracy change after decontamination (pp)")
        return _save(fig, path)
