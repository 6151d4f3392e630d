"""Render training-report figures next to the delimited loss trace."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import FormatError

COMPONENT_COLUMNS = ("L_vq", "L_KL", "L_token_c", "L_token_s")


def read_trace(trace_path: str | Path) -> dict[str, list[float]]:
    trace_path = Path(trace_path)
    with trace_path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "step" not in reader.fieldnames:
            raise FormatError(f"{trace_path}: not a loss trace (missing 'step' column)")
        columns: dict[str, list[float]] = {name: [] for name in reader.fieldnames}
        for row in reader:
            for name in columns:
                columns[name].append(float(row[name]))
    return columns


def render_loss_figures(trace_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Write loss_total.png and loss_components.png beside the trace CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = read_trace(trace_path)
    steps = columns["step"]
    written = []

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, columns["total"], lw=1.2, color="tab:blue")
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.set_title("Training loss")
    ax.grid(alpha=0.3)
    total_path = out_dir / "loss_total.png"
    fig.savefig(total_path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    written.append(total_path)

    fig, ax = plt.subplots(figsize=(7, 4))
    for name in COMPONENT_COLUMNS:
        if name in columns:
            ax.plot(steps, columns[name], lw=1.0, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("Loss components")
    ax.grid(alpha=0.3)
    ax.legend()
    comp_path = out_dir / "loss_components.png"
    fig.savefig(comp_path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    written.append(comp_path)
    return written
