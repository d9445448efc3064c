"""Benchmark report rendering: fixed-width table, JSON lines, stage figures."""

from __future__ import annotations

import json
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .profiler import StageTimings

COLUMNS = ("label", "precision", "size", "T_VE (s)", "S_prompt (t/s)", "S_gen (t/s)", "T_total (s)")


@dataclass
class BenchRecord:
    label: str
    precision: str
    size_bytes: int
    timings: StageTimings


def format_size(nbytes: int) -> str:
    value = float(nbytes)
    for unit in ("B", "KB", "MB", "GB"):
        if value < 1024 or unit == "GB":
            return f"{value:.1f} {unit}" if unit != "B" else f"{int(value)} B"
        value /= 1024
    return f"{value:.1f} GB"


def _fmt(x: float | None, digits: int = 3) -> str:
    return "-" if x is None else f"{x:.{digits}f}"


def render_table(records: list[BenchRecord]) -> str:
    """Rows in the given order, one line per model."""
    if not records:
        raise ValueError("nothing to report")
    rows = []
    for r in records:
        t = r.timings
        rows.append(
            (
                r.label,
                r.precision,
                format_size(r.size_bytes),
                _fmt(t.t_ve),
                _fmt(t.s_prompt, 2),
                _fmt(t.s_gen, 2),
                _fmt(t.t_total),
            )
        )
    widths = [max(len(COLUMNS[i]), max(len(row[i]) for row in rows)) for i in range(len(COLUMNS))]
    lines = [
        "  ".join(f"{COLUMNS[i]:<{widths[i]}}" for i in range(len(COLUMNS))),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(f"{row[i]:<{widths[i]}}" for i in range(len(COLUMNS))))
    return "\n".join(lines)


def write_jsonl(path, entries: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for entry in entries:
            f.write(json.dumps(entry) + "\n")


def run_record(label: str, run_index: int, timings: StageTimings) -> dict:
    return {"label": label, "run": run_index, **timings.to_dict()}


def render_figure(records: list[BenchRecord], path) -> None:
    """Stacked per-stage latency bars plus stage throughputs, written to a file."""
    if not records:
        raise ValueError("nothing to plot")
    labels = [r.label for r in records]
    stages = {
        "visual encoding": [r.timings.t_ve for r in records],
        "prompt encoding": [r.timings.t_prompt for r in records],
        "generation": [r.timings.t_gen for r in records],
        "other": [max(0.0, r.timings.t_other) for r in records],
    }
    fig, (ax_lat, ax_spd) = plt.subplots(
        1, 2, figsize=(10, 0.9 + 0.75 * len(records) + 1.6), constrained_layout=True
    )
    y = range(len(records))
    left = [0.0] * len(records)
    for name, values in stages.items():
        ax_lat.barh(y, values, left=left, label=name)
        left = [a + b for a, b in zip(left, values)]
    ax_lat.set_yticks(list(y), labels)
    ax_lat.invert_yaxis()
    ax_lat.set_xlabel("seconds")
    ax_lat.set_title("latency by stage")
    ax_lat.legend(fontsize=8)

    width = 0.38
    s_prompt = [r.timings.s_prompt or 0.0 for r in records]
    s_gen = [r.timings.s_gen or 0.0 for r in records]
    ax_spd.barh([i - width / 2 for i in y], s_prompt, height=width, label="S_prompt")
    ax_spd.barh([i + width / 2 for i in y], s_gen, height=width, label="S_gen")
    ax_spd.set_yticks(list(y), labels)
    ax_spd.invert_yaxis()
    ax_spd.set_xlabel("tokens / second")
    ax_spd.set_title("stage throughput")
    ax_spd.legend(fontsize=8)

    fig.savefig(path, dpi=150)
    plt.close(fig)
