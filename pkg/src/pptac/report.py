"""Evaluation reports: delimited rows plus rendered figures.

Every report CSV carries the producing config hash on a comment line;
charts are rendered with matplotlib straight to SVG next to the data.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

REPORT_COLUMNS = ("terrain", "sheet", "seed", "success", "slip_count", "frames")


def write_report_csv(path, rows: list[dict], config_hash: str = ""):
    """Episode rows with a config-hash stamp; column order is fixed."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in REPORT_COLUMNS})


def read_report_csv(path) -> tuple[list[dict], str]:
    path = Path(path)
    lines = path.read_text().splitlines()
    config_hash = ""
    if lines and lines[0].startswith("# config_hash="):
        config_hash = lines[0].split("=", 1)[1]
        lines = lines[1:]
    reader = csv.DictReader(lines)
    rows = []
    for row in reader:
        rows.append({
            "terrain": row["terrain"],
            "sheet": row["sheet"],
            "seed": int(row["seed"]),
            "success": int(row["success"]),
            "slip_count": int(row["slip_count"]),
            "frames": int(row["frames"]),
        })
    return rows, config_hash


def _aggregate(rows: list[dict]) -> dict:
    cells = {}
    for row in rows:
        key = (row["terrain"], row["sheet"])
        cells.setdefault(key, []).append(row)
    return {
        key: {
            "success_rate": float(np.mean([r["success"] for r in group])),
            "mean_slips": float(np.mean([r["slip_count"] for r in group])),
            "episodes": len(group),
        }
        for key, group in cells.items()
    }


def render_success_chart(path, rows: list[dict], title: str = "Grasp success by terrain"):
    """Grouped bars of success rate per terrain, one group per sheet, with a
    mean-slip-count panel underneath."""
    cells = _aggregate(rows)
    terrains = sorted({t for t, _ in cells}, key=lambda t: t)
    sheets = sorted({s for _, s in cells})
    x = np.arange(len(terrains))
    width = 0.8 / max(len(sheets), 1)

    fig, (ax_succ, ax_slip) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for i, sheet in enumerate(sheets):
        rates = [cells.get((t, sheet), {}).get("success_rate", 0.0) for t in terrains]
        slips = [cells.get((t, sheet), {}).get("mean_slips", 0.0) for t in terrains]
        offset = (i - (len(sheets) - 1) / 2) * width
        ax_succ.bar(x + offset, rates, width=width * 0.9, label=sheet)
        ax_slip.bar(x + offset, slips, width=width * 0.9, label=sheet)
    ax_succ.set_ylabel("success rate")
    ax_succ.set_ylim(0, 1.05)
    ax_succ.set_title(title)
    ax_succ.legend(fontsize=8)
    ax_slip.set_ylabel("mean slip events")
    ax_slip.set_xticks(x)
    ax_slip.set_xticklabels(terrains)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_stiffness_chart(path, sweep_rows: list[dict],
                           title: str = "Stiffness sweep"):
    """Success rate and slip count against the layer multiplier."""
    layers = [row["layers"] for row in sweep_rows]
    success = [row["success_rate"] for row in sweep_rows]
    slips = [row["mean_slips"] for row in sweep_rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(layers, success, "o-", label="success rate")
    ax.set_xlabel("layer multiplier")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.05, 1.05)
    twin = ax.twinx()
    twin.plot(layers, slips, "s--", color="tab:red", label="mean slips")
    twin.set_ylabel("mean slip events")
    ax.set_title(title)
    lines = ax.get_lines() + twin.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="center left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_training_curve(path, history: dict, title: str = "Training loss"):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(history["step"], history["loss"], label="total")
    ax.semilogy(history["step"], history["reconstruction"], label="reconstruction")
    consist = np.asarray(history["consistency"])
    if (consist > 0).any():
        ax.semilogy(history["step"], np.maximum(consist, 1e-12), label="consistency")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
