"""
Companion renderer: PNG figures from emitted report records.

Nothing on the compute path imports this module.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from taanp.errors import ContractError  # noqa: E402

logger = logging.getLogger(__name__)


def render_pit_histogram(records: Iterable[Dict[str, Any]], path: Union[str, Path]) -> Path:
    """One panel per task from `pit_histogram` records (fields: task, counts)"""
    rows: List[Dict[str, Any]] = [r for r in records if r.get("record") == "pit_histogram"]
    if not rows:
        raise ContractError("no pit_histogram records to render")
    path = Path(path)
    fig, axes = plt.subplots(1, len(rows), figsize=(4 * len(rows), 3.2), squeeze=False)
    for ax, row in zip(axes[0], rows):
        counts = row["counts"]
        total = max(sum(counts), 1)
        bins = len(counts)
        ax.bar([(i + 0.5) / bins for i in range(bins)], [c * bins / total for c in counts],
               width=1.0 / bins, color="#4C72B0", edgecolor="white")
        ax.axhline(1.0, color="black", linestyle="--", linewidth=1)
        ax.set_title(str(row.get("task", "all")))
        ax.set_xlabel("PIT")
        ax.set_ylabel("density")
        ax.set_xlim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"🖼️ PIT histogram written: {path}")
    return path


def render_scenario_curve(records: Iterable[Dict[str, Any]], metric: str, path: Union[str, Path],
                          x: str = "n_observed", group: str = "scenario_id") -> Path:
    """Metric against a step column, one line per scenario"""
    frame = pd.DataFrame([r for r in records if r.get("record") == "scenario_step"])
    if frame.empty or metric not in frame or x not in frame:
        raise ContractError(f"records lack '{metric}' or '{x}'")
    path = Path(path)
    plt.figure(figsize=(6, 4))
    for name, part in frame.groupby(group, sort=True):
        part = part.sort_values(x)
        plt.plot(part[x], part[metric].astype(float), marker="o", label=str(name))
    plt.xlabel(x)
    plt.ylabel(metric)
    plt.legend(fontsize=7)
    plt.grid(alpha=0.3)
    plt.savefig(path, dpi=100, bbox_inches="tight")
    plt.close()
    logger.info(f"🖼️ Scenario curve written: {path}")
    return path
