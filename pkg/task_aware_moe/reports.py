#!/usr/bin/env python3
"""
Report Writers

JSON reports, CSV series and plain-text renderings (comparison tables,
expert-load bars) for the experiment runner.
"""

import csv
import json
import logging
import os
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from task_aware_moe.moe_layer import ExpertLoadStats
from task_aware_moe.training import TrainingHistory

logger = logging.getLogger("task_aware_moe.reports")

BAR_WIDTH = 40


def _ensure_parent(path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def _plain(value: Any) -> Any:
    """numpy scalars/arrays to JSON-friendly python values"""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def write_json(path: str, data: Dict[str, Any]) -> None:
    """Sorted keys so reruns produce identical bytes"""
    _ensure_parent(path)
    with open(path, "w") as f:
        json.dump(_plain(data), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Wrote {path}")


def write_expert_load_csv(path: str, stats: ExpertLoadStats) -> None:
    """Columns: layer, expert_id, load_fraction"""
    _ensure_parent(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "expert_id", "load_fraction"])
        for row, layer in enumerate(stats.layers):
            for expert, load in enumerate(stats.loads[row]):
                writer.writerow([layer, expert, repr(float(load))])
    logger.info(f"Wrote {path}")


def write_layer_summary_csv(path: str, stats: ExpertLoadStats) -> None:
    """Columns: layer, tokens, routing_accuracy, shared_ratio"""
    _ensure_parent(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "tokens", "routing_accuracy", "shared_ratio"])
        for row, layer in enumerate(stats.layers):
            accuracy = "" if stats.routing_accuracy is None else repr(float(stats.routing_accuracy[row]))
            writer.writerow([layer, int(stats.token_counts[row]), accuracy, repr(float(stats.shared_ratio[row]))])


def write_loss_dynamics_csv(path: str, history: TrainingHistory) -> None:
    """Columns: step, l_und, l_gen"""
    _ensure_parent(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "l_und", "l_gen"])
        for s in history.steps:
            writer.writerow([s.step, "" if s.l_und is None else repr(s.l_und), "" if s.l_gen is None else repr(s.l_gen)])
    logger.info(f"Wrote {path}")


def render_load_bars(stats: ExpertLoadStats, width: int = BAR_WIDTH) -> str:
    lines = []
    e = stats.experts_per_group
    for row, layer in enumerate(stats.layers):
        header = f"layer {layer}"
        if stats.routing_accuracy is not None:
            header += f"  (routing accuracy {stats.routing_accuracy[row]:.2f}, shared ratio {stats.shared_ratio[row]:.2f})"
        lines.append(header)
        for expert, load in enumerate(stats.loads[row]):
            group = f"g{expert // e + 1}" if e else "--"
            bar = "#" * int(round(load * width))
            lines.append(f"  expert {expert} [{group}] {bar:<{width}} {load:6.3f}")
    return "\n".join(lines)


def _cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:+.3f}" if value < 0 else f"{value:.3f}"
    return str(value)


def render_table(rows: Sequence[Dict[str, Any]], columns: Sequence[str], title: Optional[str] = None) -> str:
    """Fixed-width text table; missing values print as '-'"""
    cells: List[List[str]] = [[str(c) for c in columns]]
    cells.extend([_cell(row.get(c)) for c in columns] for row in rows)
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = [title] if title else []
    for i, r in enumerate(cells):
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
