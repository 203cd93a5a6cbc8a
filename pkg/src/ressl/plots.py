"""Curves and bar charts from metrics logs and sweep tables; each plot ships with its CSV."""

from __future__ import annotations

import csv
from collections import Counter
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .config import ExperimentConfig, lr_at  # noqa: E402
from .exceptions import ConfigError  # noqa: E402

KINDS = ("lr_curve", "loss_curve", "entropy_curve", "sweep_bar")
_COLUMN = {"lr_curve": "lr", "loss_curve": "loss", "entropy_curve": "teacher_entropy"}


def lr_schedule(config: ExperimentConfig, steps_per_epoch: int) -> list[dict]:
    total = config.epochs * steps_per_epoch
    return [{"step": s, "epoch": s / steps_per_epoch, "lr": lr_at(s, config, steps_per_epoch)}
            for s in range(total)]


def curve_rows(kind: str, records: list[dict], label: str = "") -> list[dict]:
    col = _COLUMN[kind]
    steps = [r for r in records if r.get("kind") == "step"]
    per_epoch = max(Counter(r["epoch"] for r in steps).values(), default=1)
    rows = []
    for r in steps:
        if r.get(col) is None:
            continue
        if kind != "lr_curve" and r.get("warmup"):
            continue
        rows.append({"run": label, "step": r["step"], "epoch": r["step"] / per_epoch, col: r[col]})
    return rows


def _write_csv(path: Path, rows: list[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return path


def plot(kind: str, runs: dict, out_dir, sweep_rows: list[dict] | None = None) -> tuple[Path, Path]:
    """``runs`` maps a label to a list of metric records (ignored for ``sweep_bar``)."""
    if kind not in KINDS:
        raise ConfigError(f"unknown plot kind {kind!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    if kind == "sweep_bar":
        rows = [dict(r) for r in (sweep_rows or [])]
        if not rows:
            raise ConfigError("sweep_bar needs a non-empty sweep table")
        labels = [str(r["value"]) for r in rows]
        heights = [float(r["top1"]) if r.get("top1") not in (None, "") else 0.0 for r in rows]
        ax.bar(labels, heights)
        ax.set_xlabel(rows[0]["axis"])
        ax.set_ylabel("top-1 (%)")
    else:
        rows = []
        col = _COLUMN[kind]
        for label, records in runs.items():
            part = curve_rows(kind, records, label)
            rows += part
            ax.plot([r["epoch"] for r in part], [r[col] for r in part], label=label)
        if not rows:
            raise ConfigError(f"no {col} values found in the metrics input")
        ax.set_xlabel("epoch")
        ax.set_ylabel(col)
        if len(runs) > 1:
            ax.legend()
    fig.tight_layout()
    png = out_dir / f"{kind}.png"
    fig.savefig(png, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return png, _write_csv(out_dir / f"{kind}.csv", rows)
