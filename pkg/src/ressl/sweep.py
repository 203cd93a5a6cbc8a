"""Grid sweeps over one config axis, each row pretrained then evaluated."""

from __future__ import annotations

import csv
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .config import ExperimentConfig
from .evaluation import LinearEvalConfig, knn_eval, linear_eval
from .exceptions import ConfigError

logger = logging.getLogger(__name__)

AXES = {"tau_t": float, "queue_capacity": int, "teacher_augmentation": str}


@dataclass
class SweepSpec:
    base: ExperimentConfig
    axis: str
    values: list
    budget_epochs: int | None = None

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; expected one of {sorted(AXES)}")
        if not self.values:
            raise ConfigError("a sweep needs at least one value")
        self.values = [AXES[self.axis](v) for v in self.values]
        if len(set(self.values)) != len(self.values):
            raise ConfigError("sweep values must be distinct")

    def derived(self) -> list[tuple[object, ExperimentConfig]]:
        """One config per value, sorted by value; only the axis (and the shared budget) differ from base."""
        rows = []
        for value in sorted(self.values):
            changes = {self.axis: value}
            if self.budget_epochs is not None:
                changes["epochs"] = self.budget_epochs
            rows.append((value, self.base.override(**changes)))
        return rows


def parse_values(axis: str, text: str) -> list:
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(AXES)}")
    try:
        return [AXES[axis](v.strip()) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad value for axis {axis}: {exc}") from exc


def _row_dir(out_dir: Path, axis: str, value) -> Path:
    return out_dir / f"{axis}={value}"


def run_row(axis: str, value, config_dict: dict, out_dir: str, eval_kind: str, linear: dict | None) -> dict:
    """Pretrain (resuming if possible) and evaluate one sweep row; failures become a row status."""
    from .trainer import Trainer

    row_dir = _row_dir(Path(out_dir), axis, value)
    result_path = row_dir / "result.json"
    if result_path.exists():
        return json.loads(result_path.read_text())
    row = {"axis": axis, "value": value, "top1": None, "config_hash": None, "status": "failed", "error": None,
           "collapse_warning": None}
    try:
        config = ExperimentConfig.from_dict(config_dict)
        trainer = Trainer(config, row_dir)
        row["config_hash"] = trainer.config.hash()
        result = trainer.run(resume=True)
        row["collapse_warning"] = bool(result.warnings)
        if eval_kind == "knn":
            report = knn_eval(result.checkpoint, config.dataset, config.knn_k, config.knn_temperature)
        else:
            report = linear_eval(result.checkpoint, config.dataset, LinearEvalConfig(**(linear or {})))
        report.save(row_dir / "eval.json")
        row.update(top1=report.top1, status="ok")
    except Exception as exc:  # noqa: BLE001 - one failed row must not stop the sweep
        logger.error("sweep row %s=%s failed: %s", axis, value, exc)
        row["error"] = f"{type(exc).__name__}: {exc}"
        row_dir.mkdir(parents=True, exist_ok=True)
        (row_dir / "error.txt").write_text(traceback.format_exc())
        return row
    result_path.write_text(json.dumps(row, indent=2))
    return row


def run_sweep(spec: SweepSpec, out_dir, eval_kind: str = "knn", parallel: int = 1,
              linear: dict | None = None) -> list[dict]:
    if eval_kind not in ("knn", "linear"):
        raise ConfigError(f"eval must be 'knn' or 'linear', got {eval_kind!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(spec.axis, value, cfg.to_dict(), str(out_dir), eval_kind, linear) for value, cfg in spec.derived()]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(run_row, *zip(*jobs)))
    else:
        rows = [run_row(*job) for job in jobs]
    write_table(rows, out_dir)
    return rows


FIELDS = ["axis", "value", "top1", "config_hash", "status", "error", "collapse_warning"]


def write_table(rows: list[dict], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    csv_path = out_dir / "sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in FIELDS})
    txt_path = out_dir / "sweep.txt"
    txt_path.write_text(render_table(rows))
    return csv_path, txt_path


def render_table(rows: list[dict]) -> str:
    header = ["value", "top1", "status", "config_hash"]
    body = [[str(r["value"]), "-" if r.get("top1") is None else f"{r['top1']:.2f}", r["status"],
             r.get("config_hash") or "-"] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]
    axis = rows[0]["axis"] if rows else ""
    lines = [f"sweep over {axis}",
             "  ".join(h.ljust(w) for h, w in zip(header, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.ljust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
