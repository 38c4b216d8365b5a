"""Evaluation metrics, per-batch records, and their CSV/JSON serialization.

Metrics CSV schema (fixed column order, one row per processed batch):

    run_id, method, seed, phase, iteration, batch_size, cmc_top1,
    mean_reid_entropy, loss, param_drift_l2, wallclock_ms_per_image,
    strength, error_tag

`strength` is empty outside corruption phases; `error_tag` is empty unless a
sweep cell failed, in which case the metric cells are empty and the tag names
the error. Floats are written with 9 significant digits.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

CSV_COLUMNS = (
    "run_id",
    "method",
    "seed",
    "phase",
    "iteration",
    "batch_size",
    "cmc_top1",
    "mean_reid_entropy",
    "loss",
    "param_drift_l2",
    "wallclock_ms_per_image",
    "strength",
    "error_tag",
)


@dataclass
class MetricsRecord:
    run_id: str
    method: str
    seed: int
    phase: int
    iteration: int
    batch_size: int
    cmc_top1: float | None
    mean_reid_entropy: float | None
    loss: float | None
    param_drift_l2: float | None
    wallclock_ms_per_image: float | None
    strength: float | None = None
    error_tag: str = ""

    def to_row(self) -> list[str]:
        d = asdict(self)
        row = []
        for col in CSV_COLUMNS:
            v = d[col]
            if v is None:
                row.append("")
            elif isinstance(v, float):
                row.append(format(v, ".9g"))
            else:
                row.append(str(v))
        return row

    @classmethod
    def from_row(cls, row: dict[str, str]) -> "MetricsRecord":
        def opt_float(v: str) -> float | None:
            return float(v) if v != "" else None

        return cls(
            run_id=row["run_id"],
            method=row["method"],
            seed=int(row["seed"]),
            phase=int(row["phase"]),
            iteration=int(row["iteration"]),
            batch_size=int(row["batch_size"]),
            cmc_top1=opt_float(row["cmc_top1"]),
            mean_reid_entropy=opt_float(row["mean_reid_entropy"]),
            loss=opt_float(row["loss"]),
            param_drift_l2=opt_float(row["param_drift_l2"]),
            wallclock_ms_per_image=opt_float(row["wallclock_ms_per_image"]),
            strength=opt_float(row["strength"]),
            error_tag=row.get("error_tag", ""),
        )


def cmc_top1(top1_gallery_indices: np.ndarray, gallery_labels: np.ndarray,
             query_labels: np.ndarray) -> float:
    """Fraction of queries whose rank-1 gallery shares the query identity."""
    idx = np.asarray(top1_gallery_indices)
    gallery_labels = np.asarray(gallery_labels)
    query_labels = np.asarray(query_labels)
    if idx.shape != query_labels.shape:
        raise ValueError("one top-1 index per query is required")
    if idx.size == 0:
        raise ValueError("empty query set")
    return float(np.mean(gallery_labels[idx] == query_labels))


def phase_average(records: list[MetricsRecord]) -> float:
    """Unweighted mean of per-batch top-1 CMC within one phase; ragged final
    batches count the same as full ones."""
    if not records:
        raise ValueError("phase has no records")
    return float(np.mean([r.cmc_top1 for r in records]))


def ema_series(values, alpha: float) -> list[float]:
    """Exponential moving average: y_0 = v_0, y_t = alpha*y_{t-1} + (1-alpha)*v_t."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    values = list(values)
    if not values:
        raise ValueError("values must be nonempty")
    out = [float(values[0])]
    for v in values[1:]:
        out.append(alpha * out[-1] + (1.0 - alpha) * float(v))
    return out


def write_records_csv(path, records: list[MetricsRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(r.to_row())


def read_records_csv(path) -> list[MetricsRecord]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        return [MetricsRecord.from_row(row) for row in csv.DictReader(fh)]


def summarize(records: list[MetricsRecord], phase_labels: list[str] | None = None) -> dict:
    """Per-phase mean and standard deviation of top-1 CMC across seeds.

    Each seed contributes its phase average (the per-batch mean within the
    phase); the summary reports mean +/- std of those per-seed values, plus
    the same aggregation for re-id entropy.
    """
    ok = [r for r in records if not r.error_tag]
    methods = sorted({r.method for r in ok})
    phases = sorted({r.phase for r in ok})
    summary: dict = {"methods": {}}
    for method in methods:
        per_phase = {}
        for phase in phases:
            cmc_by_seed, ent_by_seed = [], []
            seeds = sorted({r.seed for r in ok if r.method == method and r.phase == phase})
            for seed in seeds:
                rows = [r for r in ok if r.method == method and r.phase == phase and r.seed == seed]
                if rows:
                    cmc_by_seed.append(phase_average(rows))
                    ent_by_seed.append(float(np.mean([r.mean_reid_entropy for r in rows])))
            if not cmc_by_seed:
                continue
            entry = {
                "cmc_top1_mean": float(np.mean(cmc_by_seed)),
                "cmc_top1_std": float(np.std(cmc_by_seed)),
                "reid_entropy_mean": float(np.mean(ent_by_seed)),
                "reid_entropy_std": float(np.std(ent_by_seed)),
                "num_seeds": len(cmc_by_seed),
            }
            if phase_labels and phase < len(phase_labels):
                entry["label"] = phase_labels[phase]
            per_phase[str(phase)] = entry
        summary["methods"][method] = per_phase
    return summary


def write_summary_json(path, summary: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
