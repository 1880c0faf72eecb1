"""Metrics reports: per-level rows plus run statistics, as schema-tagged CSV.

The CSV starts with ``# drdm-metrics-v1`` and ``# key=value`` stat lines
(runtime, forward-pass counts), followed by a fixed column header and one row
per resolution level ordered coarse to fine. Variance columns are filled when
a report aggregates several seed replicates.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA = "drdm-metrics-v1"
COLUMNS = ("level", "mae", "rmse", "sprmse", "psnr",
           "mae_var", "rmse_var", "sprmse_var", "psnr_var")


@dataclass
class MetricsReport:
    rows: list[dict]                      # one dict per level, COLUMNS keys
    stats: dict[str, float] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {SCHEMA}\n")
        for key in sorted(self.stats):
            buf.write(f"# {key}={self.stats[key]}\n")
        writer = csv.DictWriter(buf, fieldnames=COLUMNS)
        writer.writeheader()
        for row in self.rows:
            writer.writerow({c: row.get(c, "") for c in COLUMNS})
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        stats: dict[str, float] = {}
        body = []
        for line in lines:
            if line.startswith("#"):
                text = line[1:].strip()
                if "=" in text:
                    key, val = text.split("=", 1)
                    stats[key.strip()] = float(val)
                continue
            if line.strip():
                body.append(line)
        rows = []
        for rec in csv.DictReader(body):
            row: dict = {"level": rec["level"]}
            for col in COLUMNS[1:]:
                row[col] = float(rec[col]) if rec.get(col) not in (None, "") else None
            rows.append(row)
        return cls(rows, stats)


def level_metrics(pred, truth, peak: float) -> dict:
    """MAE/RMSE/spRMSE/PSNR for one level; volumes clamp at zero for reporting."""
    from .grids import mae, psnr, rmse, sp_rmse
    from .validation import as_field

    p = np.maximum(as_field(pred), 0.0)
    t = as_field(truth)
    return {
        "mae": mae(p, t),
        "rmse": rmse(p, t),
        "sprmse": sp_rmse(p, t),
        "psnr": psnr(p, t, peak),
    }


def aggregate_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Mean metrics across seed replicates, with across-seed sample variance."""
    if not reports:
        raise ValueError("nothing to aggregate")
    labels = [row["level"] for row in reports[0].rows]
    rows = []
    for i, label in enumerate(labels):
        row: dict = {"level": label}
        for col in ("mae", "rmse", "sprmse", "psnr"):
            vals = [r.rows[i][col] for r in reports]
            finite = [v for v in vals if v is not None and math.isfinite(v)]
            if not finite:
                row[col] = math.inf
                row[f"{col}_var"] = 0.0
                continue
            row[col] = float(np.mean(finite))
            row[f"{col}_var"] = float(np.var(finite, ddof=1)) if len(finite) > 1 else 0.0
        rows.append(row)
    stats: dict[str, float] = {"replicates": float(len(reports))}
    for key in reports[0].stats:
        vals = [r.stats.get(key) for r in reports if key in r.stats]
        if vals:
            stats[key] = float(np.mean(vals))
    return MetricsReport(rows, stats)
