# app/services/reports.py
"""
Metric reports and training logs on disk.
"""
import csv
import io
import json
from pathlib import Path
from typing import Dict, List, Sequence

from app.core.exceptions import MetricError
from app.schemas.report import MetricReport

REPORT_COLUMNS = ["metric", "value", "units", "notes"]


def report_to_csv(report: MetricReport) -> str:
    """One metric per row, sorted by name; notes joined with ';'."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for name in sorted(report.metrics):
        entry = report.metrics[name]
        writer.writerow([name, repr(entry.value), entry.units, ";".join(entry.notes)])
    return buffer.getvalue()


def report_from_csv(text: str) -> MetricReport:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != REPORT_COLUMNS:
        raise MetricError("report CSV has no metric,value,units,notes header")
    report = MetricReport()
    for row in rows[1:]:
        if len(row) != 4:
            raise MetricError(f"malformed report row {row}")
        report.add(row[0], float(row[1]), row[2], [n for n in row[3].split(";") if n])
    return report


def report_to_json(report: MetricReport) -> str:
    return json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def write_report(stem: str, report: MetricReport) -> List[str]:
    """Write <stem>.csv and <stem>.json; returns both paths."""
    csv_path, json_path = f"{stem}.csv", f"{stem}.json"
    Path(csv_path).write_text(report_to_csv(report), encoding="utf-8")
    Path(json_path).write_text(report_to_json(report), encoding="utf-8")
    return [csv_path, json_path]


def write_training_log(path: str, rows: Sequence[Dict[str, float]]) -> None:
    """CSV with one row per optimizer step; columns follow the first row."""
    if not rows:
        Path(path).write_text("step\n", encoding="utf-8")
        return
    columns = list(rows[0].keys())
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    Path(path).write_text(buffer.getvalue(), encoding="utf-8")


def read_training_log(path: str) -> List[Dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as handle:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(handle)]
