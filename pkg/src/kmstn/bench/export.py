"""CSV and JSON output of benchmark results.

``requests.csv`` has one row per request::

    experiment, kind, src, dst, concurrency, epoch, worker, index,
    timestamp_s, latency_ms, success, bits, error

``aggregates.csv`` has one row per experiment with the columns of
:data:`AGGREGATE_COLUMNS`.  ``metrics.json`` carries both plus the specs and
validates against ``metrics.schema.json``.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import math
from importlib import resources
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import jsonschema

from .harness import MetricsRecord

FORMAT = "kmstn-bench/v1"
REQUEST_COLUMNS = ["experiment", "kind", "src", "dst", "concurrency", "epoch", "worker", "index",
                   "timestamp_s", "latency_ms", "success", "bits", "error"]
AGGREGATE_COLUMNS = ["experiment", "kind", "src", "dst", "n_requests", "n_success", "error_rate",
                     "concurrency", "delivered_bits", "elapsed_s", "keyrate_bps",
                     "mean_keyrate_bps", "std_keyrate_bps", "p95_keyrate_bps",
                     "latency_median_ms", "jitter_median_ms", "jitter_p95_ms",
                     "rolling_std_p95_ms", "window"]


def load_schema() -> dict:
    return json.loads(resources.files("kmstn.bench").joinpath("metrics.schema.json").read_text())


def timestamp_dir(root="results") -> Path:
    out = Path(root) / dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    out.mkdir(parents=True, exist_ok=False)
    return out


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def write_requests_csv(records: Iterable[MetricsRecord], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REQUEST_COLUMNS)
        for rec in records:
            s = rec.spec
            for r in rec.requests:
                w.writerow([s.name, s.kind, s.src, s.dst, s.concurrency, r.epoch, r.worker,
                            r.index, repr(r.timestamp_s), repr(r.latency_ms), int(r.success),
                            r.bits, r.error or ""])
    return path


def write_aggregates_csv(records: Iterable[MetricsRecord], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(AGGREGATE_COLUMNS)
        for rec in records:
            s, a = rec.spec, rec.aggregates
            row = [s.name, s.kind, s.src, s.dst] + [a.get(c) for c in AGGREGATE_COLUMNS[4:]]
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    return path


def read_requests_csv(path) -> List[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k in ("concurrency", "epoch", "worker", "index", "bits"):
            row[k] = int(row[k])
        for k in ("timestamp_s", "latency_ms"):
            row[k] = float(row[k])
        row["success"] = row["success"] == "1"
        row["error"] = row["error"] or None
    return rows


def to_json_doc(records: Sequence[MetricsRecord], correlation: Optional[dict] = None) -> dict:
    doc = {"format": FORMAT, "created": dt.datetime.now(dt.timezone.utc).isoformat(),
           "experiments": []}
    for rec in records:
        d = rec.to_dict()
        d["aggregates"] = {k: _clean(v) for k, v in d["aggregates"].items()}
        doc["experiments"].append(d)
    if correlation is not None:
        doc["correlation"] = correlation
    return doc


def write_json(records: Sequence[MetricsRecord], path, correlation: Optional[dict] = None) -> Path:
    doc = to_json_doc(records, correlation)
    jsonschema.validate(doc, load_schema())
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return path


def read_json(path) -> List[MetricsRecord]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    jsonschema.validate(doc, load_schema())
    return [MetricsRecord.from_dict(e) for e in doc["experiments"]]


def export(records: Sequence[MetricsRecord], out_dir, formats=("csv", "json"), plot: bool = False,
           correlation: Optional[dict] = None) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        written.append(write_requests_csv(records, out / "requests.csv"))
        written.append(write_aggregates_csv(records, out / "aggregates.csv"))
    if "json" in formats:
        written.append(write_json(records, out / "metrics.json", correlation))
    if plot:
        from .plots import plot_all
        written.extend(plot_all(records, out))
    return written
