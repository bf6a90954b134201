import csv
import json
import math
import random
import statistics

import jsonschema
import pytest

from kmstn.bench import export as ex
from kmstn.bench.harness import ExperimentSpec, MetricsRecord, RequestRecord
from kmstn.cli import bench


def _record(seed=0, n=40, kind="concurrency", c=5, fail_every=7):
    rng = random.Random(seed)
    reqs, t = [], 0.0
    for i in range(n):
        lat = rng.lognormvariate(4, 0.5)
        ok = i % fail_every != 3
        reqs.append(RequestRecord(i, i // c, i % c, t, lat, ok, 256 if ok else 0,
                                  None if ok else "depleted"))
        t += lat / 1000 + rng.random() * 0.01
    spec = ExperimentSpec(kind, "kmstn1", "kmstn2", n_requests=n, concurrency=c,
                          label=f"exp{seed}")
    return MetricsRecord(spec, reqs, 0.0, t + 0.5)


def nearest_rank(xs, p):
    s = sorted(xs)
    return s[math.ceil(p / 100 * len(s)) - 1] if s else None


def oracle(rows, started, finished, window=4):
    """Recompute aggregates from raw CSV rows with the standard library only."""
    ok = [r for r in rows if r["success"] == "1"]
    lat = [float(r["latency_ms"]) for r in ok]
    jit = [abs(b - a) for a, b in zip(lat, lat[1:])]
    rstd = [statistics.stdev(lat[i:i + window]) for i in range(len(lat) - window + 1)]
    done = sorted((float(r["timestamp_s"]) + float(r["latency_ms"]) / 1000, r) for r in rows)
    rates, last = [], started
    for end, r in done:
        if r["success"] == "1":
            rates.append(int(r["bits"]) / (end - last))
            last = end
    bits = sum(int(r["bits"]) for r in ok)
    return {
        "n_success": len(ok),
        "error_rate": (len(rows) - len(ok)) / len(rows),
        "delivered_bits": bits,
        "keyrate_bps": bits / (finished - started),
        "mean_keyrate_bps": statistics.fmean(rates),
        "std_keyrate_bps": statistics.stdev(rates),
        "p95_keyrate_bps": nearest_rank(rates, 95),
        "latency_median_ms": statistics.median(lat),
        "jitter_median_ms": statistics.median(jit),
        "jitter_p95_ms": nearest_rank(jit, 95),
        "rolling_std_p95_ms": nearest_rank(rstd, 95),
    }


EXACT = {"n_success", "delivered_bits", "p95_keyrate_bps", "jitter_p95_ms",
         "latency_median_ms", "jitter_median_ms"}


@pytest.mark.parametrize("seed", range(5))
def test_aggregates_match_oracle_from_csv(tmp_path, seed):
    rec = _record(seed)
    path = ex.write_requests_csv([rec], tmp_path / "r.csv")
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    expect = oracle(rows, rec.started_s, rec.finished_s)
    for k, v in expect.items():
        if k in EXACT:
            assert rec.aggregates[k] == v, k
        else:
            assert rec.aggregates[k] == pytest.approx(v, rel=1e-9), k


def test_csv_round_trip(tmp_path):
    recs = [_record(1), _record(2)]
    path = ex.write_requests_csv(recs, tmp_path / "r.csv")
    rows = ex.read_requests_csv(path)
    flat = [(rec.spec.name, r) for rec in recs for r in rec.requests]
    assert len(rows) == len(flat)
    for row, (name, r) in zip(rows, flat):
        assert row["experiment"] == name
        assert (row["index"], row["epoch"], row["worker"]) == (r.index, r.epoch, r.worker)
        assert row["timestamp_s"] == r.timestamp_s and row["latency_ms"] == r.latency_ms
        assert (row["success"], row["bits"], row["error"]) == (r.success, r.bits, r.error)


def test_empty_record_set_is_header_only(tmp_path):
    for writer, cols in ((ex.write_requests_csv, ex.REQUEST_COLUMNS),
                         (ex.write_aggregates_csv, ex.AGGREGATE_COLUMNS)):
        path = writer([], tmp_path / "x.csv")
        assert path.read_text().splitlines() == [",".join(cols)]


def test_aggregates_csv(tmp_path):
    rec = _record(3)
    path = ex.write_aggregates_csv([rec], tmp_path / "a.csv")
    row, = csv.DictReader(path.open(newline=""))
    assert float(row["keyrate_bps"]) == rec.aggregates["keyrate_bps"]
    assert int(row["n_success"]) == rec.aggregates["n_success"]


def test_json_schema_and_round_trip(tmp_path):
    recs = [_record(s) for s in range(3)]
    path = ex.write_json(recs, tmp_path / "m.json")
    doc = json.loads(path.read_text())
    assert doc["format"] == ex.FORMAT
    jsonschema.validate(doc, ex.load_schema())
    back = ex.read_json(path)
    assert [r.requests for r in back] == [r.requests for r in recs]
    assert back[0].aggregates == pytest.approx(recs[0].aggregates)
    doc["experiments"][0]["requests"][0]["success"] = "yes"
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(doc, ex.load_schema())


def test_plots_written(tmp_path):
    pytest.importorskip("matplotlib")
    written = ex.export([_record(0), _record(1)], tmp_path, plot=True)
    pngs = [p for p in written if p.suffix == ".png"]
    assert pngs and all(p.stat().st_size > 0 for p in pngs)


def test_bench_cli_correlate_and_export(tmp_path, capsys):
    recs = [_record(s, c=c) for s, c in zip(range(4), (1, 5, 10, 20))]
    src = ex.write_json(recs, tmp_path / "m.json")
    assert bench.main(["correlate", "--input", str(src), "--out", str(tmp_path / "c.json")]) == 0
    corr = json.loads((tmp_path / "c.json").read_text())
    assert corr["n"] == 4 and len(corr["pearson"]) == 5
    assert bench.main(["export", "--input", str(src), "--out", str(tmp_path / "o"),
                       "--format", "csv"]) == 0
    assert (tmp_path / "o" / "requests.csv").exists()
    assert not (tmp_path / "o" / "metrics.json").exists()
    one = ex.write_json(recs[:2], tmp_path / "two.json")
    assert bench.main(["correlate", "--input", str(one)]) == 1


def test_bench_cli_runs_chain_spec(tmp_path, capsys):
    spec = {"mesh": {"chain": {"n_islands": 1}, "prefill": True},
            "experiments": [{"kind": "delay", "src": "kmstn1", "dst": "kmstn2",
                             "n_requests": 5}]}
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec))
    assert bench.main(["delay", "--spec", str(path), "--out", str(tmp_path / "res")]) == 0
    back = ex.read_json(tmp_path / "res" / "metrics.json")
    assert back[0].aggregates["n_success"] == 5
