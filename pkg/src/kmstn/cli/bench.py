"""``bench``: run measurement experiments and post-process their results.

A spec file is JSON::

    {
      "mesh": {"config_dir": "cfg", "launch": true, "state_dir": "state", "time_mode": "sim"},
      "experiments": [{"kind": "keyrate", "src": "kmstn1", "dst": "kmstn2", "n_requests": 100}],
      "out_dir": "results",
      "plot": false
    }

``mesh`` may instead be ``{"chain": {"n_islands": 4, "profiles": {"2": {...}}}}``
to generate and launch a linear chain.  With ``"launch": false`` the harness
connects to an already running deployment described by ``config_dir``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
from contextlib import ExitStack
from pathlib import Path

from ..clock import WallClock, make_clock
from ..client import SaeClient, SaeProfile
from ..config import chain_bundle, load_config_dir
from ..errors import KmstnError
from ..routing import load_topology
from ..bench import stats
from ..bench.export import export, read_json, timestamp_dir, write_json
from ..bench.harness import ExperimentSpec, Harness


def _read_spec(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SystemExit(f"bench: cannot read spec {path}: {exc}")


def _bundle(mesh_doc: dict, spec_dir: Path):
    if "chain" in mesh_doc:
        chain = dict(mesh_doc["chain"])
        profiles = {int(k): v for k, v in (chain.pop("profiles", None) or {}).items()}
        return chain_bundle(profiles=profiles, mesh={"time_mode": mesh_doc.get("time_mode", "sim")},
                            **chain)
    cfg = Path(mesh_doc["config_dir"])
    bundle = load_config_dir(cfg if cfg.is_absolute() else spec_dir / cfg)
    if "time_mode" in mesh_doc:
        bundle.mesh["time_mode"] = mesh_doc["time_mode"]
    return bundle


def open_harness(doc: dict, spec_dir: Path, stack: ExitStack) -> Harness:
    from ..deploy import Mesh
    mesh_doc = doc.get("mesh") or {}
    bundle = _bundle(mesh_doc, spec_dir)
    if mesh_doc.get("launch", "chain" in mesh_doc):
        state = mesh_doc.get("state_dir") or stack.enter_context(tempfile.TemporaryDirectory())
        mesh = stack.enter_context(Mesh(bundle, state, clock=make_clock(bundle.settings["time_mode"])))
        if mesh_doc.get("prefill", False):
            for pair in mesh.pairs.values():
                pair.fill()
        return Harness.for_mesh(mesh)
    clients = []
    stack.callback(lambda: [c.close() for c in clients])

    def factory(sae_id):
        clients.append(SaeClient(SaeProfile.from_bundle(bundle, sae_id)))
        return clients[-1]
    return Harness(load_topology(bundle), factory, WallClock())


def _summary(rec) -> str:
    a = rec.aggregates

    def f(v, fmt="{:.1f}"):
        return "-" if v is None else fmt.format(v)
    return (f"{rec.spec.name}: n={a['n_requests']} ok={a['n_success']} "
            f"err={f(a['error_rate'], '{:.3f}')} keyrate={f(a['keyrate_bps'])} bps "
            f"median={f(a['latency_median_ms'], '{:.2f}')} ms "
            f"jitter_med={f(a['jitter_median_ms'], '{:.2f}')} ms")


def cmd_run(kind: str, args) -> int:
    doc = _read_spec(args.spec)
    exps = [e for e in doc.get("experiments", []) if e.get("kind", kind) == kind]
    if "experiment" in doc:
        exps.append(doc["experiment"])
    specs = [ExperimentSpec.from_dict({**e, "kind": kind}) for e in exps]
    if not specs:
        print(f"bench: spec has no {kind} experiments", file=sys.stderr)
        return 2
    records = []
    with ExitStack() as stack:
        harness = open_harness(doc, Path(args.spec).resolve().parent, stack)
        for spec in specs:
            rec = harness.run(spec)
            records.append(rec)
            print(_summary(rec))
    out = Path(args.out) if args.out else timestamp_dir(doc.get("out_dir", "results"))
    for p in export(records, out, plot=args.plot or doc.get("plot", False)):
        print(f"wrote {p}")
    return 0


def cmd_correlate(args) -> int:
    records = [r for path in args.input for r in read_json(path)]
    result = stats.correlate([r.aggregates for r in records])
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_export(args) -> int:
    records = [r for path in args.input for r in read_json(path)]
    out = Path(args.out) if args.out else timestamp_dir()
    for p in export(records, out, formats=tuple(args.format), plot=args.plot):
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)
    for kind in ("keyrate", "delay", "concurrency"):
        s = sub.add_parser(kind, help=f"run {kind} experiments")
        s.add_argument("--spec", required=True)
        s.add_argument("--out", help="output directory (default results/<timestamp>)")
        s.add_argument("--plot", action="store_true")
    c = sub.add_parser("correlate", help="correlation matrices across experiments")
    c.add_argument("--input", nargs="+", required=True, help="metrics.json files")
    c.add_argument("--out")
    e = sub.add_parser("export", help="re-export metrics.json as CSV/JSON/plots")
    e.add_argument("--input", nargs="+", required=True)
    e.add_argument("--format", action="append", choices=["csv", "json"])
    e.add_argument("--out")
    e.add_argument("--plot", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR)
    try:
        if args.cmd == "correlate":
            return cmd_correlate(args)
        if args.cmd == "export":
            args.format = args.format or ["csv", "json"]
            return cmd_export(args)
        return cmd_run(args.cmd, args)
    except KmstnError as exc:
        print(f"bench: {exc.code}: {exc.message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
