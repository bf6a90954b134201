"""``kmstn``: generate configurations and run services."""
from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path

from ..config import chain_bundle, load_config_dir, write_config_dir
from ..devca import issue_mesh_pki
from ..errors import KmstnError


def cmd_init_config(args) -> int:
    profiles = {}
    if args.slow_island is not None:
        profiles[args.slow_island] = {"mean_skr_bps": args.slow_rate}
    bundle = chain_bundle(args.islands, host=args.host, profiles=profiles, seed=args.seed,
                          mesh={"time_mode": args.time_mode})
    out = Path(args.out)
    if args.tls:
        issue_mesh_pki(bundle, out / "pki")
    write_config_dir(bundle, out)
    print(f"wrote configuration for {len(bundle.kmstns)} KMSTNs to {out}")
    return 0


def cmd_devca(args) -> int:
    bundle = load_config_dir(args.config)
    issue_mesh_pki(bundle, Path(args.out or Path(args.config) / "pki").resolve())
    write_config_dir(bundle, args.config)
    print(f"issued certificates; {args.config} now requires mTLS")
    return 0


def cmd_serve(args) -> int:
    from ..deploy import serve_kmstn
    serve_kmstn(load_config_dir(args.config), args.id, args.state)
    return 0


def cmd_sim_qkd(args) -> int:
    from ..deploy import serve_qkd_pair
    serve_qkd_pair(load_config_dir(args.config), args.pair)
    return 0


def cmd_mesh(args) -> int:
    from ..deploy import Mesh
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    with Mesh(load_config_dir(args.config), args.state) as mesh:
        for kid, node in mesh.nodes.items():
            print(f"{kid}: {node.node.service_endpoint.url(node.tls)}")
        stop.wait()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kmstn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)
    i = sub.add_parser("init-config", help="write a linear-chain configuration directory")
    i.add_argument("--out", required=True)
    i.add_argument("--islands", type=int, default=4)
    i.add_argument("--host", default="127.0.0.1")
    i.add_argument("--seed", type=int, default=1)
    i.add_argument("--time-mode", choices=["wall", "sim"], default="wall")
    i.add_argument("--slow-island", type=int, help="0-based island with a reduced key rate")
    i.add_argument("--slow-rate", type=float, default=500.0)
    i.add_argument("--tls", action="store_true", help="issue dev certificates and enable mTLS")
    d = sub.add_parser("devca", help="issue dev certificates for an existing configuration")
    d.add_argument("--config", required=True)
    d.add_argument("--out")
    s = sub.add_parser("serve", help="run one KMSTN")
    s.add_argument("--config", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--state", required=True, help="keystore directory")
    q = sub.add_parser("sim-qkd", help="run one simulated QKD pair")
    q.add_argument("--config", required=True)
    q.add_argument("--pair", required=True)
    m = sub.add_parser("mesh", help="run every service of a configuration in one process")
    m.add_argument("--config", required=True)
    m.add_argument("--state", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    handlers = {"init-config": cmd_init_config, "devca": cmd_devca, "serve": cmd_serve,
                "sim-qkd": cmd_sim_qkd, "mesh": cmd_mesh}
    try:
        return handlers[args.cmd](args)
    except KmstnError as exc:
        print(f"kmstn: {exc.code}: {exc.message}", file=sys.stderr)
        return 2 if exc.code == "config_error" else 1


if __name__ == "__main__":
    sys.exit(main())
