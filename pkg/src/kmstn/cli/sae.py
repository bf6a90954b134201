"""``sae``: request keys from a KMSTN as an SAE.

Exit codes: 0 ok, 1 other error, 2 usage or configuration, 3 depleted,
4 not found, 5 unauthorized, 6 unreachable.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from ..client import SaeClient, SaeProfile
from ..errors import (ConfigError, Depleted, InvariantError, KeyNotPresent, KmstnError, NotFound,
                      Unauthorized, UnknownSae, Unreachable, Voided)
from ..http import TlsFiles

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_DEPLETED, EXIT_NOT_FOUND = 0, 1, 2, 3, 4
EXIT_UNAUTHORIZED, EXIT_UNREACHABLE = 5, 6

_EXIT_MAP = [
    (Depleted, EXIT_DEPLETED),
    ((KeyNotPresent, NotFound, UnknownSae, Voided), EXIT_NOT_FOUND),
    (Unauthorized, EXIT_UNAUTHORIZED),
    (Unreachable, EXIT_UNREACHABLE),
    ((ConfigError, InvariantError), EXIT_USAGE),
]


def exit_code(exc: KmstnError) -> int:
    for cls, code in _EXIT_MAP:
        if isinstance(exc, cls):
            return code
    return EXIT_OTHER


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--kmstn", help="KMSTN base URL (default: from $SAE_CONFIG)")
    common.add_argument("--sae-id", help="this SAE's id (default: from $SAE_CONFIG)")
    common.add_argument("--config", help="SAE profile JSON (default: $SAE_CONFIG)")
    common.add_argument("--cert", help="client certificate for mTLS")
    common.add_argument("--key", help="client private key for mTLS")
    common.add_argument("--ca", help="CA bundle of the mesh")
    common.add_argument("--timeout", type=float, default=30.0)
    common.add_argument("--json", action="store_true", help="machine-readable output")

    p = argparse.ArgumentParser(prog="sae", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="cmd", required=True)
    g = sub.add_parser("get-key", parents=[common], help="request new keys")
    g.add_argument("--slave-sae", action="append", required=True,
                   help="slave SAE; the first names the QKD link, more are relay targets")
    g.add_argument("--number", type=int, default=1)
    g.add_argument("--size", type=int)
    w = sub.add_parser("get-key-with-ids", parents=[common], help="fetch keys by id")
    w.add_argument("--slave-sae", required=True, help="SAE id the keys originate from")
    w.add_argument("--key-id", action="append", default=[], help="key id (repeatable)")
    s = sub.add_parser("status", parents=[common], help="link or route status")
    s.add_argument("--slave-sae", required=True)
    return p


def _profile(args) -> SaeProfile:
    path = args.config or os.environ.get("SAE_CONFIG")
    base = SaeProfile.from_file(path) if path else None
    sae_id = args.sae_id or (base.sae_id if base else None)
    url = args.kmstn or (base.kmstn_url if base else None)
    if not sae_id or not url:
        raise ConfigError("need --sae-id and --kmstn, or a profile via --config/$SAE_CONFIG")
    tls = base.tls if base else None
    if args.cert or args.key or args.ca:
        if not (args.cert and args.key and args.ca):
            raise ConfigError("--cert, --key and --ca go together")
        tls = TlsFiles(args.cert, args.key, args.ca)
    return SaeProfile(sae_id, url.rstrip("/"), tls)


def _print_container(kc, as_json: bool):
    if as_json:
        print(json.dumps(kc.to_wire()))
    else:
        for k in kc.to_wire()["keys"]:
            print(f"{k['key_ID']} {k['key']}")


def run(args) -> int:
    with SaeClient(_profile(args), timeout=args.timeout) as client:
        if args.cmd == "get-key":
            kc = client.get_key(args.slave_sae[0], args.number, args.size, args.slave_sae[1:])
            _print_container(kc, args.json)
        elif args.cmd == "get-key-with-ids":
            kc = client.get_key_with_ids(args.slave_sae, args.key_id)
            _print_container(kc, args.json)
        else:
            st = client.status(args.slave_sae)
            if args.json:
                print(json.dumps(st))
            else:
                for k, v in st.items():
                    if v is not None:
                        print(f"{k}: {v}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except KmstnError as exc:
        print(f"error: {exc.code}: {exc.message}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
