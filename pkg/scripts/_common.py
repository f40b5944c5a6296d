"""Shared argument handling for the experiment scripts."""

import argparse
import json
import logging
import sys
from pathlib import Path

from sparseq import studies
from sparseq.config import dump_config


def parser(protocol: str, description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--out", type=Path, help="write results as JSON to this file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a protocol config key; repeatable")
    p.add_argument("--print-config", action="store_true",
                   help="print the protocol config in CLI format and exit")
    p.set_defaults(protocol=protocol)
    return p


def config(args):
    overrides = {}
    for item in args.set:
        k, _, v = item.partition("=")
        overrides[k.strip().replace(".", "__")] = v.strip()
    cfg = studies.protocol_config(args.protocol, **overrides)
    if args.print_config:
        sys.stdout.write(dump_config(cfg))
        sys.exit(0)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    return cfg


def save(args, payload) -> None:
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
