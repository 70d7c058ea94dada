"""``sider`` command line.

Exit codes: 0 ok, 2 bad config or input, 3 training or attack aborted,
4 missing checkpoint, 5 corrupt bundle.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .pipeline import (COMPONENTS, EXIT_CONFIG, PipelineError, cmd_evaluate, cmd_protect, cmd_recover,
                       cmd_train)

KEY_ENV = "SIDER_KEY"


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sider", description="Identity-preserving protection with key-gated recovery.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON or TOML pipeline config")
    common.add_argument("--json", action="store_true", help="machine-readable summary on stdout")
    common.add_argument("--seed", type=int, default=None, help="fix run randomness (salt, aux seed, training seed)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train one component")
    t.add_argument("component", choices=COMPONENTS)

    pr = sub.add_parser("protect", parents=[common], help="protect an image")
    pr.add_argument("input", help="source face image (square PNG/JPEG)")
    pr.add_argument("--out", required=True, help="output PNG; the sidecar goes next to it")
    pr.add_argument("--key-file", help="read a hex key from this file instead of generating one")

    rc = sub.add_parser("recover", parents=[common], help="recover from a protected image")
    rc.add_argument("bundle", help="protected PNG (sidecar expected at <png>.json)")
    rc.add_argument("--out", required=True, help="recovered PNG")
    rc.add_argument("--key", help=f"hex key (or set {KEY_ENV})")
    rc.add_argument("--key-file", help="read the hex key from this file")

    ev = sub.add_parser("evaluate", parents=[common], help="batch evaluation and reports")
    ev.add_argument("--ablate-momentum", action="store_true", help="add a momentum-free (mu=0) attack column")
    return p


def _read_key(text: str) -> bytes:
    try:
        return bytes.fromhex(text.strip())
    except ValueError:
        raise PipelineError("key must be hex-encoded", EXIT_CONFIG) from None


def _key_from_file(path: str) -> bytes:
    try:
        return _read_key(Path(path).read_text())
    except OSError as exc:
        raise PipelineError(f"cannot read key file {path}: {exc.strerror}", EXIT_CONFIG) from None


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "train":
            manifest = cmd_train(cfg, args.component, seed=args.seed)
            _emit(args, {"checkpoints": manifest.checkpoints, "outputs": manifest.outputs},
                  "\n".join(f"{k} {v}" for k, v in manifest.checkpoints.items()))
        elif args.command == "protect":
            key = _key_from_file(args.key_file) if args.key_file else None
            summary, used = cmd_protect(cfg, args.input, args.out, key=key, seed=args.seed)
            if key is None:
                # the key goes to stderr only and is never written to a file
                print(f"key: {used.hex()}", file=sys.stderr)
            _emit(args, summary, summary["bundle"])
        elif args.command == "recover":
            if args.key_file:
                key = _key_from_file(args.key_file)
            elif args.key is not None:
                key = _read_key(args.key)
            elif os.environ.get(KEY_ENV):
                key = _read_key(os.environ[KEY_ENV])
            else:
                key = None
            result = cmd_recover(cfg, args.bundle, args.out, key)
            _emit(args, result, result["path"])
        else:
            result = cmd_evaluate(cfg, ablate_momentum=True if args.ablate_momentum else None)
            _emit(args, result, "\n".join(f"{k} {v}" for k, v in result["report_hashes"].items()))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
