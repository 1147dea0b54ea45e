"""``relm`` command line: one subcommand per pipeline step plus ``run-manifest``.

Every subcommand prints a one-line JSON summary (including the fully resolved
config) on stdout. Failures print a one-line JSON error on stderr and exit
nonzero: 2 for configuration/usage problems, 1 for everything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .config import resolve
from .errors import ConfigError, ManifestError, RelmError
from .manifest import ExperimentManifest, resolve_manifest, run_manifest
from .ops import OPS, dump_summary, run_op


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for spec in OPS.values():
        p = sub.add_parser(spec.name, help=spec.help, description=spec.help)
        for name in spec.inputs:
            p.add_argument(_flag(name), dest=f"in_{name}", required=True, metavar="PATH")
        for name in spec.optional:
            p.add_argument(_flag(name), dest=f"in_{name}", metavar="PATH")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("-c", "--config-file", help="TOML config with sections " + ", ".join(spec.sections or ["(none)"]))
        p.add_argument("--config", action="append", default=[], metavar="SECTION.KEY=VALUE")
        if spec.name == "translate":
            p.add_argument("--beam", type=int, help="shortcut for decode.beam")
            p.add_argument("--greedy", action="store_true", help="batched greedy search (decode.greedy=true)")
    p = sub.add_parser("run-manifest", help="run every phase of an experiment manifest")
    p.add_argument("manifest", help="manifest path or bundled manifest name")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="overrides the manifest seed")
    return parser


def _run(args) -> dict:
    if args.command == "run-manifest":
        manifest = ExperimentManifest.load(resolve_manifest(args.manifest))
        record = run_manifest(manifest, args.out, args.seed)
        return {"command": "run-manifest", "id": record["id"], "seed": record["seed"], "out": args.out,
                "relm_threads": record["relm_threads"],
                "phases": {p["name"]: {"op": p["op"], "config": p["config"], "summary": p["summary"]}
                           for p in record["phases"]}}
    spec = OPS[args.command]
    overrides = list(args.config)
    if spec.name == "translate":
        if args.beam is not None:
            overrides.append(f"decode.beam={args.beam}")
        if args.greedy:
            overrides.append("decode.greedy=true")
    cfg = resolve(args.config_file, overrides, spec.sections)
    inputs = {k[3:]: v for k, v in vars(args).items() if k.startswith("in_") and v is not None}
    summary = run_op(spec.name, cfg, inputs, args.out, args.seed)
    return {"command": spec.name, "seed": args.seed, "out": args.out, "inputs": inputs,
            "config": cfg.resolved(), "summary": summary}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("UsageError", str(exc), 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _run(args)
    except (ConfigError, ManifestError) as exc:
        return _fail(type(exc).__name__, str(exc), 2)
    except (RelmError, OSError, ValueError, KeyError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    print(dump_summary(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
