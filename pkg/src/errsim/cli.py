"""Command-line entry point wiring the full pipeline.

Subcommands: corpus analysis (analyze), database validation (validate-db),
campaign execution (simulate), report rendering (report), and golden trace
dumps (trace). Exit codes: 0 success, 1 usage error, 2 data/validation
error, 3 engine error.

All randomness flows from the campaign config master seed (or --seed);
nothing reads ambient entropy. Log verbosity comes from the ERRSIM_LOG
environment variable (debug/info/warning/error).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
import time
from pathlib import Path

from . import __version__
from .analyzer import mine_corpus_dir
from .classify import OUTCOMES, aggregate, build_policy
from .errordb import load_db, load_default_db, save_db
from .errors import EngineError, ErrSimError, ValidationError
from .graph import execute, load_model
from .saboteur import CampaignConfig, load_records, run_campaign
from .tensorio import load_tensor, save_tensor

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_ENGINE = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="errsim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"errsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="mine an error-model DB from a tensor corpus")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="output database JSON path")
    p.add_argument("--report", help="analysis report JSON path (default: <out>_report.json)")
    p.add_argument("--min-samples", type=int, default=100,
                   help="minimum non-masked pairs per kind (default 100)")

    p = sub.add_parser("validate-db", help="validate an error-model database")
    p.add_argument("--db", required=True, help="database JSON path")

    p = sub.add_parser("simulate", help="run an error-simulation campaign")
    p.add_argument("--model", required=True, help="model manifest JSON")
    p.add_argument("--db", help="error-model DB path, or 'default' for the built-in")
    p.add_argument("--config", required=True, help="campaign config (TOML or JSON)")
    p.add_argument("--out", help="records JSONL path (overrides config)")
    p.add_argument("--report", help="report JSON path (overrides config)")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--workers", type=int, help="worker count (overrides config)")
    p.add_argument("--no-cache", action="store_true", help="disable the prefix cache")

    p = sub.add_parser("report", help="aggregate and render campaign records")
    p.add_argument("--records", required=True, help="records JSONL path")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("--out", help="write to a file instead of stdout")

    p = sub.add_parser("trace", help="dump every node's golden output tensor")
    p.add_argument("--model", required=True, help="model manifest JSON")
    p.add_argument("--input", action="append", required=True,
                   help="input tensor file; use name=path for multi-input models")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _cmd_analyze(args) -> int:
    db, report = mine_corpus_dir(args.corpus, min_samples=args.min_samples)
    save_db(db, args.out)
    report_path = args.report or str(Path(args.out).with_suffix("")) + "_report.json"
    Path(report_path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
    print(report.render_text())
    print(f"database written to {args.out} ({len(db.entries)} kinds)")
    if report.excluded_kinds:
        print(f"excluded kinds (below --min-samples): {sorted(report.excluded_kinds)}")
    return EXIT_OK


def _cmd_validate_db(args) -> int:
    db = load_db(args.db)
    for kind in db.kinds():
        entry = db.entries[kind]
        prov = entry.provenance
        print(f"{kind}: ok (corpus={prov.get('corpus', '?')}, "
              f"samples={prov.get('samples', '?')})")
    if db.unknown_kinds:
        print(f"warning: entries for unknown operator kinds: {list(db.unknown_kinds)}")
    print(f"{args.db}: valid ({len(db.entries)} kinds, "
          f"schema_version={db.schema_version})")
    return EXIT_OK


def _load_db_arg(path_arg, config: CampaignConfig):
    path = path_arg or config.db_path
    if path is None:
        raise ValidationError("no database given (--db flag or config 'db' key)")
    if path == "default":
        return load_default_db()
    return load_db(path)


def _cmd_simulate(args) -> int:
    config = CampaignConfig.from_file(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.workers is not None:
        config.workers = args.workers
    if args.no_cache:
        config.cache_enabled = False
    if args.out:
        config.records_path = args.out
    if args.report:
        config.report_path = args.report
    config.validate()
    if not config.records_path:
        raise ValidationError("no records path given (--out flag or config output.records)")

    graph = load_model(args.model)
    db = _load_db_arg(args.db, config)
    classifier = build_policy(config.classifier)

    started = time.perf_counter()
    with open(config.records_path, "w") as sink:
        records, report = run_campaign(config, graph, db, classifier, records_sink=sink)
    wall = time.perf_counter() - started

    if config.report_path:
        Path(config.report_path).write_text(
            json.dumps(report.to_json(), indent=2, sort_keys=True)
        )
    counts = " ".join(f"{o}={report.totals[o]}" for o in OUTCOMES)
    print(f"experiments={report.totals['experiments']} {counts} wall={wall:.2f}s")
    return EXIT_OK


def _cmd_report(args) -> int:
    records = load_records(args.records)
    report = aggregate(records)
    if args.format == "json":
        rendered = json.dumps(report.to_json(), indent=2, sort_keys=True)
    else:
        rendered = report.render_text()
    if args.out:
        Path(args.out).write_text(rendered + "\n")
    else:
        print(rendered)
    return EXIT_OK


def _parse_input_args(graph, specs):
    inputs = {}
    for spec in specs:
        if "=" in spec:
            name, _, path = spec.partition("=")
        elif len(graph.inputs) == 1:
            name, path = next(iter(graph.inputs)), spec
        else:
            raise ValidationError(
                f"model has inputs {sorted(graph.inputs)}; use --input name=path"
            )
        if name not in graph.inputs:
            raise ValidationError(f"unknown model input {name!r}")
        inputs[name] = load_tensor(path, graph.inputs[name])
    return inputs


def _cmd_trace(args) -> int:
    graph = load_model(args.model)
    inputs = _parse_input_args(graph, args.input)
    trace = execute(graph, inputs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    sites = []
    for pos, nid in enumerate(graph.order):
        fname = f"{pos:03d}_{re.sub(r'[^A-Za-z0-9._-]', '_', nid)}.bin"
        save_tensor(out_dir / fname, trace[nid])
        sites.append({
            "id": nid,
            "kind": graph.nodes[nid].kind,
            "shape": list(graph.shapes[nid]),
            "file": fname,
        })
    (out_dir / "sites.json").write_text(json.dumps(
        {"model_digest": graph.digest(), "sites": sites},
        indent=2, sort_keys=True,
    ))
    print(f"dumped {len(sites)} node tensors to {out_dir}")
    return EXIT_OK


_COMMANDS = {
    "analyze": _cmd_analyze,
    "validate-db": _cmd_validate_db,
    "simulate": _cmd_simulate,
    "report": _cmd_report,
    "trace": _cmd_trace,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("ERRSIM_LOG", "WARNING").upper(),
                      logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --version/--help
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"errsim: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EngineError as exc:
        print(f"errsim: {exc}", file=sys.stderr)
        return EXIT_ENGINE
    except ErrSimError as exc:
        print(f"errsim: {exc}", file=sys.stderr)
        return EXIT_ENGINE
    except OSError as exc:
        print(f"errsim: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
