"""Command line entry point: ``distilbias run|report|gen-data|inspect``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .. import models, synthdata
from . import config as config_mod
from .matrix import ResultStore, parse_cell_filter, run_matrix
from .reports import emit_reports


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="report format")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="distilbias", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the experiment matrix and emit reports")
    run.add_argument("config", type=Path)
    run.add_argument("--seed-offset", type=int, default=0, help="added to every configured seed")
    run.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    run.add_argument("--cell", default=None, help="only cells matching key=value[,key=value]")
    run.add_argument("--store", type=Path, default=None, help="override output_dir")
    _add_common(run)

    rep = sub.add_parser("report", help="re-emit reports from a result store")
    rep.add_argument("store", type=Path)
    rep.add_argument("--out", type=Path, default=None)
    _add_common(rep)

    gen = sub.add_parser("gen-data", help="write the dataset bundle of every seed")
    gen.add_argument("config", type=Path)
    gen.add_argument("--seed-offset", type=int, default=0)
    gen.add_argument("--out", type=Path, default=None, help="defaults to <output_dir>/data")

    ins = sub.add_parser("inspect", help="summarise a model checkpoint")
    ins.add_argument("checkpoint", type=Path)
    _add_common(ins)
    return ap


def cmd_run(args) -> int:
    cfg = config_mod.load(args.config).with_seed_offset(args.seed_offset)
    flt = parse_cell_filter(args.cell) if args.cell else None
    summary = run_matrix(cfg, jobs=args.jobs, cell_filter=flt, store_dir=args.store)
    print(f"store {summary.store}: {summary.cells} cells, {summary.completed} run, {summary.skipped} cached, "
          f"{summary.failed} failed; {summary.trained} models trained, {summary.cache_hits} cache hits")
    if summary.completed + summary.skipped:
        for p in emit_reports(ResultStore(summary.store), args.format):
            logging.info("wrote %s", p)
        print(f"reports in {Path(summary.store) / 'reports'}")
    return 1 if summary.failed else 0


def cmd_report(args) -> int:
    paths = emit_reports(ResultStore(args.store), args.format, args.out)
    for p in paths:
        print(p)
    return 0


def cmd_gen_data(args) -> int:
    cfg = config_mod.load(args.config).with_seed_offset(args.seed_offset)
    out = args.out or Path(cfg.output_dir) / "data"
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        bundle = synthdata.generate(cfg.data, seed)
        path = out / f"{cfg.data.kind}_seed{seed}.txt"
        synthdata.save_bundle(bundle, path)
        counts = {name: len(bundle[name]) for name in synthdata.SPLITS}
        print(f"{path}: {counts}")
    return 0


def cmd_inspect(args) -> int:
    model = models.load_checkpoint(args.checkpoint)
    info = {
        "spec": model.spec.to_dict(),
        "role": model.role,
        "n_params": model.n_params(),
        "digest": model.digest(),
        "provenance": model.provenance,
    }
    if args.format == "json":
        print(json.dumps(info, indent=1, sort_keys=True, default=str))
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["key", "value"])
        for k, v in info.items():
            w.writerow([k, json.dumps(v, sort_keys=True, default=str) if isinstance(v, dict) else v])
    return 0


COMMANDS = {"run": cmd_run, "report": cmd_report, "gen-data": cmd_gen_data, "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (config_mod.ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
