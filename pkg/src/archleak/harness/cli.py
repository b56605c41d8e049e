"""Command line entry point: ``archleak {run,report,morph,rf}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..arch_lab import (STEP_CHANGES, STEP_NAMES, ArchSpec, SpecError, receptive_field,
                        spec_diff, spec_for_step, tiny_ladder_spec, tiny_vit_spec)
from .config import ConfigError, ExperimentConfig, Preset, load_config
from .report import ReportError, ReportKind, report
from .runner import OUTPUT_ENV, output_root, run
from .store import CorruptRecord, RecordStore


def _load_cfg(args) -> ExperimentConfig:
    path = Path(args.config)
    if path.exists():
        cfg = load_config(path)
        d = cfg.to_dict()
    elif args.config in {p.value for p in Preset}:
        d = {"schema_version": 1, "preset": args.config, "seeds": [0, 1, 2]}
    else:
        raise ConfigError(f"{args.config}: no such config file or preset")
    if args.seeds:
        d["seeds"] = args.seeds
    if args.paper_scale:
        d["paper_scale"] = True
    if args.output:
        d["output_dir"] = args.output
    return ExperimentConfig.from_dict(d)


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    store = RecordStore(output_root(cfg))
    records = run(cfg, store, force=args.force)
    failed = [r for r in records if not r.ok]
    print(f"{len(records)} new record(s) in {store.root} ({len(failed)} failed)")
    for r in records:
        status = "ok" if r.ok else "FAILED: " + (r.error or "").splitlines()[0]
        shown = {k: round(v, 4) for k, v in r.metrics.items() if isinstance(v, float)}
        print(f"  {json.dumps(r.cell)} seed={r.seed} {status} {shown if r.ok else ''}")
    return 1 if failed else 0


def _collect_records(paths) -> list:
    records = []
    for p in map(Path, paths):
        if p.is_dir():
            records.extend(RecordStore(p).records())
        else:
            records.append(RecordStore.read(p))
    return records


def cmd_report(args) -> int:
    records = _collect_records(args.records)
    if args.preset:
        records = [r for r in records if r.preset == args.preset]
    out = Path(args.out) if args.out else Path(args.records[0]) / "reports" \
        if Path(args.records[0]).is_dir() else Path("reports")
    for path in report(records, args.kind, out):
        print(path)
    return 0


def _spec_from_arg(text: str) -> ArchSpec:
    if text == "vit":
        return tiny_vit_spec()
    if text.startswith("step:"):
        return spec_for_step(int(text.split(":", 1)[1]))
    if text.startswith("tiny:"):
        return tiny_ladder_spec(int(text.split(":", 1)[1]))
    return ArchSpec.from_dict(json.loads(Path(text).read_text()))


def cmd_morph(args) -> int:
    spec = tiny_ladder_spec(args.step) if args.tiny else spec_for_step(args.step)
    print(f"step {args.step}: {STEP_NAMES[args.step]}")
    if args.step > 1:
        prev = tiny_ladder_spec(args.step - 1) if args.tiny else spec_for_step(args.step - 1)
        changed = spec_diff(prev, spec)
        print(f"changed fields: {', '.join(sorted(changed))} "
              f"(documented: {', '.join(sorted(STEP_CHANGES[args.step]))})")
    if args.print_spec:
        print(json.dumps(spec.to_dict(), indent=2))
    return 0


def cmd_rf(args) -> int:
    rep = receptive_field(_spec_from_arg(args.spec))
    if rep.attention_global:
        print(f"global (attention); input extent {rep.total}")
        return 0
    for layer in rep.per_layer:
        print(f"{layer.name:40s} k={layer.kernel} s={layer.stride} rf={layer.rf}")
    print(f"total {rep.total}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="archleak", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a preset experiment from a YAML/JSON config")
    r.add_argument("config", help="config file, or a preset name for its defaults")
    r.add_argument("--force", action="store_true", help="rerun completed (config, seed) pairs")
    r.add_argument("--paper-scale", action="store_true", help="full-scale recipes, widths and image sizes")
    r.add_argument("--seeds", type=int, nargs="+")
    r.add_argument("--output", help=f"result store root (default ${OUTPUT_ENV} or ./archleak-results)")
    r.set_defaults(fn=cmd_run)

    rep = sub.add_parser("report", help="render tables/figures from records")
    rep.add_argument("records", nargs="+", help="record files or store directories")
    rep.add_argument("--kind", required=True, choices=[k.value for k in ReportKind])
    rep.add_argument("--preset", help="only records of this preset")
    rep.add_argument("--out", help="output directory")
    rep.set_defaults(fn=cmd_report)

    m = sub.add_parser("morph", help="show one step of the ResNet-to-ConvNeXt ladder")
    m.add_argument("--step", type=int, required=True, choices=range(1, 15), metavar="1..14")
    m.add_argument("--print-spec", action="store_true")
    m.add_argument("--tiny", action="store_true", help="desk-scale variant")
    m.set_defaults(fn=cmd_morph)

    f = sub.add_parser("rf", help="receptive field of an architecture")
    f.add_argument("spec", help="spec JSON file, 'step:K', 'tiny:K' or 'vit'")
    f.set_defaults(fn=cmd_rf)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, SpecError, ReportError, CorruptRecord, FileNotFoundError) as e:
        print(f"archleak: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
