"""Command line entry point: ``ztafl run | sweep | report | preset``."""
from __future__ import annotations

import argparse
import glob
import logging
import os
import sys

from . import config as cfgmod
from .errors import InvalidInputError
from .report import emit_report
from .simulation import run_experiment, summarize, sweep

logger = logging.getLogger("ztafl")


def _cmd_run(args) -> int:
    if args.config:
        cfg = cfgmod.load(args.config)
    else:
        cfg = cfgmod.preset(args.preset)
    if args.rounds is not None:
        cfg = cfg.with_overrides(rounds=args.rounds)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    results = []
    for s in seeds:
        res = run_experiment(cfg.with_overrides(seed=s), args.out, robustness=not args.no_robustness)
        f = res.final
        print(f"{res.run_dir}: test_acc={f.test_acc:.4f} macro_f1={f.macro_f1:.4f}"
              + (f" asr={f.asr:.4f}" if f.asr is not None else ""))
        results.append(res)
    if len(results) > 1:
        for k, (m, sd) in summarize(results).items():
            print(f"{k}: {m:.4f} +/- {sd:.4f}")
    return 0


def _cmd_sweep(args) -> int:
    paths = sorted(glob.glob(os.path.join(args.configs, "*.json")))
    if not paths:
        raise InvalidInputError(f"no *.json configs in {args.configs}")
    configs = [cfgmod.load(p) for p in paths]
    seeds = [args.seed] if args.seed is not None else None
    table = sweep(configs, args.out, seeds)
    print(f"{len(table)} rows -> {os.path.join(args.out, 'comparison.csv')}")
    return 0


def _cmd_report(args) -> int:
    rep = emit_report(args.run_dir, plots=not args.no_plots)
    for f in rep.files:
        print(f)
    if rep.partial:
        print(f"partial report ({len(rep.warnings)} gaps, see notes.json)", file=sys.stderr)
    return 0


def _cmd_preset(args) -> int:
    cfg = cfgmod.preset(args.name)
    if args.out:
        cfgmod.save(cfg, args.out)
    else:
        print(cfg.to_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ztafl", description="Zero-trust federated learning simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run one experiment config")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="JSON config file")
    src.add_argument("--preset", help="named scenario instead of a config file")
    r.add_argument("--seed", type=int, help="single seed (default: every seed in the config)")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--rounds", type=int)
    r.add_argument("--no-robustness", action="store_true", help="skip the final epsilon sweep")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep", help="run every *.json config in a directory")
    s.add_argument("--configs", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=_cmd_sweep)

    rp = sub.add_parser("report", help="plot-ready CSVs and PNGs for a run or sweep directory")
    rp.add_argument("run_dir")
    rp.add_argument("--no-plots", action="store_true")
    rp.set_defaults(func=_cmd_report)

    pr = sub.add_parser("preset", help="print or save a named scenario config")
    pr.add_argument("name")
    pr.add_argument("--out")
    pr.set_defaults(func=_cmd_preset)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidInputError, OSError) as exc:
        print(f"ztafl: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
