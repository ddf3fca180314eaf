"""Command-line entry point: ``tirtrack <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import costmodel, harness, synthgen
from .checkpoint import CheckpointError
from .config import RunConfig
from .tensor import NonFiniteError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("tirtrack")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _resolve_config(args) -> RunConfig:
    try:
        cfg = config_mod.load(args.config) if args.config else RunConfig()
    except OSError:
        raise
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"bad config file {args.config}: {exc}") from exc
    try:
        return config_mod.apply_overrides(cfg, args.set or [])
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _load_suite(args, cfg: RunConfig):
    """Evaluation sequences: exported directories when ``--data`` is given, else the generated suite."""
    if getattr(args, "data", None):
        root = Path(args.data)
        dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "groundtruth.txt").exists())
        seqs = [synthgen.import_sequence(d) for d in dirs]
        evals = [s for s in seqs if not s.name.startswith("train_")]
        if not evals:
            raise synthgen.SequenceIOError(f"no evaluation sequences found under {root}")
    else:
        evals, _ = synthgen.split_suite(synthgen.make_suite(cfg.suite_seed))
    if getattr(args, "attribute", None):
        evals = [s for s in evals if args.attribute in s.attributes]
        if not evals:
            raise UsageError(f"no sequences tagged {args.attribute}")
    return evals


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    suite = synthgen.make_suite(args.seed)
    for seq in suite:
        synthgen.export_sequence(seq, out / seq.name)
    index = [{"name": s.name, "frames": len(s), "attributes": sorted(s.attributes)} for s in suite]
    (out / "suite.json").write_text(json.dumps({"seed": args.seed, "sequences": index}, indent=2) + "\n")
    print(f"wrote {len(suite)} sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    run_dir = Path(args.out or cfg.out_dir)
    res = harness.train(cfg, run_dir=run_dir)
    last = res.log_rows[-1] if res.log_rows else {}
    print(f"trained {cfg.steps} steps; final total loss {last.get('total', float('nan')):.6f}; run dir {run_dir}")
    if args.eval:
        report = harness.evaluate(res.model, None, cfg, out_dir=run_dir)
        _print_report(report)
    return EXIT_OK


def _print_report(report: harness.EvalReport) -> None:
    a = report.aggregate
    print(f"aggregate: precision {a['precision']:.4f}  norm_precision {a['norm_precision']:.4f}  "
          f"success {a['success']:.4f}  diversity {a['diversity']:.4f}")
    for attr, m in sorted(report.by_attribute.items()):
        print(f"  {attr:6s} precision {m['precision']:.4f}  success {m['success']:.4f}")


def cmd_eval(args) -> int:
    model, ckpt_cfg = harness.load_model(args.checkpoint)
    cfg = ckpt_cfg
    if args.set:
        cfg = config_mod.apply_overrides(cfg, args.set)
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent.parent
    report = harness.evaluate(model, _load_suite(args, cfg), cfg, out_dir=out)
    _print_report(report)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out or cfg.out_dir)
    seeds = [int(s) for s in args.seeds.split(",")]
    for axis in args.axis:
        result = harness.ablate(cfg, axis, seeds, out_dir=out)
        print(result.to_text(), end="")
    return EXIT_OK


def cmd_costmodel(args) -> int:
    if args.sweep:
        if args.flops_budget is None:
            raise UsageError("--sweep requires --flops-budget")
        rows = costmodel.sweep(args.h, args.w, args.flops_budget, c_in=args.cin)
    else:
        if args.cin is None or args.cout is None:
            raise UsageError("give --cin and --cout, or use --sweep")
        try:
            rows = [costmodel.report(costmodel.LayerCostSpec(args.h, args.w, args.cin, args.cout, args.g))]
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    print(costmodel.format_table(rows), end="")
    if args.csv:
        costmodel.write_csv(rows, args.csv)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import MIN_PROBES, TOLERANCE, run_suite

    if args.probes < MIN_PROBES:
        raise UsageError(f"--probes must be at least {MIN_PROBES}")
    reports = run_suite(args.probes, args.seed)
    failed = 0
    for r in reports:
        ok = r.passed(TOLERANCE)
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {r.name:28s} max_rel_error={r.max_rel_error:.3e}  probes={r.probes}")
    print(f"{len(reports) - failed}/{len(reports)} gradient checks passed (tolerance {TOLERANCE:g})")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, e.g. --set tracker.dccfg.n_groups=4 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tirtrack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="export the synthetic sequence suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a tracker")
    _add_config_args(p)
    p.add_argument("--out", help="run directory (default: config out_dir)")
    p.add_argument("--eval", action="store_true", help="evaluate the final model into the run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="directory of exported sequences (default: regenerate the suite)")
    p.add_argument("--attribute", choices=synthgen.ATTRIBUTES)
    p.add_argument("--out", help="report directory (default: the checkpoint's run directory)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate ablation variants")
    _add_config_args(p)
    p.add_argument("--axis", action="append", choices=harness.AXES, required=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("costmodel", help="FLOPs / memory-access cost of a 1x1 convolution")
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--w", type=int, required=True)
    p.add_argument("--cin", type=int)
    p.add_argument("--cout", type=int)
    p.add_argument("--g", type=int, default=1)
    p.add_argument("--sweep", action="store_true", help="enumerate layer shapes under a FLOPs budget")
    p.add_argument("--flops-budget", type=int)
    p.add_argument("--csv", help="also write rows to this CSV file")
    p.set_defaults(func=cmd_costmodel)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--probes", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tirtrack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except harness.DivergenceError as exc:
        print(f"tirtrack: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"tirtrack: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, synthgen.SequenceIOError, OSError) as exc:
        print(f"tirtrack: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
