# treeband.py
"""
TreeBand - band-of-trees packet classification, offline and online.

Usage:
    python treeband.py inspect   --ruleset table1.rules
    python treeband.py decompose --stats of1_1000_stats.csv --metric sd
    python treeband.py build     --ruleset rules.txt --metric sd --out engine.json
    python treeband.py train     --ruleset rules.txt --metric sd --out runs/sd
    python treeband.py classify  --engine engine.json --trace trace.csv
    python treeband.py bench     --rulesets 'rulesets/*.rules' --schemes sd,di,random1,random2 --out bench/
    python treeband.py generate  --rules 1000 --packets 10000 --out-rules syn.rules --out-trace syn.csv

Exit codes: 0 success, 1 usage error, 2 data error.
"""

import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional

from bench import DEFAULT_SCHEMES, expand_rulesets, report, run_bench
from classifier import build_engine, classify_trace, engine_memory, load_engine, save_engine, worst_case_accesses
from config import VERSION, AppConfig, ConfigError, load_config, render_csv_with_echo, write_text_atomic
from learner import NonFiniteLossError, train
from metrics import (FIXED_SUBSETS, RANKED_SCHEMES, compute_field_stats, custom_decomposition, load_plan,
                     load_stats, parse_scheme, plan_for, save_plan, stats_table)
from ruleset import generate_synthetic, generate_trace, load_ruleset, load_trace, save_ruleset, save_trace

logger = logging.getLogger('treeband')

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage problems instead of exiting with 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message, file=sys.stderr)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        write_text_atomic(out, text)
    else:
        sys.stdout.write(text)


def _field_list(text: Optional[str]) -> List[str]:
    return [name.strip() for name in text.split(',') if name.strip()] if text else []


def _scheme(text: str) -> str:
    """Named scheme with a plan of its own; anything else is a usage error."""
    try:
        scheme = parse_scheme(text)
    except ValueError as e:
        raise UsageError(str(e)) from e
    if scheme not in RANKED_SCHEMES and scheme not in FIXED_SUBSETS:
        raise UsageError(f"Scheme {scheme} needs --subset-a/--subset-b")
    return scheme


def _metric_arg(text: str) -> str:
    try:
        return _scheme(text)
    except UsageError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _plan_from_args(args, config: AppConfig, ruleset=None):
    """Plan from --plan, --subset-a/--subset-b, --stats or the ruleset itself."""
    if getattr(args, 'plan', None):
        return load_plan(args.plan)
    if args.subset_a or args.subset_b:
        if not (args.subset_a and args.subset_b):
            raise UsageError("--subset-a and --subset-b go together")
        return custom_decomposition(_field_list(args.subset_a), _field_list(args.subset_b))
    stats = load_stats(args.stats) if getattr(args, 'stats', None) else None
    return plan_for(args.metric, ruleset, stats, config.wildcard_policy)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_inspect(args, config: AppConfig) -> int:
    ruleset = load_ruleset(args.ruleset, config.ruleset_format)
    stats = compute_field_stats(ruleset, config.wildcard_policy)
    _emit(render_csv_with_echo(stats_table(stats), config.echo_lines()), args.out)
    _say(args, f"✅ {len(ruleset)} rules, {len(stats)} ranked fields")
    return EXIT_OK


def cmd_decompose(args, config: AppConfig) -> int:
    if not (args.ruleset or args.stats or (args.subset_a and args.subset_b)):
        raise UsageError("decompose needs --ruleset, --stats or --subset-a/--subset-b")
    ruleset = load_ruleset(args.ruleset, config.ruleset_format) if args.ruleset else None
    plan = _plan_from_args(args, config, ruleset)
    if args.out:
        save_plan(args.out, plan)
    else:
        sys.stdout.write(json.dumps(plan.to_dict(), indent=2) + '\n')
    _say(args, f"✅ {plan.describe()}")
    return EXIT_OK


def cmd_build(args, config: AppConfig) -> int:
    _say(args, f"[1/3] Loading {args.ruleset}")
    ruleset = load_ruleset(args.ruleset, config.ruleset_format)
    plan = _plan_from_args(args, config, ruleset)
    _say(args, f"[2/3] Building trees ({args.builder}) for {plan.describe()}")
    engine = build_engine(ruleset, plan, args.builder, config, os.path.dirname(os.path.abspath(args.out)))
    _say(args, f"[3/3] Saving engine to {args.out}")
    save_engine(args.out, engine)
    total, per_rule = engine_memory(engine)
    _say(args, f"✅ depth A={engine.tree_a.stats.depth} B={engine.tree_b.stats.depth} "
               f"worst case={worst_case_accesses(engine)} memory={total} bytes ({per_rule:.1f}/rule)")
    return EXIT_OK


def cmd_train(args, config: AppConfig) -> int:
    ruleset = load_ruleset(args.ruleset, config.ruleset_format)
    plan = _plan_from_args(args, config, ruleset)
    os.makedirs(args.out, exist_ok=True)
    save_plan(os.path.join(args.out, 'plan.json'), plan)
    subsets = ['a', 'b'] if args.subset == 'both' else [args.subset]
    for i, subset in enumerate(subsets, 1):
        _say(args, f"[{i}/{len(subsets)}] Training subset {subset}")
        result = train(ruleset, plan, subset, config, args.out)
        _say(args, f"   ✅ {result.iterations} iterations, best depth {result.best_tree.stats.depth}, "
                   f"objective {result.best_objective:.2f} ({result.stop_reason})")
    return EXIT_OK


def cmd_classify(args, config: AppConfig) -> int:
    engine = load_engine(args.engine)
    trace = load_trace(args.trace)
    df, agreement = classify_trace(engine, trace)
    _emit(render_csv_with_echo(df, config.echo_lines()), args.out)
    matched = int(df['rule_id'].notna().sum())
    summary = f"{len(df)} packets, {matched} matched"
    if agreement is not None:
        summary += f", agreement {agreement * 100:.2f}%"
    print(summary, file=sys.stderr)
    return EXIT_OK


def cmd_bench(args, config: AppConfig) -> int:
    rulesets = expand_rulesets(args.rulesets or [])
    schemes = [_scheme(s) for s in _field_list(args.schemes)] or list(DEFAULT_SCHEMES)
    _say(args, f"🚜 Bench: {len(rulesets) or 'synthetic'} rulesets x {len(schemes)} schemes ({args.builder})")
    rows = run_bench(rulesets, schemes, args.builder, config, args.out, workers=config.workers)
    failed = [r for r in rows if not r.ok]
    for r in failed:
        _say(args, f"   ❌ {r.ruleset}/{r.scheme}: {r.error}")
    if len(failed) == len(rows):
        print("❌ Error: every bench cell failed", file=sys.stderr)
        return EXIT_DATA
    summary = report(rows, args.out, args.excel, config)
    sys.stdout.write(summary.text)
    _say(args, f"✅ {len(rows) - len(failed)}/{len(rows)} cells" + (f", results in {args.out}" if args.out else ''))
    return EXIT_OK


def cmd_generate(args, config: AppConfig) -> int:
    ruleset = generate_synthetic(config.seed, args.rules, name=os.path.basename(args.out_rules))
    save_ruleset(args.out_rules, ruleset)
    if args.out_trace:
        trace = generate_trace(ruleset, config.seed + 1, args.packets)
        save_trace(args.out_trace, trace, config.echo_lines())
    _say(args, f"✅ {args.rules} rules -> {args.out_rules}"
               + (f", {args.packets} packets -> {args.out_trace}" if args.out_trace else ''))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common_options() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument('--config', help='key=value config file')
    common.add_argument('--seed', type=int, help='Seed for every random stream')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='Config override (repeatable), e.g. --set train.minibatch=256')
    common.add_argument('--format', choices=['native', 'classbench5'], help='Ruleset file format')
    common.add_argument('--leaf-threshold', type=int, help='Max rules per leaf')
    common.add_argument('--c', type=float, help='Time-space coefficient in [0, 1]')
    common.add_argument('--workers', type=int, help='Parallel workers')
    common.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    common.add_argument('-q', '--quiet', action='store_true', help='Errors only, no progress lines')
    return common


def _plan_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--metric', default='SD', type=_metric_arg,
                        help='sd, di, variance, random1 or random2 (default: sd)')
    parser.add_argument('--stats', help='Per-field stats CSV to rank instead of the ruleset')
    parser.add_argument('--subset-a', help='Explicit comma-separated fields for subset A')
    parser.add_argument('--subset-b', help='Explicit comma-separated fields for subset B')


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='treeband',
                     description="TreeBand - decompose rulesets and classify packets with a band of decision trees")
    parser.add_argument('--version', action='version', version=f'treeband {VERSION}')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    common = _common_options()

    p = sub.add_parser('inspect', parents=[common], help='Per-field SD / variance / DI table')
    p.add_argument('--ruleset', required=True)
    p.add_argument('--out', help='CSV file (default: stdout)')
    p.set_defaults(handler=cmd_inspect)

    p = sub.add_parser('decompose', parents=[common], help='Split fields into two subsets')
    p.add_argument('--ruleset')
    _plan_options(p)
    p.add_argument('--out', help='Plan JSON file (default: stdout)')
    p.set_defaults(handler=cmd_decompose)

    p = sub.add_parser('build', parents=[common], help='Build an engine (both trees)')
    p.add_argument('--ruleset', required=True)
    _plan_options(p)
    p.add_argument('--plan', help='Plan JSON from decompose')
    p.add_argument('--builder', default='baseline', help='baseline, policy or policy:<checkpoint>')
    p.add_argument('--out', required=True, help='Engine JSON file')
    p.set_defaults(handler=cmd_build)

    p = sub.add_parser('train', parents=[common], help='Train tree-building policies')
    p.add_argument('--ruleset', required=True)
    _plan_options(p)
    p.add_argument('--plan', help='Plan JSON from decompose')
    p.add_argument('--subset', choices=['a', 'b', 'both'], default='both')
    p.add_argument('--out', required=True, help='Output directory')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('classify', parents=[common], help='Classify a packet trace')
    p.add_argument('--engine', required=True)
    p.add_argument('--trace', required=True)
    p.add_argument('--out', help='Results CSV (default: stdout)')
    p.set_defaults(handler=cmd_classify)

    p = sub.add_parser('bench', parents=[common], help='All schemes over all rulesets')
    p.add_argument('--rulesets', nargs='*', help='Ruleset files or globs (default: synthetic stand-ins)')
    p.add_argument('--schemes', default=','.join(s.lower() for s in DEFAULT_SCHEMES))
    p.add_argument('--builder', default='baseline', help='baseline, policy or policy:<checkpoint>')
    p.add_argument('--out', help='Output directory')
    p.add_argument('--excel', action='store_true', help='Also write bench_report.xlsx')
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser('generate', parents=[common], help='Synthetic ruleset and labeled trace')
    p.add_argument('--rules', type=int, default=1000)
    p.add_argument('--packets', type=int, default=10000)
    p.add_argument('--out-rules', required=True)
    p.add_argument('--out-trace')
    p.set_defaults(handler=cmd_generate)
    return parser


def _overrides(args) -> Dict[str, str]:
    overrides = {}
    for item in args.set:
        if '=' not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split('=', 1)
        overrides[key.strip()] = value.strip()
    flags = {'seed': args.seed, 'ruleset_format': args.format, 'leaf_threshold': args.leaf_threshold,
             'c': args.c, 'workers': args.workers}
    overrides.update({k: str(v) for k, v in flags.items() if v is not None})
    return overrides


def _setup_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.ERROR if quiet else logging.WARNING
    logging.basicConfig(level=level, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
                        stream=sys.stderr, force=True)


def main(argv: Optional[List[str]] = None) -> int:
    """Command-line interface."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)

    if not getattr(args, 'command', None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    _setup_logging(args.verbose, args.quiet)
    try:
        config = load_config(args.config, _overrides(args))
    except (UsageError, ConfigError) as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        return EXIT_DATA

    try:
        return args.handler(args, config)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"treeband {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, NonFiniteLossError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"\n❌ Error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == '__main__':
    sys.exit(main())
