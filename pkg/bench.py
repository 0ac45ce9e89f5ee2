# bench.py
"""
Bench: every decomposition scheme over every ruleset, baseline or learned trees.

Per (ruleset, scheme) cell: decompose -> build engine -> record both tree
depths and sizes. Failures become error rows and the run moves on.
Outputs:
    bench_rows.csv      one row per cell (no timings, so reruns are byte-identical)
    bench_timing.csv    wall-clock per cell
    bench_depth.csv     per-ruleset depth_a / depth_b / worst_case by scheme
    bench_bytes.csv     per-ruleset memory by scheme (with log10 column)
    bench_deltas.csv    mean worst case per scheme, percentage vs SD
    bench_report.txt    the three tables as plain text
    bench_report.xlsx   same tables, one sheet each (optional)
"""

import glob
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from classifier import build_engine
from config import AppConfig, write_csv_with_echo, write_text_atomic
from metrics import parse_scheme, plan_for
from ruleset import Ruleset, generate_synthetic, load_ruleset

logger = logging.getLogger(__name__)

DEFAULT_SCHEMES = ('SD', 'DI', 'Random1', 'Random2')
# Stand-ins for the OpenFlow benchmark rulesets when none are supplied
STANDIN_SIZES = (('syn_100', 100), ('syn_1000', 1000))

ROW_COLUMNS = ['ruleset', 'scheme', 'depth_a', 'depth_b', 'worst_case', 'bytes_a', 'bytes_b',
               'build_mode', 'seed', 'rules', 'error']
TABLE_COLUMNS = ['ruleset', 'scheme', 'depth_a', 'depth_b', 'worst_case', 'bytes_a', 'bytes_b']


@dataclass
class BenchRow:
    ruleset: str
    scheme: str
    depth_a: int = 0
    depth_b: int = 0
    worst_case: int = 0
    bytes_a: int = 0
    bytes_b: int = 0
    build_mode: str = 'baseline'
    seed: int = 0
    rules: int = 0
    error: str = ''
    wall_clock: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass
class BenchReport:
    depth_table: pd.DataFrame
    bytes_table: pd.DataFrame
    delta_table: pd.DataFrame
    text: str


RulesetInput = Union[str, Tuple[str, Ruleset]]


def standin_rulesets(seed: int) -> List[Tuple[str, Ruleset]]:
    return [(name, generate_synthetic(seed + i, n, name=name)) for i, (name, n) in enumerate(STANDIN_SIZES)]


def expand_rulesets(patterns: Sequence[str]) -> List[str]:
    """Glob patterns to a sorted, de-duplicated file list (literal paths kept)."""
    paths = []
    for pattern in patterns:
        matches = sorted(glob.glob(pattern))
        paths.extend(matches if matches else [pattern])
    return list(dict.fromkeys(paths))


def _run_cell(args) -> BenchRow:
    name, ruleset, scheme, builder, config, out_dir = args
    row = BenchRow(ruleset=name, scheme=scheme, build_mode=builder, seed=config.seed, rules=len(ruleset))
    started = time.perf_counter()
    try:
        plan = plan_for(scheme, ruleset, wildcard_policy=config.wildcard_policy)
        cell_dir = os.path.join(out_dir, f'{name}_{scheme}') if out_dir and builder == 'policy' else None
        engine = build_engine(ruleset, plan, builder, config, cell_dir)
        stats_a, stats_b = engine.tree_a.stats, engine.tree_b.stats
        row.depth_a, row.depth_b = stats_a.depth, stats_b.depth
        row.worst_case = max(stats_a.depth, stats_b.depth)
        row.bytes_a, row.bytes_b = stats_a.bytes_total, stats_b.bytes_total
    except Exception as e:
        logger.error(f"{name}/{scheme} failed: {e}")
        row.error = f"{type(e).__name__}: {e}"
    row.wall_clock = time.perf_counter() - started
    return row


def run_bench(rulesets: Sequence[RulesetInput], schemes: Sequence[str] = DEFAULT_SCHEMES,
              builder: str = 'baseline', config: Optional[AppConfig] = None,
              out_dir: Optional[str] = None, workers: int = 1) -> List[BenchRow]:
    """
    Run every (ruleset, scheme) cell.

    Args:
        rulesets: Ruleset files or (name, Ruleset) pairs; empty -> synthetic stand-ins
        schemes: Scheme names (case-insensitive)
        builder: 'baseline', 'policy' or 'policy:<checkpoint>'
        config: Effective config
        out_dir: Where bench_rows.csv and bench_timing.csv go (optional)
        workers: Parallel cells; rows keep ruleset-major, scheme-minor order

    Returns:
        One BenchRow per cell
    """
    config = config or AppConfig()
    schemes = [parse_scheme(s) for s in schemes]
    loaded: List[Tuple[str, Optional[Ruleset], str]] = []

    if not rulesets:
        logger.warning("No rulesets given, using synthetic stand-ins")
        loaded = [(name, rs, '') for name, rs in standin_rulesets(config.seed)]
    for item in rulesets:
        if isinstance(item, tuple):
            loaded.append((item[0], item[1], ''))
            continue
        name = os.path.splitext(os.path.basename(item))[0]
        try:
            loaded.append((name, load_ruleset(item, config.ruleset_format), ''))
        except (OSError, ValueError) as e:
            logger.error(f"Cannot load {item}: {e}")
            loaded.append((name, None, f"{type(e).__name__}: {e}"))

    slots: List[Optional[BenchRow]] = []
    cells = []
    for name, ruleset, error in loaded:
        for scheme in schemes:
            if ruleset is None:
                slots.append(BenchRow(ruleset=name, scheme=scheme, build_mode=builder,
                                     seed=config.seed, error=error))
            else:
                cells.append((name, ruleset, scheme, builder, config, out_dir))
                slots.append(None)

    total = len(cells)
    if workers > 1 and total > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(_run_cell, cells))
    else:
        results = []
        for i, cell in enumerate(cells, 1):
            logger.info(f"[{i}/{total}] {cell[0]} / {cell[2]}")
            results.append(_run_cell(cell))

    it = iter(results)
    rows = [r if r is not None else next(it) for r in slots]
    failed = sum(1 for r in rows if not r.ok)
    logger.info(f"Bench done: {len(rows)} rows, {failed} failed")

    if out_dir:
        echo = config.echo_lines()
        write_csv_with_echo(os.path.join(out_dir, 'bench_rows.csv'), rows_frame(rows), echo)
        write_csv_with_echo(os.path.join(out_dir, 'bench_timing.csv'), timing_frame(rows), echo)
    return rows


def rows_frame(rows: Sequence[BenchRow]) -> pd.DataFrame:
    return pd.DataFrame([{k: v for k, v in asdict(r).items() if k != 'wall_clock'} for r in rows],
                        columns=ROW_COLUMNS)


def timing_frame(rows: Sequence[BenchRow]) -> pd.DataFrame:
    return pd.DataFrame([{'ruleset': r.ruleset, 'scheme': r.scheme, 'wall_clock': round(r.wall_clock, 4)}
                         for r in rows], columns=['ruleset', 'scheme', 'wall_clock'])


def delta_table(rows: Sequence[BenchRow], reference: str = 'SD') -> pd.DataFrame:
    """
    Mean worst case per scheme and how much the reference scheme saves
    relative to it: (other - reference) / other * 100.
    """
    df = rows_frame([r for r in rows if r.ok])
    means = df.groupby('scheme', sort=False)['worst_case'].mean()
    ref = means.get(reference)
    deltas = []
    for scheme, mean in means.items():
        if ref is None or mean == 0:
            deltas.append(float('nan'))
        else:
            deltas.append((mean - ref) / mean * 100.0)
    return pd.DataFrame({
        'scheme': list(means.index),
        'mean_worst_case': [float(m) for m in means.values],
        f'{reference.lower()}_saving_pct': deltas,
    })


def report(rows: Sequence[BenchRow], out_dir: Optional[str] = None, excel: bool = False,
           config: Optional[AppConfig] = None) -> BenchReport:
    """
    Summary tables of a bench run.

    Raises:
        ValueError: No successful rows
    """
    ok = [r for r in rows if r.ok]
    if not ok:
        raise ValueError("Bench report needs at least one successful row")

    frame = rows_frame(ok)
    depth = frame[TABLE_COLUMNS].copy()
    memory = frame[['ruleset', 'scheme', 'bytes_a', 'bytes_b']].copy()
    memory['bytes_total'] = memory['bytes_a'] + memory['bytes_b']
    memory['log10_bytes'] = [round(math.log10(b), 6) if b > 0 else 0.0 for b in memory['bytes_total']]
    deltas = delta_table(ok)

    lines = ["Tree depth (worst case = deeper tree)", depth.to_string(index=False), "",
             "Memory (bytes)", memory.to_string(index=False), "",
             "Mean worst case by scheme", deltas.to_string(index=False)]
    for _, d in deltas.iterrows():
        if d['scheme'] != 'SD' and not pd.isna(d['sd_saving_pct']):
            lines.append(f"SD is {d['sd_saving_pct']:.1f}% faster than {d['scheme']}")
    text = '\n'.join(lines) + '\n'

    if out_dir:
        echo = (config or AppConfig()).echo_lines()
        write_csv_with_echo(os.path.join(out_dir, 'bench_depth.csv'), depth, echo)
        write_csv_with_echo(os.path.join(out_dir, 'bench_bytes.csv'), memory, echo)
        write_csv_with_echo(os.path.join(out_dir, 'bench_deltas.csv'), deltas, echo)
        write_text_atomic(os.path.join(out_dir, 'bench_report.txt'), text)
        if excel:
            export_excel(os.path.join(out_dir, 'bench_report.xlsx'),
                         {'depth': depth, 'bytes': memory, 'deltas': deltas})
    return BenchReport(depth, memory, deltas, text)


def export_excel(path: str, sheets: Dict[str, pd.DataFrame]) -> str:
    with pd.ExcelWriter(path, engine='openpyxl') as writer:
        for name, df in sheets.items():
            df.to_excel(writer, sheet_name=name, index=False)
    logger.info(f"Saved Excel report: {path}")
    return path
