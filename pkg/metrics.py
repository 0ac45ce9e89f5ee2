# metrics.py
"""
Field statistics and ruleset decomposition.

Computes per-field SD, variance and Diversity Index (DI) over max-normalized
field values, ranks the fields, and splits them into two subsets:
odd ranks -> subset A, even ranks -> subset B. Fields left out of the ranking
(vlan_priority, ip_tos) become residual fields that the classifier verifies
after aggregation.
"""

import json
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import require_keys, write_text_atomic
from ruleset import (ALL_FIELDS, FIELD_NAMES, FIELD_SPECS, RANKABLE_FIELDS,
                     Ruleset, field_indices)

logger = logging.getLogger(__name__)

SCHEMES = ('SD', 'DI', 'Variance', 'Random1', 'Random2', 'custom')
RANKED_SCHEMES = ('SD', 'DI', 'Variance')
PLAN_KEYS = ('scheme', 'subset_a', 'subset_b', 'residual')

# Fixed cross-ruleset groupings (best and worst of the random search).
FIXED_SUBSETS = {
    'Random1': (('nw_src', 'nw_dst', 'tp_src', 'tp_dst', 'ip_proto'),
                ('dl_src', 'dl_dst', 'in_port', 'vlan_id', 'eth_type')),
    'Random2': (('nw_src', 'dl_dst', 'tp_dst', 'in_port', 'ip_proto'),
                ('dl_src', 'nw_dst', 'tp_src', 'vlan_id', 'eth_type')),
}


def parse_scheme(text: str) -> str:
    """Case-insensitive scheme lookup ('sd' -> 'SD', 'random1' -> 'Random1')."""
    lookup = {s.lower(): s for s in SCHEMES}
    key = text.strip().lower()
    if key not in lookup:
        raise ValueError(f"Unknown decomposition scheme {text!r}; choose from {', '.join(SCHEMES)}")
    return lookup[key]


@dataclass(frozen=True)
class FieldValueSeries:
    """Representative value per rule for one field."""
    field_index: int
    values: Tuple[int, ...]
    width: int

    def __post_init__(self):
        limit = (1 << self.width) - 1
        for v in self.values:
            if not 0 <= v <= limit:
                raise ValueError(f"Series value {v} exceeds {self.width}-bit field")


@dataclass
class FieldStats:
    field_index: int
    sd: float
    variance: float
    di: float

    @property
    def name(self) -> str:
        return FIELD_NAMES[self.field_index]

    def metric(self, metric: str) -> float:
        metric = parse_scheme(metric)
        if metric == 'SD':
            return self.sd
        if metric == 'DI':
            return self.di
        if metric == 'Variance':
            return self.variance
        raise ValueError(f"{metric} is not a ranking metric")


@dataclass
class DecompositionPlan:
    """Two field subsets plus residual fields, and the ranking that produced them."""
    scheme: str
    ranking: List[Tuple[int, int]]  # (field index, rank)
    subset_a: Tuple[int, ...]
    subset_b: Tuple[int, ...]
    residual: Tuple[int, ...]

    def __post_init__(self):
        self.subset_a = tuple(sorted(self.subset_a))
        self.subset_b = tuple(sorted(self.subset_b))
        self.residual = tuple(sorted(self.residual))
        self.validate()

    def validate(self) -> None:
        a, b, r = set(self.subset_a), set(self.subset_b), set(self.residual)
        if a & b or a & r or b & r:
            raise ValueError(f"Plan subsets overlap: {self.describe()}")
        if a | b | r != set(ALL_FIELDS):
            raise ValueError(f"Plan does not cover all fields: {self.describe()}")
        if not a or not b:
            raise ValueError("Both plan subsets must be nonempty")

    def describe(self) -> str:
        names = lambda fs: ','.join(FIELD_NAMES[f] for f in fs)
        return f"{self.scheme}: A={{{names(self.subset_a)}}} B={{{names(self.subset_b)}}} residual={{{names(self.residual)}}}"

    def to_dict(self) -> Dict:
        return {
            'scheme': self.scheme,
            'ranking': [{'field': FIELD_NAMES[f], 'rank': r} for f, r in self.ranking],
            'subset_a': [FIELD_NAMES[f] for f in self.subset_a],
            'subset_b': [FIELD_NAMES[f] for f in self.subset_b],
            'residual': [FIELD_NAMES[f] for f in self.residual],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'DecompositionPlan':
        require_keys(data, PLAN_KEYS, 'decomposition plan')
        ranking = [require_keys(item, ('field', 'rank'), 'plan ranking entry') for item in data.get('ranking', [])]
        return cls(
            scheme=data['scheme'],
            ranking=[(field_indices([item['field']])[0], int(item['rank'])) for item in ranking],
            subset_a=field_indices(data['subset_a']),
            subset_b=field_indices(data['subset_b']),
            residual=field_indices(data['residual']),
        )


# ---------------------------------------------------------------------------
# Series and statistics
# ---------------------------------------------------------------------------

def field_series(ruleset: Ruleset, field_index: int, wildcard_policy: str = 'exclude') -> FieldValueSeries:
    """
    Representative value per rule: matcher.lo.

    wildcard_policy: 'exclude' drops full-range rows, 'zero' maps them to 0,
    'lo' keeps every row's lo as is.
    """
    if field_index not in ruleset.fields:
        raise ValueError(f"Field {FIELD_NAMES[field_index]} not in ruleset")
    col = ruleset.fields.index(field_index)
    width = FIELD_SPECS[field_index].width
    lo = ruleset.lo[:, col]
    hi = ruleset.hi[:, col]
    wild = (lo == 0) & (hi == (1 << width) - 1)

    if wildcard_policy == 'exclude':
        values = lo[~wild]
    elif wildcard_policy == 'zero':
        values = np.where(wild, 0, lo)
    elif wildcard_policy == 'lo':
        values = lo
    else:
        raise ValueError(f"Unknown wildcard policy: {wildcard_policy}")
    return FieldValueSeries(field_index, tuple(int(v) for v in values), width)


def _as_array(series: Union[FieldValueSeries, Sequence[float]]) -> np.ndarray:
    values = series.values if isinstance(series, FieldValueSeries) else series
    return np.asarray(values, dtype=np.float64)


def normalize(series: Union[FieldValueSeries, Sequence[float]]) -> np.ndarray:
    """x' = x / max(x); all zeros if the maximum is 0."""
    values = _as_array(series)
    if values.size == 0:
        return values
    top = values.max()
    if top <= 0:
        return np.zeros_like(values)
    return values / top


def variance(normalized: Sequence[float]) -> float:
    """Sample variance (N-1 denominator); 0 for fewer than 2 values or constants."""
    values = np.asarray(normalized, dtype=np.float64)
    if values.size < 2 or np.all(values == values[0]):
        return 0.0
    return float(np.var(values, ddof=1))


def standard_deviation(normalized: Sequence[float]) -> float:
    """Sample standard deviation (N-1 denominator)."""
    return float(np.sqrt(variance(normalized)))


def diversity_index(series: Union[FieldValueSeries, Sequence[int]]) -> float:
    """
    Normalized value range times the sum of 1/occurrences over distinct values.

    Duplicates are found on the raw integers, so equality is exact even for
    48-bit fields. The range is computed as (max - min) / max on the raw values.
    """
    raw = series.values if isinstance(series, FieldValueSeries) else tuple(series)
    if len(raw) < 2:
        return 0.0
    top, bottom = max(raw), min(raw)
    if top <= 0 or top == bottom:
        return 0.0
    _, counts = np.unique(np.asarray(raw, dtype=np.int64), return_counts=True)
    summation = float(np.sum(1.0 / counts))
    return (top - bottom) * summation / top


def compute_field_stats(ruleset: Ruleset, wildcard_policy: str = 'exclude',
                        fields: Iterable[int] = RANKABLE_FIELDS) -> List[FieldStats]:
    """SD, variance and DI for each requested field."""
    stats = []
    for f in fields:
        series = field_series(ruleset, f, wildcard_policy)
        if len(series.values) < 2:
            logger.debug(f"{FIELD_NAMES[f]}: {len(series.values)} usable values, stats are 0")
            stats.append(FieldStats(f, 0.0, 0.0, 0.0))
            continue
        norm = normalize(series)
        var = variance(norm)
        stats.append(FieldStats(f, float(np.sqrt(var)), var, diversity_index(series)))
    logger.info(f"Computed stats for {len(stats)} fields (wildcard_policy={wildcard_policy})")
    return stats


# ---------------------------------------------------------------------------
# Ranking and decomposition
# ---------------------------------------------------------------------------

def rank_fields(stats: Sequence[FieldStats], metric: str) -> List[Tuple[int, int]]:
    """
    Rank fields by descending metric value; ties go to FieldSpec order.

    Returns:
        [(field index, rank)] in rank order, ranks starting at 1
    """
    ordered = sorted(stats, key=lambda s: (-s.metric(metric), s.field_index))
    return [(s.field_index, rank) for rank, s in enumerate(ordered, 1)]


def decompose(ranking: Sequence[Tuple[int, int]], scheme: str = 'custom') -> DecompositionPlan:
    """Odd ranks -> subset A, even ranks -> subset B, unranked fields -> residual."""
    subset_a = tuple(f for f, rank in ranking if rank % 2 == 1)
    subset_b = tuple(f for f, rank in ranking if rank % 2 == 0)
    ranked = {f for f, _ in ranking}
    residual = tuple(f for f in ALL_FIELDS if f not in ranked)
    plan = DecompositionPlan(scheme, list(ranking), subset_a, subset_b, residual)
    logger.info(f"Decomposition {plan.describe()}")
    return plan


def fixed_decomposition(scheme: str) -> DecompositionPlan:
    scheme = parse_scheme(scheme)
    if scheme not in FIXED_SUBSETS:
        raise ValueError(f"{scheme} is not a fixed decomposition")
    names_a, names_b = FIXED_SUBSETS[scheme]
    a, b = field_indices(names_a), field_indices(names_b)
    residual = tuple(f for f in ALL_FIELDS if f not in a and f not in b)
    return DecompositionPlan(scheme, [], a, b, residual)


def custom_decomposition(subset_a: Iterable, subset_b: Iterable) -> DecompositionPlan:
    a, b = field_indices(subset_a), field_indices(subset_b)
    residual = tuple(f for f in ALL_FIELDS if f not in a and f not in b)
    return DecompositionPlan('custom', [], a, b, residual)


def plan_for(scheme: str, ruleset: Optional[Ruleset] = None,
             stats: Optional[Sequence[FieldStats]] = None,
             wildcard_policy: str = 'exclude') -> DecompositionPlan:
    """Build the plan of a named scheme from a ruleset or precomputed stats."""
    scheme = parse_scheme(scheme)
    if scheme in FIXED_SUBSETS:
        return fixed_decomposition(scheme)
    if scheme not in RANKED_SCHEMES:
        raise ValueError(f"Scheme {scheme} needs explicit subsets")
    if stats is None:
        if ruleset is None:
            raise ValueError(f"Scheme {scheme} needs a ruleset or field stats")
        stats = compute_field_stats(ruleset, wildcard_policy)
    return decompose(rank_fields(stats, scheme), scheme)


def stats_table(stats: Sequence[FieldStats]) -> pd.DataFrame:
    """The inspect table: field, sd, variance, di, rank_sd, rank_di."""
    rank_sd = dict(rank_fields(stats, 'SD'))
    rank_di = dict(rank_fields(stats, 'DI'))
    return pd.DataFrame([{
        'field': s.name,
        'sd': s.sd,
        'variance': s.variance,
        'di': s.di,
        'rank_sd': rank_sd[s.field_index],
        'rank_di': rank_di[s.field_index],
    } for s in stats])


def stats_from_table(df: pd.DataFrame) -> List[FieldStats]:
    """
    FieldStats from a table of precomputed values (columns: field, and any of
    sd / variance / di). A missing variance is derived as sd squared.
    """
    if 'field' not in df.columns:
        raise ValueError("Stats table needs a 'field' column")
    stats = []
    for _, row in df.iterrows():
        sd = float(row['sd']) if 'sd' in df.columns and not pd.isna(row['sd']) else 0.0
        if 'variance' in df.columns and not pd.isna(row['variance']):
            var = float(row['variance'])
        else:
            var = sd * sd
        di = float(row['di']) if 'di' in df.columns and not pd.isna(row['di']) else 0.0
        stats.append(FieldStats(field_indices([str(row['field']).strip()])[0], sd, var, di))
    return stats


def load_stats(path: str) -> List[FieldStats]:
    return stats_from_table(pd.read_csv(path, comment='#'))


def save_plan(path: str, plan: DecompositionPlan) -> str:
    return write_text_atomic(path, json.dumps(plan.to_dict(), indent=2) + '\n')


def load_plan(path: str) -> DecompositionPlan:
    with open(path, 'r') as f:
        data = json.load(f)
    try:
        return DecompositionPlan.from_dict(data)
    except ValueError as e:
        raise ValueError(f"{path}: {e}") from e
