# ruleset.py
"""
Ruleset module - 12-field OpenFlow rulesets, packets and the linear-scan oracle.

Every match syntax (prefix, range, exact, wildcard) is canonicalized to a closed
integer interval [lo, hi] per field. A Ruleset also caches its intervals as
numpy matrices so the oracle and the tree builders can work vectorized.

Usage:
    from ruleset import load_ruleset, oracle_classify, Packet
    rules = load_ruleset('table1.rules')
    oracle_classify(rules, Packet.from_dict({'tp_dst': 22, ...}))
"""

import ipaddress
import logging
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import write_csv_with_echo, write_text_atomic

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FieldSpec:
    """One packet-header field: name, bit width, match syntax, position."""
    name: str
    width: int
    match_kind: str  # 'prefix', 'range' or 'exact'
    index: int

    @property
    def max_value(self) -> int:
        return (1 << self.width) - 1


FIELD_SPECS: Tuple[FieldSpec, ...] = tuple(
    FieldSpec(name, width, kind, i) for i, (name, width, kind) in enumerate([
        ('nw_src', 32, 'prefix'),
        ('nw_dst', 32, 'prefix'),
        ('tp_src', 16, 'range'),
        ('tp_dst', 16, 'range'),
        ('ip_proto', 8, 'exact'),
        ('dl_src', 48, 'exact'),
        ('dl_dst', 48, 'exact'),
        ('in_port', 32, 'exact'),
        ('vlan_id', 12, 'exact'),
        ('eth_type', 16, 'exact'),
        ('vlan_priority', 3, 'exact'),
        ('ip_tos', 6, 'exact'),
    ])
)

NUM_FIELDS = len(FIELD_SPECS)
ALL_FIELDS: Tuple[int, ...] = tuple(range(NUM_FIELDS))
FIELD_NAMES: Tuple[str, ...] = tuple(spec.name for spec in FIELD_SPECS)
FIELD_INDEX: Dict[str, int] = {spec.name: spec.index for spec in FIELD_SPECS}

# vlan_priority and ip_tos never vary in generated OpenFlow rulesets, so they
# are left out of field ranking and end up as residual fields.
UNRANKED_FIELDS: Tuple[int, ...] = (FIELD_INDEX['vlan_priority'], FIELD_INDEX['ip_tos'])
RANKABLE_FIELDS: Tuple[int, ...] = tuple(i for i in ALL_FIELDS if i not in UNRANKED_FIELDS)

PROTOCOLS = {'TCP': 6, 'UDP': 17}

_MAC_RE = re.compile(r'^[0-9a-fA-F]{1,2}(:[0-9a-fA-F]{1,2}){5}$')
_QUAD_RE = re.compile(r'^\d{1,3}(\.\d{1,3}){3}$')


class RulesetParseError(ValueError):
    """Ruleset text could not be parsed. Carries the 1-based line number."""

    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        prefix = f"line {line_no}: " if line_no is not None else ""
        super().__init__(f"{prefix}{message}")


class PrefixError(ValueError):
    """Prefix length out of range or address with host bits set."""


def field_indices(names: Iterable) -> Tuple[int, ...]:
    """Resolve field names or indices to sorted FieldSpec indices."""
    out = set()
    for item in names:
        if isinstance(item, str):
            if item not in FIELD_INDEX:
                raise ValueError(f"Unknown field: {item}")
            out.add(FIELD_INDEX[item])
        else:
            if not 0 <= int(item) < NUM_FIELDS:
                raise ValueError(f"Field index out of range: {item}")
            out.add(int(item))
    return tuple(sorted(out))


# ---------------------------------------------------------------------------
# Matchers, rules, packets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FieldMatcher:
    """Closed interval [lo, hi] over a field of the given bit width."""
    lo: int
    hi: int
    width: int

    def __post_init__(self):
        if not 0 < self.width <= 48:
            raise ValueError(f"Field width must be in 1..48, got {self.width}")
        if not 0 <= self.lo <= self.hi <= (1 << self.width) - 1:
            raise ValueError(f"Invalid interval [{self.lo}, {self.hi}] for width {self.width}")

    @classmethod
    def wildcard(cls, width: int) -> 'FieldMatcher':
        return cls(0, (1 << width) - 1, width)

    @classmethod
    def exact(cls, value: int, width: int) -> 'FieldMatcher':
        return cls(value, value, width)

    @property
    def is_wildcard(self) -> bool:
        return self.lo == 0 and self.hi == (1 << self.width) - 1

    def contains(self, value: int) -> bool:
        return self.lo <= value <= self.hi


@dataclass(frozen=True)
class Rule:
    """
    A prioritized matcher over the fields of its ruleset.
    Smaller priority value means higher priority.
    """
    id: int
    priority: int
    matchers: Tuple[FieldMatcher, ...]
    action: str


@dataclass(frozen=True)
class Packet:
    """A point in 12-field header space."""
    values: Tuple[int, ...]

    def __post_init__(self):
        if len(self.values) != NUM_FIELDS:
            raise ValueError(f"Packet needs {NUM_FIELDS} values, got {len(self.values)}")
        for spec, value in zip(FIELD_SPECS, self.values):
            if not 0 <= value <= spec.max_value:
                raise ValueError(f"Packet value {value} out of range for {spec.name} ({spec.width} bits)")

    @classmethod
    def from_dict(cls, values: Dict[str, int], default: int = 0) -> 'Packet':
        unknown = set(values) - set(FIELD_INDEX)
        if unknown:
            raise ValueError(f"Unknown packet fields: {sorted(unknown)}")
        return cls(tuple(int(values.get(name, default)) for name in FIELD_NAMES))


@dataclass(frozen=True)
class Ruleset:
    """
    Priority-ordered rules over a set of fields (all 12 unless projected).
    Immutable; numpy views are built lazily and cached.
    """
    rules: Tuple[Rule, ...]
    fields: Tuple[int, ...] = ALL_FIELDS
    source: str = ''

    def __post_init__(self):
        ids = [r.id for r in self.rules]
        priorities = [r.priority for r in self.rules]
        if len(set(ids)) != len(ids):
            raise ValueError("Rule ids must be unique")
        if len(set(priorities)) != len(priorities):
            raise ValueError("Rule priorities must be unique")
        for r in self.rules:
            if len(r.matchers) != len(self.fields):
                raise ValueError(f"Rule {r.id} has {len(r.matchers)} matchers, ruleset has {len(self.fields)} fields")

    def __len__(self) -> int:
        return len(self.rules)

    @cached_property
    def lo(self) -> np.ndarray:
        return np.array([[m.lo for m in r.matchers] for r in self.rules],
                        dtype=np.int64).reshape(len(self.rules), len(self.fields))

    @cached_property
    def hi(self) -> np.ndarray:
        return np.array([[m.hi for m in r.matchers] for r in self.rules],
                        dtype=np.int64).reshape(len(self.rules), len(self.fields))

    @cached_property
    def priorities(self) -> np.ndarray:
        return np.array([r.priority for r in self.rules], dtype=np.int64)

    @cached_property
    def ids(self) -> np.ndarray:
        return np.array([r.id for r in self.rules], dtype=np.int64)

    @cached_property
    def by_id(self) -> Dict[int, Rule]:
        return {r.id: r for r in self.rules}

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(FIELD_SPECS[f].width for f in self.fields)

    @property
    def field_names(self) -> Tuple[str, ...]:
        return tuple(FIELD_NAMES[f] for f in self.fields)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def prefix_to_range(address: int, prefix_len: int, width: int) -> FieldMatcher:
    """
    Canonical interval of a prefix match.

    Args:
        address: Network address as an unsigned integer
        prefix_len: Number of significant leading bits (0..width)
        width: Field width in bits

    Returns:
        FieldMatcher [address, address | host_mask]

    Raises:
        PrefixError: Bad length, or address has bits set below the prefix
    """
    if not 0 <= prefix_len <= width:
        raise PrefixError(f"Prefix length {prefix_len} out of range for width {width}")
    if not 0 <= address <= (1 << width) - 1:
        raise PrefixError(f"Address {address} out of range for width {width}")
    host_mask = (1 << (width - prefix_len)) - 1
    if address & host_mask:
        raise PrefixError(f"Address {address:#x} has host bits set below /{prefix_len}")
    return FieldMatcher(address, address | host_mask, width)


def _parse_int(text: str) -> int:
    if text.lower().startswith('0x'):
        return int(text, 16)
    if not text.isdigit():
        raise ValueError(f"Not an integer: {text!r}")
    return int(text)


def _parse_address(text: str, spec: FieldSpec) -> int:
    if _QUAD_RE.match(text):
        if spec.width != 32:
            raise ValueError(f"Dotted-quad value on {spec.width}-bit field {spec.name}")
        return int(ipaddress.IPv4Address(text))
    return _parse_int(text)


def parse_matcher(token: str, spec: FieldSpec) -> FieldMatcher:
    """
    Canonicalize one field value token.

    Accepts '*', decimal, 0x-hex, 'a-b' ranges, dotted-quad with optional /len,
    colon-hex MAC and the protocol names TCP/UDP.
    """
    token = token.strip()
    width = spec.width

    if token == '*' or token == '':
        return FieldMatcher.wildcard(width)

    if '/' in token:
        addr_text, len_text = token.split('/', 1)
        return prefix_to_range(_parse_address(addr_text, spec), _parse_int(len_text), width)

    if _QUAD_RE.match(token):
        # Bare host address, e.g. "191.28.225.110": /width exact match
        return FieldMatcher.exact(_parse_address(token, spec), width)

    if _MAC_RE.match(token):
        value = int(token.replace(':', ''), 16)
        if width != 48:
            raise ValueError(f"MAC value on {width}-bit field {spec.name}")
        return FieldMatcher.exact(value, width)

    if token.upper() in PROTOCOLS:
        if spec.name != 'ip_proto':
            raise ValueError(f"Protocol name {token} on field {spec.name}")
        return FieldMatcher.exact(PROTOCOLS[token.upper()], width)

    if '-' in token:
        lo_text, hi_text = token.split('-', 1)
        lo, hi = _parse_int(lo_text), _parse_int(hi_text)
        if lo > hi:
            raise ValueError(f"Empty range {token}")
        if not _fits(hi, spec):
            _out_of_range(token, spec)
        return FieldMatcher(lo, hi, width)

    if token.isalpha():
        raise ValueError(f"Unknown name {token!r} for field {spec.name}")

    value = _parse_int(token)
    if not _fits(value, spec):
        _out_of_range(token, spec)
    return FieldMatcher.exact(value, width)


def _fits(value: int, spec: FieldSpec) -> bool:
    return 0 <= value <= spec.max_value


def _out_of_range(token: str, spec: FieldSpec):
    raise ValueError(f"Value {token} out of range for {spec.name} ({spec.width} bits)")


def _parse_native(text: str) -> List[Tuple[Dict[int, FieldMatcher], str]]:
    parsed = []
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue

        matchers: Dict[int, FieldMatcher] = {}
        action = None
        for token in line.split():
            if '=' not in token:
                raise RulesetParseError(f"expected key=value, got {token!r}", line_no)
            key, value = token.split('=', 1)
            if key == 'action':
                if not value:
                    raise RulesetParseError("empty action", line_no)
                action = value
                continue
            if key not in FIELD_INDEX:
                raise RulesetParseError(f"unknown field key {key!r}", line_no)
            index = FIELD_INDEX[key]
            if index in matchers:
                raise RulesetParseError(f"duplicate field key {key!r}", line_no)
            try:
                matchers[index] = parse_matcher(value, FIELD_SPECS[index])
            except ValueError as e:
                raise RulesetParseError(str(e), line_no) from e

        if action is None:
            raise RulesetParseError("missing action", line_no)
        parsed.append((matchers, action))
    return parsed


def _parse_classbench5(text: str) -> List[Tuple[Dict[int, FieldMatcher], str]]:
    parsed = []
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        if not line.startswith('@'):
            raise RulesetParseError("classbench line must start with '@'", line_no)

        tokens = line[1:].replace(':', ' : ').split()
        # src/len dst/len lo : hi lo : hi proto/mask [extra...]
        if len(tokens) < 9 or tokens[3] != ':' or tokens[6] != ':':
            raise RulesetParseError(f"malformed classbench rule: {line!r}", line_no)
        try:
            matchers = {
                FIELD_INDEX['nw_src']: parse_matcher(tokens[0], FIELD_SPECS[FIELD_INDEX['nw_src']]),
                FIELD_INDEX['nw_dst']: parse_matcher(tokens[1], FIELD_SPECS[FIELD_INDEX['nw_dst']]),
                FIELD_INDEX['tp_src']: parse_matcher(f"{tokens[2]}-{tokens[4]}", FIELD_SPECS[FIELD_INDEX['tp_src']]),
                FIELD_INDEX['tp_dst']: parse_matcher(f"{tokens[5]}-{tokens[7]}", FIELD_SPECS[FIELD_INDEX['tp_dst']]),
            }
            proto_text, _, mask_text = tokens[8].partition('/')
            proto, mask = _parse_int(proto_text), _parse_int(mask_text or '0xFF')
            if mask == 0:
                matchers[FIELD_INDEX['ip_proto']] = FieldMatcher.wildcard(8)
            elif mask == 0xFF:
                matchers[FIELD_INDEX['ip_proto']] = FieldMatcher.exact(proto, 8)
            else:
                raise ValueError(f"unsupported protocol mask {mask_text}")
        except ValueError as e:
            raise RulesetParseError(str(e), line_no) from e
        parsed.append((matchers, 'accept'))
    return parsed


def parse_ruleset(text: str, format: str = 'native', source: str = '') -> Ruleset:
    """
    Parse a ruleset document. File order defines priority (first rule highest).

    Args:
        text: Ruleset document
        format: 'native' (key=value tokens) or 'classbench5' (@src dst ports proto)
        source: Provenance note stored on the Ruleset

    Returns:
        Ruleset over all 12 fields; omitted fields are wildcards

    Raises:
        RulesetParseError: Syntax error, out-of-range value or unknown key
    """
    if format == 'native':
        parsed = _parse_native(text)
    elif format == 'classbench5':
        parsed = _parse_classbench5(text)
    else:
        raise ValueError(f"Unknown ruleset format: {format}")

    rules = []
    for k, (matchers, action) in enumerate(parsed):
        full = tuple(matchers.get(i, FieldMatcher.wildcard(FIELD_SPECS[i].width)) for i in ALL_FIELDS)
        rules.append(Rule(id=k, priority=k, matchers=full, action=action))

    logger.info(f"Parsed {len(rules)} rules ({format}) from {source or 'text'}")
    return Ruleset(tuple(rules), ALL_FIELDS, source)


def load_ruleset(path: str, format: str = 'native') -> Ruleset:
    with open(path, 'r') as f:
        return parse_ruleset(f.read(), format, source=path)


def format_matcher(matcher: FieldMatcher, spec: FieldSpec) -> str:
    """Render a canonical interval in the native syntax for its field kind."""
    if matcher.is_wildcard:
        return '*'
    if matcher.lo == matcher.hi:
        return _format_value(matcher.lo, spec)
    size = matcher.hi - matcher.lo + 1
    if spec.match_kind == 'prefix' and size & (size - 1) == 0 and matcher.lo % size == 0:
        prefix_len = spec.width - (size.bit_length() - 1)
        return f"{_format_value(matcher.lo, spec)}/{prefix_len}"
    return f"{matcher.lo}-{matcher.hi}"


def _format_value(value: int, spec: FieldSpec) -> str:
    if spec.match_kind == 'prefix' and spec.width == 32:
        return str(ipaddress.IPv4Address(value))
    if spec.width == 48:
        raw = f"{value:012x}"
        return ':'.join(raw[i:i + 2] for i in range(0, 12, 2))
    if spec.name == 'eth_type':
        return f"0x{value:04x}"
    return str(value)


def format_ruleset(ruleset: Ruleset) -> str:
    """Serialize a full 12-field ruleset to the native format, in priority order."""
    if ruleset.fields != ALL_FIELDS:
        raise ValueError("Only full 12-field rulesets can be serialized")
    lines = []
    for rule in sorted(ruleset.rules, key=lambda r: r.priority):
        tokens = [f"{spec.name}={format_matcher(m, spec)}" for spec, m in zip(FIELD_SPECS, rule.matchers)]
        tokens.append(f"action={rule.action}")
        lines.append(' '.join(tokens))
    return '\n'.join(lines) + ('\n' if lines else '')


def save_ruleset(path: str, ruleset: Ruleset) -> str:
    return write_text_atomic(path, format_ruleset(ruleset))


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

def _values_of(packet) -> Tuple[int, ...]:
    return packet.values if isinstance(packet, Packet) else tuple(packet)


def rule_matches(rule: Rule, packet, fields: Sequence[int] = ALL_FIELDS) -> bool:
    """True iff every matcher of the rule contains the packet's value for its field."""
    values = _values_of(packet)
    return all(m.lo <= values[f] <= m.hi for m, f in zip(rule.matchers, fields))


def oracle_classify(ruleset: Ruleset, packet) -> Optional[int]:
    """
    Ground truth: id of the highest-priority rule matching the packet.
    Linear scan over every rule (vectorized).
    """
    if len(ruleset) == 0:
        return None
    values = np.array([_values_of(packet)[f] for f in ruleset.fields], dtype=np.int64)
    hit = ((ruleset.lo <= values) & (values <= ruleset.hi)).all(axis=1)
    if not hit.any():
        return None
    candidates = np.flatnonzero(hit)
    best = candidates[np.argmin(ruleset.priorities[candidates])]
    return int(ruleset.ids[best])


def project(ruleset: Ruleset, fields: Iterable) -> Ruleset:
    """
    Keep only the matchers of the given fields (FieldSpec order).
    Ids, priorities and actions are unchanged.
    """
    wanted = field_indices(fields)
    if not wanted:
        raise ValueError("project needs at least one field")
    missing = set(wanted) - set(ruleset.fields)
    if missing:
        raise ValueError(f"Fields {sorted(missing)} not present in ruleset")
    positions = [ruleset.fields.index(f) for f in wanted]
    rules = tuple(
        Rule(r.id, r.priority, tuple(r.matchers[p] for p in positions), r.action)
        for r in ruleset.rules
    )
    return Ruleset(rules, wanted, ruleset.source)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SyntheticProfile:
    """Knobs for the synthetic OpenFlow ruleset generator."""
    wildcard_prob: float = 0.35
    field_wildcard_prob: Dict[str, float] = field(default_factory=lambda: {
        'vlan_priority': 1.0,
        'ip_tos': 1.0,
    })
    prefix_lengths: Tuple[int, ...] = (8, 16, 24, 32)
    prefix_weights: Tuple[float, ...] = (0.1, 0.3, 0.3, 0.3)
    port_range_prob: float = 0.4
    address_pool: int = 48
    value_pool: int = 24
    actions: Tuple[str, ...] = ('act0', 'act1', 'act2', 'act3')

    def wildcard_for(self, name: str) -> float:
        return self.field_wildcard_prob.get(name, self.wildcard_prob)


_COMMON_PORTS = (20, 21, 22, 23, 25, 53, 67, 80, 110, 123, 443, 512, 514, 993, 3306, 8080)
_ETH_TYPES = (0x0800, 0x0806, 0x8100, 0x86dd)
_IP_PROTOS = (1, 6, 17)


def generate_synthetic(seed: int, n: int, profile: Optional[SyntheticProfile] = None,
                       name: str = '') -> Ruleset:
    """
    Deterministic synthetic 12-field ruleset.

    Args:
        seed: RNG seed
        n: Number of rules (>= 1)
        profile: Generator knobs (defaults resemble OpenFlow rulesets)
        name: Provenance note

    Returns:
        Ruleset with priorities 0..n-1
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    profile = profile or SyntheticProfile()
    rng = np.random.default_rng(seed)

    pools = {
        'address': rng.integers(0, 1 << 32, size=profile.address_pool, dtype=np.int64),
        'mac': rng.integers(0, 1 << 48, size=profile.value_pool, dtype=np.int64),
        'in_port': rng.integers(1, 65, size=profile.value_pool, dtype=np.int64),
        'vlan_id': rng.integers(1, 4095, size=profile.value_pool, dtype=np.int64),
        'port': np.concatenate([np.array(_COMMON_PORTS, dtype=np.int64),
                                rng.integers(1024, 65536, size=profile.value_pool, dtype=np.int64)]),
    }
    weights = np.array(profile.prefix_weights, dtype=float)
    weights = weights / weights.sum()

    rules = []
    for k in range(n):
        matchers = []
        for spec in FIELD_SPECS:
            if rng.random() < profile.wildcard_for(spec.name):
                matchers.append(FieldMatcher.wildcard(spec.width))
            else:
                matchers.append(_synthetic_matcher(spec, rng, pools, profile, weights))
        action = profile.actions[int(rng.integers(0, len(profile.actions)))]
        rules.append(Rule(k, k, tuple(matchers), action))

    logger.info(f"Generated {n} synthetic rules (seed={seed})")
    return Ruleset(tuple(rules), ALL_FIELDS, name or f"synthetic(seed={seed}, n={n})")


def _synthetic_matcher(spec: FieldSpec, rng, pools, profile: SyntheticProfile, weights) -> FieldMatcher:
    width = spec.width
    if spec.match_kind == 'prefix':
        base = int(rng.choice(pools['address']))
        prefix_len = int(rng.choice(profile.prefix_lengths, p=weights))
        host_mask = (1 << (width - prefix_len)) - 1
        return prefix_to_range(base & ~host_mask & spec.max_value, prefix_len, width)
    if spec.match_kind == 'range':
        if rng.random() < profile.port_range_prob:
            choice = int(rng.integers(0, 3))
            if choice == 0:
                return FieldMatcher(0, 1023, width)
            if choice == 1:
                return FieldMatcher(1024, spec.max_value, width)
            lo = int(rng.integers(0, spec.max_value))
            hi = min(spec.max_value, lo + int(rng.integers(1, 4096)))
            return FieldMatcher(lo, hi, width)
        return FieldMatcher.exact(int(rng.choice(pools['port'])), width)
    if spec.name == 'ip_proto':
        return FieldMatcher.exact(int(rng.choice(_IP_PROTOS)), width)
    if spec.name in ('dl_src', 'dl_dst'):
        return FieldMatcher.exact(int(rng.choice(pools['mac'])), width)
    if spec.name == 'in_port':
        return FieldMatcher.exact(int(rng.choice(pools['in_port'])), width)
    if spec.name == 'vlan_id':
        return FieldMatcher.exact(int(rng.choice(pools['vlan_id'])), width)
    if spec.name == 'eth_type':
        return FieldMatcher.exact(int(rng.choice(_ETH_TYPES)), width)
    return FieldMatcher.exact(int(rng.integers(0, spec.max_value + 1)), width)


def generate_trace(ruleset: Ruleset, seed: int, n: int,
                   uniform_fraction: float = 0.1) -> List[Tuple[Packet, Optional[int]]]:
    """
    Oracle-labeled packets: mostly uniform points inside a random rule's box,
    plus a fraction of uniform points over the whole header space.
    """
    if ruleset.fields != ALL_FIELDS:
        raise ValueError("Traces are generated from full 12-field rulesets")
    rng = np.random.default_rng(seed)
    full_hi = np.array([spec.max_value for spec in FIELD_SPECS], dtype=np.int64)

    trace = []
    for _ in range(n):
        if len(ruleset) == 0 or rng.random() < uniform_fraction:
            lo, hi = np.zeros(NUM_FIELDS, dtype=np.int64), full_hi
        else:
            row = int(rng.integers(0, len(ruleset)))
            lo, hi = ruleset.lo[row], ruleset.hi[row]
        values = tuple(int(rng.integers(l, h, endpoint=True)) for l, h in zip(lo, hi))
        packet = Packet(values)
        trace.append((packet, oracle_classify(ruleset, packet)))

    logger.info(f"Generated trace of {n} packets (seed={seed})")
    return trace


def trace_to_frame(trace: Sequence[Tuple[Packet, Optional[int]]]) -> pd.DataFrame:
    df = pd.DataFrame([p.values for p, _ in trace], columns=list(FIELD_NAMES), dtype='int64')
    df['expected'] = pd.array([e for _, e in trace], dtype='Int64')
    return df


def save_trace(path: str, trace: Sequence[Tuple[Packet, Optional[int]]],
               echo: Optional[List[str]] = None) -> str:
    return write_csv_with_echo(path, trace_to_frame(trace), echo or [])


def load_trace(path: str) -> List[Tuple[Packet, Optional[int]]]:
    """Read a trace CSV (12 value columns, optional 'expected')."""
    df = pd.read_csv(path, comment='#')
    missing = [name for name in FIELD_NAMES if name not in df.columns]
    if missing:
        raise ValueError(f"Trace {path} is missing columns: {missing}")

    values = df[list(FIELD_NAMES)].astype('int64').to_numpy()
    if 'expected' in df.columns:
        expected = [None if pd.isna(e) else int(e) for e in df['expected']]
    else:
        expected = [None] * len(df)
    return [(Packet(tuple(int(v) for v in row)), e) for row, e in zip(values, expected)]
