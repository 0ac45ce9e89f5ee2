# classifier.py
"""
Band-of-trees classification engine.

One decision tree per field subset of a decomposition plan. A packet walks
both trees; the candidate lists are intersected, the residual fields are
checked, and the highest-priority survivor wins.

Usage:
    from classifier import build_engine, classify
    engine = build_engine(rules, plan_for('SD', rules))
    classify(engine, packet).rule_id
"""

import glob
import json
import logging
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import AppConfig, require_keys, write_text_atomic
from learner import CheckpointError, greedy_build, load_checkpoint, train_subset
from metrics import DecompositionPlan
from rl_env import EnvConfig, TreeBuildEnv
from ruleset import FIELD_NAMES, Packet, Ruleset, format_ruleset, parse_ruleset, project
from tree import DecisionTree, baseline_build, create_root, tree_from_dict, tree_to_dict, walk_tree

logger = logging.getLogger(__name__)

ENGINE_FORMAT = 'treeband-engine'
ENGINE_VERSION = 1
ENGINE_KEYS = ('plan', 'tree_a', 'tree_b', 'ruleset')

TreeBuilder = Callable[[Ruleset, str], DecisionTree]


@dataclass
class Engine:
    plan: DecompositionPlan
    tree_a: DecisionTree
    tree_b: DecisionTree
    ruleset: Ruleset
    builder: str = 'baseline'

    @property
    def residual(self) -> Tuple[int, ...]:
        return self.plan.residual

    def validate(self) -> None:
        if self.tree_a.subset != self.plan.subset_a or self.tree_b.subset != self.plan.subset_b:
            raise ValueError("Engine trees do not match the plan subsets")
        known = set(self.ruleset.by_id)
        for tree in (self.tree_a, self.tree_b):
            for leaf in tree.leaves():
                unknown = set(leaf.rule_refs or ()) - known
                if unknown:
                    raise ValueError(f"Leaf {leaf.id} refers to unknown rules {sorted(unknown)[:5]}")


@dataclass
class MatchResult:
    rule_id: Optional[int]
    action: Optional[str]
    candidates_a: int
    candidates_b: int
    accesses_a: int
    accesses_b: int

    @property
    def matched(self) -> bool:
        return self.rule_id is not None


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def _baseline_builder(config: AppConfig) -> TreeBuilder:
    def build(projected: Ruleset, label: str) -> DecisionTree:
        tree = create_root(projected, config.leaf_threshold, config.partition_depth_mode)
        return baseline_build(tree, config.train.max_tree_depth, config.space_factor)
    return build


def _training_builder(config: AppConfig, out_dir: Optional[str]) -> TreeBuilder:
    def build(projected: Ruleset, label: str) -> DecisionTree:
        return train_subset(projected, config, out_dir, label=label).best_tree
    return build


def find_checkpoint(path: str, subset_names: Sequence[str], label: str) -> str:
    """A checkpoint file as given, or the one in a directory trained for this subset."""
    if os.path.isfile(path):
        return path
    if not os.path.isdir(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    preferred = os.path.join(path, f'policy_{label}.npz')
    candidates = ([preferred] if os.path.isfile(preferred) else []) + sorted(glob.glob(os.path.join(path, '*.npz')))
    for candidate in candidates:
        _, meta = load_checkpoint(candidate)
        if list(meta.get('subset', [])) == list(subset_names):
            return candidate
    raise FileNotFoundError(f"No checkpoint in {path} was trained for subset {','.join(subset_names)}")


def _checkpoint_builder(config: AppConfig, path: str) -> TreeBuilder:
    def build(projected: Ruleset, label: str) -> DecisionTree:
        names = [FIELD_NAMES[f] for f in projected.fields]
        checkpoint = find_checkpoint(path, names, label)
        net, meta = load_checkpoint(checkpoint)
        env = TreeBuildEnv(projected, EnvConfig.from_app(config))
        if net.input_size != env.observation_size or net.num_dims != env.num_dims:
            raise CheckpointError(f"{checkpoint} was trained for subset {meta.get('subset')}, "
                                  f"not {','.join(names)}")
        logger.info(f"Greedy build of subset {label} from {checkpoint}")
        return greedy_build(net, env)
    return build


def make_builder(builder: str, config: Optional[AppConfig] = None, out_dir: Optional[str] = None) -> TreeBuilder:
    """
    Tree builder from its name.

    Args:
        builder: 'baseline', 'policy' (train now) or 'policy:<checkpoint file or dir>'
        config: Effective config
        out_dir: Where 'policy' writes its training artifacts
    """
    config = config or AppConfig()
    if builder == 'baseline':
        return _baseline_builder(config)
    if builder == 'policy':
        return _training_builder(config, out_dir)
    if builder.startswith('policy:') and builder[len('policy:'):]:
        return _checkpoint_builder(config, builder[len('policy:'):])
    raise ValueError(f"Unknown builder {builder!r}; use baseline, policy or policy:<path>")


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

def build_engine(ruleset: Ruleset, plan: DecompositionPlan, builder: str = 'baseline',
                 config: Optional[AppConfig] = None, out_dir: Optional[str] = None) -> Engine:
    """Project the ruleset onto both plan subsets and build one tree for each."""
    plan.validate()
    build = make_builder(builder, config, out_dir)
    tree_a = build(project(ruleset, plan.subset_a), 'a')
    tree_b = build(project(ruleset, plan.subset_b), 'b')
    engine = Engine(plan, tree_a, tree_b, ruleset, builder)
    logger.info(f"Engine built ({builder}) for {len(ruleset)} rules: "
                f"depth A={tree_a.stats.depth} B={tree_b.stats.depth}")
    return engine


def intersect_by_priority(a: List[int], b: List[int], priority_of: Callable[[int], int]) -> List[int]:
    """Merge-intersection of two id lists already sorted by priority."""
    out = []
    i = j = 0
    while i < len(a) and j < len(b):
        pa, pb = priority_of(a[i]), priority_of(b[j])
        if pa == pb:
            out.append(a[i])
            i += 1
            j += 1
        elif pa < pb:
            i += 1
        else:
            j += 1
    return out


def classify(engine: Engine, packet: Packet) -> MatchResult:
    """Walk both trees, intersect, verify residual fields, take the best priority."""
    candidates_a, accesses_a = walk_tree(engine.tree_a, packet)
    candidates_b, accesses_b = walk_tree(engine.tree_b, packet)
    by_id = engine.ruleset.by_id

    for rule_id in intersect_by_priority(candidates_a, candidates_b, lambda r: by_id[r].priority):
        rule = by_id[rule_id]
        if _residual_ok(engine, rule, packet):
            return MatchResult(rule_id, rule.action, len(candidates_a), len(candidates_b),
                               accesses_a, accesses_b)
    return MatchResult(None, None, len(candidates_a), len(candidates_b), accesses_a, accesses_b)


def _residual_ok(engine: Engine, rule, packet: Packet) -> bool:
    positions = [engine.ruleset.fields.index(f) for f in engine.residual]
    return all(rule.matchers[p].contains(packet.values[f]) for p, f in zip(positions, engine.residual))


def worst_case_accesses(engine: Engine) -> int:
    """Deeper of the two trees: both are walked in parallel."""
    return max(engine.tree_a.stats.depth, engine.tree_b.stats.depth)


def engine_memory(engine: Engine) -> Tuple[int, float]:
    """(bytes of both trees, bytes per rule of the full ruleset)."""
    total = engine.tree_a.stats.bytes_total + engine.tree_b.stats.bytes_total
    per_rule = total / len(engine.ruleset) if len(engine.ruleset) else 0.0
    return total, per_rule


def classify_trace(engine: Engine, trace: Sequence[Tuple[Packet, Optional[int]]]) -> Tuple[pd.DataFrame, Optional[float]]:
    """
    Classify every packet of a trace.

    Returns:
        (per-packet frame: packet, rule_id, action, accesses_a, accesses_b
         [, expected, agree], agreement rate or None when nothing is labeled)
    """
    results = [classify(engine, packet) for packet, _ in trace]
    df = pd.DataFrame({
        'packet': np.arange(len(trace)),
        'rule_id': pd.array([r.rule_id for r in results], dtype='Int64'),
        'action': [r.action for r in results],
        'accesses_a': [r.accesses_a for r in results],
        'accesses_b': [r.accesses_b for r in results],
    })
    labeled = any(expected is not None for _, expected in trace)
    if not labeled:
        return df, None
    df['expected'] = pd.array([e for _, e in trace], dtype='Int64')
    df['agree'] = [r.rule_id == e for r, (_, e) in zip(results, trace)]
    return df, float(df['agree'].mean()) if len(df) else 1.0


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def engine_to_dict(engine: Engine) -> Dict:
    return {
        'format': ENGINE_FORMAT,
        'version': ENGINE_VERSION,
        'builder': engine.builder,
        'plan': engine.plan.to_dict(),
        'ruleset': format_ruleset(engine.ruleset),
        'source': engine.ruleset.source,
        'tree_a': tree_to_dict(engine.tree_a),
        'tree_b': tree_to_dict(engine.tree_b),
    }


def save_engine(path: str, engine: Engine) -> str:
    path = write_text_atomic(path, json.dumps(engine_to_dict(engine)) + '\n')
    logger.info(f"Saved engine to {path}")
    return path


def load_engine(path: str) -> Engine:
    with open(path, 'r') as f:
        data = json.load(f)
    if not isinstance(data, dict) or data.get('format') != ENGINE_FORMAT:
        raise ValueError(f"{path} is not an engine dump")
    if data.get('version') != ENGINE_VERSION:
        raise ValueError(f"{path}: unsupported engine version {data.get('version')}")
    try:
        require_keys(data, ENGINE_KEYS, 'engine dump')
        engine = Engine(
            plan=DecompositionPlan.from_dict(data['plan']),
            tree_a=tree_from_dict(data['tree_a']),
            tree_b=tree_from_dict(data['tree_b']),
            ruleset=parse_ruleset(data['ruleset'], 'native', data.get('source', path)),
            builder=data.get('builder', 'baseline'),
        )
    except ValueError as e:
        raise ValueError(f"{path}: {e}") from e
    engine.validate()
    return engine
