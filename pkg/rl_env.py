# rl_env.py
"""
Episodic tree-building environment.

One episode builds one decision tree over a projected ruleset. Open nodes are
handled first-in first-out; each step applies one action (dimension + cut or
partition) to the node at the head of the queue. Rewards are only known once
the whole tree is finished, so they are assigned in compute_rewards().
"""

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config import (AppConfig, COUNT_PRUNED_CHILDREN, LEAF_THRESHOLD, MAX_TREE_DEPTH,
                    PARTITION_DEPTH_LIMIT, PARTITION_DEPTH_MODE, PARTITION_THETA,
                    REWARD_MODE, TIME_SPACE_C, write_csv_with_echo)
from ruleset import Ruleset
from tree import (CUT_COUNTS, OPEN, DecisionTree, TreeError, TreeNode, create_root,
                  cut_node, force_leaf, partition_node, partition_sides,
                  subtree_depth, subtree_size)

logger = logging.getLogger(__name__)

OPS = ('cut2', 'cut4', 'cut8', 'cut16', 'cut32', 'partition')
NUM_OPS = len(OPS)
PARTITION_OP = 5
INVALID_ACTION_REWARD = -1.0


@dataclass(frozen=True)
class ActionSpec:
    dim: int
    op: int

    @property
    def is_partition(self) -> bool:
        return self.op == PARTITION_OP

    @property
    def k(self) -> Optional[int]:
        return None if self.is_partition else CUT_COUNTS[self.op]

    @property
    def op_name(self) -> str:
        return OPS[self.op]


@dataclass
class EnvConfig:
    """Knobs of one environment instance."""
    leaf_threshold: int = LEAF_THRESHOLD
    max_tree_depth: int = MAX_TREE_DEPTH
    max_steps: int = 1000
    partition_theta: float = PARTITION_THETA
    partition_depth_limit: int = PARTITION_DEPTH_LIMIT
    partition_depth_mode: str = PARTITION_DEPTH_MODE
    reward_mode: str = REWARD_MODE
    c: float = TIME_SPACE_C
    discount: float = 1.0
    count_pruned_children: bool = COUNT_PRUNED_CHILDREN

    @classmethod
    def from_app(cls, config: AppConfig) -> 'EnvConfig':
        return cls(
            leaf_threshold=config.leaf_threshold,
            max_tree_depth=config.train.max_tree_depth,
            max_steps=config.train.max_timesteps_per_rollout,
            partition_theta=config.partition_theta,
            partition_depth_limit=config.partition_depth_limit,
            partition_depth_mode=config.partition_depth_mode,
            reward_mode=config.reward_mode,
            c=config.c,
            discount=config.train.discount,
            count_pruned_children=config.count_pruned_children,
        )


@dataclass
class Transition:
    node_id: int
    observation: np.ndarray
    action: ActionSpec
    valid: bool = True
    children: Tuple[int, ...] = ()
    pruned: int = 0
    reward: Optional[float] = None
    value_target: Optional[float] = None
    # filled by the learner at collection time
    logp: float = 0.0
    value: float = 0.0


@dataclass
class EpisodeRecord:
    transitions: List[Transition]
    tree: DecisionTree
    objective: float
    steps: int
    invalid_actions: int = 0
    seed: Optional[int] = None


# ---------------------------------------------------------------------------
# Observation encoding
# ---------------------------------------------------------------------------

def _bits(value: int, width: int) -> np.ndarray:
    shifts = np.arange(width - 1, -1, -1, dtype=np.int64)
    return ((np.int64(value) >> shifts) & 1).astype(np.float64)


def observation_size(widths: Tuple[int, ...]) -> int:
    return sum(2 * w for w in widths) + 2 + len(widths) * NUM_OPS


def mask_from_observation(observation: np.ndarray, num_dims: int) -> np.ndarray:
    """Recover the |dims| x 6 boolean mask from the tail of an observation (or a batch of them)."""
    tail = np.asarray(observation)[..., -num_dims * NUM_OPS:]
    return tail.reshape(tail.shape[:-1] + (num_dims, NUM_OPS)) > 0.5


class TreeBuildEnv:
    """
    Builds one tree per episode over a projected ruleset.

    Usage:
        env = TreeBuildEnv(project(rules, plan.subset_a), EnvConfig())
        obs = env.reset()
        while not env.done:
            env.step(env.sample_legal_action(rng))
        record = env.record()
    """

    def __init__(self, projected: Ruleset, config: Optional[EnvConfig] = None):
        self.ruleset = projected
        self.config = config or EnvConfig()
        self.widths = projected.widths
        self.num_dims = len(projected.fields)
        self.tree: Optional[DecisionTree] = None
        self._queue: deque = deque()
        self._transitions: List[Transition] = []
        self._masks: Dict[int, np.ndarray] = {}
        self._steps = 0
        self._invalid = 0

    @property
    def observation_size(self) -> int:
        return observation_size(self.widths)

    @property
    def done(self) -> bool:
        return not self._queue

    @property
    def steps(self) -> int:
        return self._steps

    @property
    def current_node(self) -> Optional[TreeNode]:
        return self.tree.nodes[self._queue[0]] if self._queue else None

    @property
    def transitions(self) -> List[Transition]:
        return self._transitions

    def reset(self) -> np.ndarray:
        """Fresh tree with only the root; returns the root observation."""
        self.tree = create_root(self.ruleset, self.config.leaf_threshold, self.config.partition_depth_mode)
        self._queue = deque([self.tree.root_id] if self.tree.root.kind == OPEN else [])
        self._transitions = []
        self._masks = {}
        self._steps = 0
        self._invalid = 0
        self._settle()
        return self.observation(self.tree.root)

    # -- node views -----------------------------------------------------

    def action_mask(self, node: TreeNode, depth: Optional[int] = None) -> np.ndarray:
        """
        Legal actions at a node: cut x k needs k <= range cardinality on that
        dimension; partition needs depth <= partition_depth_limit and a
        nonempty rule set on both sides of theta.
        """
        depth = node.depth if depth is None else depth
        cached = self._masks.get(node.id)
        if cached is not None and depth == node.depth:
            return cached

        mask = np.zeros((self.num_dims, NUM_OPS), dtype=bool)
        if node.kind == OPEN:
            for dim in range(self.num_dims):
                cardinality = node.range.cardinality(dim)
                mask[dim, :PARTITION_OP] = [k <= cardinality for k in CUT_COUNTS]
            if depth <= self.config.partition_depth_limit:
                for dim in range(self.num_dims):
                    big, small = partition_sides(self.tree, node, dim, self.config.partition_theta)
                    mask[dim, PARTITION_OP] = big.size > 0 and small.size > 0
        if depth == node.depth:
            self._masks[node.id] = mask
        return mask

    def observation(self, node: TreeNode) -> np.ndarray:
        parts = []
        for dim, width in enumerate(self.widths):
            parts.append(_bits(node.range.lo[dim], width))
            parts.append(_bits(node.range.hi[dim], width))
        parts.append(np.array([float(node.in_partition), float(node.side == 'big')]))
        parts.append(self.action_mask(node).astype(np.float64).ravel())
        return np.concatenate(parts)

    def current_observation(self) -> Optional[np.ndarray]:
        node = self.current_node
        return None if node is None else self.observation(node)

    def sample_legal_action(self, rng: np.random.Generator) -> ActionSpec:
        """Uniform choice among unmasked actions of the current node."""
        legal = np.argwhere(self.action_mask(self.current_node))
        dim, op = legal[int(rng.integers(0, len(legal)))]
        return ActionSpec(int(dim), int(op))

    # -- stepping -------------------------------------------------------

    def step(self, action: ActionSpec) -> Tuple[List[np.ndarray], bool]:
        """
        Apply an action to the node at the head of the queue.

        Returns:
            (observations of the newly queued nodes, done flag)
        """
        if self.done:
            raise RuntimeError("Episode is done; call reset()")

        node = self.current_node
        transition = Transition(node.id, self.observation(node), action)
        mask = self.action_mask(node)
        legal = 0 <= action.dim < self.num_dims and 0 <= action.op < NUM_OPS and mask[action.dim, action.op]

        queued: List[int] = []
        if not legal:
            force_leaf(self.tree, node.id)
            transition.valid = False
            transition.reward = INVALID_ACTION_REWARD
            self._invalid += 1
            logger.debug(f"invalid action {action} at node {node.id}, forced leaf")
        elif action.is_partition:
            transition.children = partition_node(self.tree, node.id, action.dim, self.config.partition_theta)
        else:
            transition.children = tuple(cut_node(self.tree, node.id, action.dim, action.k))
            transition.pruned = action.k - len(transition.children)

        self._masks.pop(node.id, None)
        self._transitions.append(transition)
        self._steps += 1
        self._queue.popleft()
        for child_id in transition.children:
            if self.tree.nodes[child_id].kind == OPEN:
                self._queue.append(child_id)
                queued.append(child_id)

        self._settle()
        observations = [self.observation(self.tree.nodes[c]) for c in queued
                        if self.tree.nodes[c].kind == OPEN]
        return observations, self.done

    def _settle(self) -> None:
        """Close queue-head nodes that cannot take an action; enforce budgets."""
        if self._steps >= self.config.max_steps and self._queue:
            logger.debug(f"step budget {self.config.max_steps} exhausted, "
                         f"{len(self._queue)} nodes become overflow leaves")
            while self._queue:
                force_leaf(self.tree, self._queue.popleft())
            return
        while self._queue:
            node = self.tree.nodes[self._queue[0]]
            if node.depth >= self.config.max_tree_depth or not self.action_mask(node).any():
                force_leaf(self.tree, node.id)
                self._queue.popleft()
                continue
            break

    def record(self) -> EpisodeRecord:
        """Finish the episode bookkeeping: assign rewards, score the tree."""
        if not self.done:
            raise RuntimeError("Episode still has open nodes")
        compute_rewards(self.tree, self._transitions, self.config.c, self.config.reward_mode,
                        discount=self.config.discount,
                        count_pruned_children=self.config.count_pruned_children)
        return EpisodeRecord(
            transitions=self._transitions,
            tree=self.tree,
            objective=objective(self.tree, self.config.c),
            steps=self._steps,
            invalid_actions=self._invalid,
        )


# ---------------------------------------------------------------------------
# Rewards
# ---------------------------------------------------------------------------

def objective(tree: DecisionTree, c: float) -> float:
    """-(c * depth + (1 - c) * node_count); larger is better."""
    stats = tree.stats
    return -(c * stats.depth + (1.0 - c) * stats.node_count)


def compute_rewards(tree: DecisionTree, transitions: List[Transition], c: float = TIME_SPACE_C,
                    mode: str = REWARD_MODE, discount: float = 1.0,
                    count_pruned_children: bool = COUNT_PRUNED_CHILDREN) -> List[float]:
    """
    Assign each transition its reward once the tree is complete.

    per_child: minus the number of children the action created (pruned
    children only when count_pruned_children is set).
    objective_backprop: minus c * subtree depth + (1 - c) * subtree size of
    the acted-on node.

    Invalid actions keep their immediate -1.
    """
    if not tree.is_complete():
        raise TreeError("Rewards need a complete tree")
    if mode not in ('per_child', 'objective_backprop'):
        raise ValueError(f"Unknown reward mode: {mode}")

    rewards = []
    for t in transitions:
        if not t.valid:
            t.reward = INVALID_ACTION_REWARD
        elif mode == 'per_child':
            created = len(t.children) + (t.pruned if count_pruned_children else 0)
            t.reward = -float(created)
        else:
            depth = subtree_depth(tree, t.node_id, discount=discount)
            size = subtree_size(tree, t.node_id)
            t.reward = -(c * depth + (1.0 - c) * size)
        t.value_target = t.reward
        rewards.append(t.reward)
    return rewards


def rollout(env: TreeBuildEnv, choose: Callable[[np.ndarray, np.ndarray], ActionSpec]) -> EpisodeRecord:
    """
    Run one full episode.

    Args:
        env: Environment (reset here)
        choose: Maps (observation, mask) of the current node to an action

    Returns:
        EpisodeRecord with rewards assigned
    """
    env.reset()
    while not env.done:
        node = env.current_node
        env.step(choose(env.observation(node), env.action_mask(node)))
    return env.record()


def episode_trace_frame(record: EpisodeRecord) -> pd.DataFrame:
    return pd.DataFrame({
        'node_id': [t.node_id for t in record.transitions],
        'dim': [t.action.dim for t in record.transitions],
        'op': [t.action.op_name for t in record.transitions],
        'reward': [t.reward for t in record.transitions],
        'valid': [t.valid for t in record.transitions],
    })


def save_episode_trace(path: str, record: EpisodeRecord, echo: Optional[List[str]] = None) -> str:
    """Debug dump: one row per transition in step order."""
    return write_csv_with_echo(path, episode_trace_frame(record), echo or [])
