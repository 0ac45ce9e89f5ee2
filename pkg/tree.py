# tree.py
"""
Decision tree over a field subset.

A tree starts as a root holding every rule of a projected ruleset. Nodes with
more than leaf_threshold rules are "open" until an action splits them:
  - cut_node: split the node range on one dimension into k near-equal parts,
    copying each rule into every part it intersects; empty parts are pruned.
  - partition_node: split the node's rules (not its range) into rules that
    cover at least theta of a dimension and the rest.

Dimensions are positions within the tree's subset (0..d-1), not FieldSpec
indices. Depth of the root is 1.
"""

import json
import logging
from collections import deque
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import BASELINE_SPACE_FACTOR, MAX_TREE_DEPTH, require_keys, write_text_atomic
from ruleset import FIELD_NAMES, FIELD_SPECS, FieldMatcher, Packet, Rule, Ruleset, field_indices

logger = logging.getLogger(__name__)

LEAF = 'leaf'
CUT = 'cut'
PARTITION = 'partition'
OPEN = 'open'  # non-leaf node that has not been split yet

CUT_COUNTS = (2, 4, 8, 16, 32)
TREE_FORMAT = 'treeband-tree'
TREE_VERSION = 1
TREE_KEYS = ('subset', 'rules', 'leaf_threshold', 'partition_depth_mode', 'nodes', 'root')
NODE_KEYS = ('id', 'lo', 'hi', 'depth', 'kind', 'rule_refs', 'dim', 'k', 'theta',
             'children', 'slots', 'overflow', 'in_partition', 'side')

# Memory model (bytes)
NODE_BYTES = 16
REF_BYTES = 4


class TreeError(ValueError):
    """Structural action that cannot be applied."""


class InvalidPartition(TreeError):
    """Partition would leave one side empty."""


@dataclass(frozen=True)
class NodeRange:
    """Closed interval per subset dimension."""
    lo: Tuple[int, ...]
    hi: Tuple[int, ...]

    def cardinality(self, dim: int) -> int:
        return self.hi[dim] - self.lo[dim] + 1

    def with_dim(self, dim: int, lo: int, hi: int) -> 'NodeRange':
        return NodeRange(self.lo[:dim] + (lo,) + self.lo[dim + 1:],
                         self.hi[:dim] + (hi,) + self.hi[dim + 1:])


@dataclass
class TreeNode:
    id: int
    range: NodeRange
    depth: int
    kind: str = LEAF
    rule_refs: Optional[Tuple[int, ...]] = None
    dim: Optional[int] = None
    k: Optional[int] = None
    theta: Optional[float] = None
    children: List[int] = field(default_factory=list)
    slots: List[Optional[int]] = field(default_factory=list)  # cut nodes: child per sub-range, None if pruned
    overflow: bool = False
    in_partition: bool = False
    side: Optional[str] = None  # 'big' / 'small' below the nearest partition node

    @property
    def is_leaf(self) -> bool:
        return self.kind == LEAF

    @property
    def rule_count(self) -> int:
        return len(self.rule_refs) if self.rule_refs is not None else 0


@dataclass
class TreeStats:
    """Size and shape of a finished tree under the fixed memory model."""
    depth: int
    node_count: int
    bytes_total: int
    bytes_per_rule: float
    max_leaf_size: int
    replication_factor: float
    leaf_count: int = 0
    overflow_leaves: int = 0
    distinct_rules: int = 0

    def to_dict(self) -> Dict:
        return asdict(self)

    def get_summary(self) -> str:
        lines = [
            f"Depth: {self.depth}",
            f"Nodes: {self.node_count} ({self.leaf_count} leaves, {self.overflow_leaves} overflow)",
            f"Memory: {self.bytes_total} bytes ({self.bytes_per_rule:.1f} bytes/rule)",
            f"Max leaf: {self.max_leaf_size} rules",
            f"Replication: {self.replication_factor:.2f}x",
        ]
        if self.overflow_leaves:
            lines.append(f"⚠️ {self.overflow_leaves} leaves exceed the threshold")
        return '\n'.join(lines)


class DecisionTree:
    """Node store plus the projected ruleset the nodes refer to."""

    def __init__(self, projected: Ruleset, leaf_threshold: int, partition_depth_mode: str = 'max'):
        if not projected.fields:
            raise TreeError("Tree subset must be nonempty")
        if partition_depth_mode not in ('max', 'sum'):
            raise ValueError(f"partition_depth_mode must be 'max' or 'sum', got {partition_depth_mode}")
        self.ruleset = projected
        self.subset: Tuple[int, ...] = projected.fields
        self.leaf_threshold = leaf_threshold
        self.partition_depth_mode = partition_depth_mode
        self.nodes: Dict[int, TreeNode] = {}
        self.root_id = 0
        self._next_id = 0
        self._row_of = {int(rule_id): row for row, rule_id in enumerate(projected.ids)}
        self._priority_of = {r.id: r.priority for r in projected.rules}
        self._leaf_rows: Dict[int, np.ndarray] = {}
        self._stats: Optional[TreeStats] = None

    @property
    def num_dims(self) -> int:
        return len(self.subset)

    @property
    def widths(self) -> Tuple[int, ...]:
        return self.ruleset.widths

    def node(self, node_id: int) -> TreeNode:
        if node_id not in self.nodes:
            raise TreeError(f"Unknown node id {node_id}")
        return self.nodes[node_id]

    @property
    def root(self) -> TreeNode:
        return self.nodes[self.root_id]

    def rows_of(self, node: TreeNode) -> np.ndarray:
        """Row indices into the projected ruleset for the node's rule refs."""
        refs = node.rule_refs or ()
        return np.fromiter((self._row_of[r] for r in refs), dtype=np.int64, count=len(refs))

    def priority_of(self, rule_id: int) -> int:
        return self._priority_of[rule_id]

    def open_nodes(self) -> List[int]:
        return [n.id for n in self.nodes.values() if n.kind == OPEN]

    def is_complete(self) -> bool:
        return not any(n.kind == OPEN for n in self.nodes.values())

    def _add_node(self, node_range: NodeRange, depth: int, refs: Tuple[int, ...],
                  in_partition: bool, side: Optional[str]) -> TreeNode:
        node = TreeNode(id=self._next_id, range=node_range, depth=depth, rule_refs=refs,
                        in_partition=in_partition, side=side)
        node.kind = LEAF if len(refs) <= self.leaf_threshold else OPEN
        self.nodes[node.id] = node
        self._next_id += 1
        self._stats = None
        return node

    def _refs(self, rows: np.ndarray) -> Tuple[int, ...]:
        return tuple(int(i) for i in self.ruleset.ids[rows])

    @property
    def stats(self) -> TreeStats:
        if self._stats is None:
            self._stats = tree_stats(self)
        return self._stats

    def leaves(self) -> List[TreeNode]:
        return [n for n in self.nodes.values() if n.kind in (LEAF, OPEN)]


# ---------------------------------------------------------------------------
# Construction actions
# ---------------------------------------------------------------------------

def create_root(projected: Ruleset, leaf_threshold: int, partition_depth_mode: str = 'max') -> DecisionTree:
    """Fresh tree whose root holds every rule; the root is a leaf iff it fits the threshold."""
    tree = DecisionTree(projected, leaf_threshold, partition_depth_mode)
    full = NodeRange(tuple(0 for _ in projected.fields),
                     tuple(FIELD_SPECS[f].max_value for f in projected.fields))
    tree._add_node(full, 1, tuple(int(i) for i in projected.ids), False, None)
    return tree


def split_bounds(lo: int, hi: int, k: int) -> List[Tuple[int, int]]:
    """k contiguous sub-ranges; the first (width mod k) get one extra value."""
    width = hi - lo + 1
    q, r = divmod(width, k)
    bounds = []
    start = lo
    for i in range(k):
        size = q + 1 if i < r else q
        bounds.append((start, start + size - 1))
        start += size
    return bounds


def slot_index(lo: int, hi: int, k: int, value: int) -> int:
    """Index of the sub-range of split_bounds(lo, hi, k) containing value."""
    q, r = divmod(hi - lo + 1, k)
    offset = value - lo
    if offset < r * (q + 1):
        return offset // (q + 1)
    return r + (offset - r * (q + 1)) // q


def _require_open(tree: DecisionTree, node_id: int) -> TreeNode:
    node = tree.node(node_id)
    if node.kind != OPEN:
        raise TreeError(f"Node {node_id} is {node.kind}, only open nodes can be split")
    return node


def cut_node(tree: DecisionTree, node_id: int, dim: int, k: int) -> List[int]:
    """
    Cut a node's range on one dimension into k sub-ranges.

    Args:
        tree: Tree being built
        node_id: Open node to cut
        dim: Subset dimension position
        k: Number of sub-ranges (2, 4, 8, 16 or 32)

    Returns:
        Ids of the non-empty children, in range order

    Raises:
        TreeError: Node not open, bad dimension, or k exceeds the range cardinality
    """
    node = _require_open(tree, node_id)
    if not 0 <= dim < tree.num_dims:
        raise TreeError(f"Dimension {dim} out of range for a {tree.num_dims}-dim tree")
    if k not in CUT_COUNTS:
        raise TreeError(f"Cut count must be one of {CUT_COUNTS}, got {k}")
    if k > node.range.cardinality(dim):
        raise TreeError(f"Cannot cut {node.range.cardinality(dim)} values into {k} parts")

    rows = tree.rows_of(node)
    rule_lo = tree.ruleset.lo[rows, dim]
    rule_hi = tree.ruleset.hi[rows, dim]

    slots: List[Optional[int]] = []
    for c_lo, c_hi in split_bounds(node.range.lo[dim], node.range.hi[dim], k):
        hit = rows[(rule_lo <= c_hi) & (rule_hi >= c_lo)]
        if hit.size == 0:
            slots.append(None)
            continue
        child = tree._add_node(node.range.with_dim(dim, c_lo, c_hi), node.depth + 1,
                               tree._refs(hit), node.in_partition, node.side)
        slots.append(child.id)

    node.kind, node.dim, node.k = CUT, dim, k
    node.slots = slots
    node.children = [c for c in slots if c is not None]
    node.rule_refs = None
    logger.debug(f"cut node {node_id} dim={dim} k={k} -> {len(node.children)} children "
                 f"({k - len(node.children)} pruned)")
    return list(node.children)


def coverage(tree: DecisionTree, node: TreeNode, dim: int) -> np.ndarray:
    """Fraction of the node's dim range covered by each of its rules."""
    rows = tree.rows_of(node)
    n_lo, n_hi = node.range.lo[dim], node.range.hi[dim]
    inter_lo = np.maximum(tree.ruleset.lo[rows, dim], n_lo)
    inter_hi = np.minimum(tree.ruleset.hi[rows, dim], n_hi)
    covered = np.maximum(inter_hi - inter_lo + 1, 0).astype(np.float64)
    return covered / float(n_hi - n_lo + 1)


def partition_sides(tree: DecisionTree, node: TreeNode, dim: int, theta: float) -> Tuple[np.ndarray, np.ndarray]:
    rows = tree.rows_of(node)
    big = coverage(tree, node, dim) >= theta
    return rows[big], rows[~big]


def partition_node(tree: DecisionTree, node_id: int, dim: int, theta: float) -> Tuple[int, int]:
    """
    Split a node's rules by coverage of one dimension. Both children keep the
    parent range; no rule is copied to both.

    Returns:
        (big child id, small child id)

    Raises:
        InvalidPartition: One side would be empty (node is left unchanged)
    """
    node = _require_open(tree, node_id)
    if not 0 <= dim < tree.num_dims:
        raise TreeError(f"Dimension {dim} out of range for a {tree.num_dims}-dim tree")

    big_rows, small_rows = partition_sides(tree, node, dim, theta)
    if big_rows.size == 0 or small_rows.size == 0:
        raise InvalidPartition(f"Partition of node {node_id} on dim {dim} at theta={theta} "
                               f"gives {big_rows.size}/{small_rows.size} rules")

    big = tree._add_node(node.range, node.depth + 1, tree._refs(big_rows), True, 'big')
    small = tree._add_node(node.range, node.depth + 1, tree._refs(small_rows), True, 'small')
    node.kind, node.dim, node.theta = PARTITION, dim, theta
    node.children = [big.id, small.id]
    node.rule_refs = None
    logger.debug(f"partition node {node_id} dim={dim} theta={theta} -> "
                 f"{big_rows.size} big / {small_rows.size} small")
    return big.id, small.id


def force_leaf(tree: DecisionTree, node_id: int) -> TreeNode:
    """Close an open node as a leaf; flagged overflow if it exceeds the threshold."""
    node = tree.node(node_id)
    node.kind = LEAF
    node.overflow = node.rule_count > tree.leaf_threshold
    tree._stats = None
    return node


# ---------------------------------------------------------------------------
# Traversal and statistics
# ---------------------------------------------------------------------------

def _subset_values(tree: DecisionTree, packet) -> Tuple[int, ...]:
    values = packet.values if isinstance(packet, Packet) else tuple(packet)
    if len(values) == len(tree.subset) and len(values) != len(FIELD_NAMES):
        return tuple(values)
    return tuple(values[f] for f in tree.subset)


def _leaf_matches(tree: DecisionTree, node: TreeNode, values: np.ndarray) -> List[int]:
    rows = tree._leaf_rows.get(node.id)
    if rows is None:
        rows = tree.rows_of(node)
        tree._leaf_rows[node.id] = rows
    if rows.size == 0:
        return []
    hit = ((tree.ruleset.lo[rows] <= values) & (values <= tree.ruleset.hi[rows])).all(axis=1)
    return [int(i) for i in tree.ruleset.ids[rows[hit]]]


def walk_tree(tree: DecisionTree, packet) -> Tuple[List[int], int]:
    """
    Traverse the tree for one packet.

    Returns:
        (candidate rule ids sorted by priority, nodes accessed under the
         configured partition accounting)
    """
    values = _subset_values(tree, packet)
    array = np.array(values, dtype=np.int64)
    sum_mode = tree.partition_depth_mode == 'sum'

    def visit(node_id: int) -> Tuple[set, int]:
        node = tree.nodes[node_id]
        if node.kind in (LEAF, OPEN):
            return set(_leaf_matches(tree, node, array)), 1
        if node.kind == CUT:
            lo, hi = node.range.lo[node.dim], node.range.hi[node.dim]
            child = node.slots[slot_index(lo, hi, node.k, values[node.dim])]
            if child is None:
                return set(), 1
            found, accesses = visit(child)
            return found, 1 + accesses
        big_found, big_acc = visit(node.children[0])
        small_found, small_acc = visit(node.children[1])
        below = big_acc + small_acc if sum_mode else max(big_acc, small_acc)
        return big_found | small_found, 1 + below

    found, accesses = visit(tree.root_id)
    return sorted(found, key=tree.priority_of), accesses


def classify_tree(tree: DecisionTree, packet) -> List[int]:
    """Candidate rule ids (matching on every subset field), highest priority first."""
    return walk_tree(tree, packet)[0]


def subtree_depth(tree: DecisionTree, node_id: int, mode: Optional[str] = None, discount: float = 1.0) -> float:
    """Nodes on the longest walk below (and including) node_id."""
    mode = mode or tree.partition_depth_mode
    node = tree.nodes[node_id]
    if node.kind in (LEAF, OPEN) or not node.children:
        return 1
    below = [subtree_depth(tree, c, mode, discount) for c in node.children]
    if node.kind == PARTITION and mode == 'sum':
        return 1 + discount * sum(below)
    return 1 + discount * max(below)


def subtree_size(tree: DecisionTree, node_id: int) -> int:
    node = tree.nodes[node_id]
    return 1 + sum(subtree_size(tree, c) for c in node.children)


def node_bytes(node: TreeNode) -> int:
    if node.kind in (LEAF, OPEN):
        return NODE_BYTES + REF_BYTES * node.rule_count
    return NODE_BYTES + REF_BYTES * len(node.children)


def tree_stats(tree: DecisionTree) -> TreeStats:
    """Depth, node count and memory of a tree."""
    leaves = tree.leaves()
    refs = [r for leaf in leaves for r in (leaf.rule_refs or ())]
    distinct = len(set(refs))
    bytes_total = sum(node_bytes(n) for n in tree.nodes.values())
    return TreeStats(
        depth=int(subtree_depth(tree, tree.root_id)),
        node_count=len(tree.nodes),
        bytes_total=bytes_total,
        bytes_per_rule=bytes_total / distinct if distinct else 0.0,
        max_leaf_size=max((leaf.rule_count for leaf in leaves), default=0),
        replication_factor=len(refs) / distinct if distinct else 0.0,
        leaf_count=len(leaves),
        overflow_leaves=sum(1 for leaf in leaves if leaf.overflow),
        distinct_rules=distinct,
    )


# ---------------------------------------------------------------------------
# Baseline builder
# ---------------------------------------------------------------------------

def allowed_cuts(cardinality: int) -> List[int]:
    return [k for k in CUT_COUNTS if k <= cardinality]


def _slots_of(lo: int, hi: int, k: int, values: np.ndarray) -> np.ndarray:
    """Vectorized slot_index."""
    q, r = divmod(hi - lo + 1, k)
    offset = values - lo
    split = r * (q + 1)
    return np.where(offset < split, offset // (q + 1), r + (offset - split) // q)


def cut_refs(tree: DecisionTree, node: TreeNode, rows: np.ndarray, dim: int, k: int) -> int:
    """Total rule references the children of a k-way cut would hold."""
    n_lo, n_hi = node.range.lo[dim], node.range.hi[dim]
    first = _slots_of(n_lo, n_hi, k, np.maximum(tree.ruleset.lo[rows, dim], n_lo))
    last = _slots_of(n_lo, n_hi, k, np.minimum(tree.ruleset.hi[rows, dim], n_hi))
    return int((last - first + 1).sum())


def choose_cut(tree: DecisionTree, node: TreeNode, rows: np.ndarray, dim: int,
               space_factor: float = BASELINE_SPACE_FACTOR) -> int:
    """
    Largest allowed k whose children would hold at most
    space_factor * rules references (plus one per child); 2 if none does.
    """
    allowed = allowed_cuts(node.range.cardinality(dim))
    budget = space_factor * len(rows)
    for k in reversed(allowed):
        if cut_refs(tree, node, rows, dim, k) + k <= budget:
            return k
    return allowed[0]


def _endpoint_score(tree: DecisionTree, node: TreeNode, rows: np.ndarray, dim: int) -> int:
    """Distinct clipped rule endpoints on dim; 0 if every rule spans the node range."""
    n_lo, n_hi = node.range.lo[dim], node.range.hi[dim]
    if n_lo == n_hi:
        return 0
    clipped_lo = np.maximum(tree.ruleset.lo[rows, dim], n_lo)
    clipped_hi = np.minimum(tree.ruleset.hi[rows, dim], n_hi)
    if not ((clipped_lo > n_lo).any() or (clipped_hi < n_hi).any()):
        return 0
    return int(np.unique(np.concatenate([clipped_lo, clipped_hi])).size)


def baseline_build(tree: DecisionTree, max_depth: int = MAX_TREE_DEPTH,
                   space_factor: float = BASELINE_SPACE_FACTOR) -> DecisionTree:
    """
    Deterministic breadth-first builder: cut each open node on the dimension
    with the most distinct rule endpoints (ties -> lowest dimension) into the
    largest allowed power of two whose children stay within
    space_factor * rules references (see choose_cut). Nodes at max_depth, or
    whose rules all span the node range, become overflow leaves.
    """
    queue = deque(sorted(tree.open_nodes()))
    while queue:
        node = tree.nodes[queue.popleft()]
        if node.kind != OPEN:
            continue
        if node.depth >= max_depth:
            force_leaf(tree, node.id)
            logger.debug(f"node {node.id} hit max depth {max_depth} with {node.rule_count} rules")
            continue

        rows = tree.rows_of(node)
        best_dim, best_score = None, 0
        for dim in range(tree.num_dims):
            score = _endpoint_score(tree, node, rows, dim)
            if score > best_score:
                best_dim, best_score = dim, score
        if best_dim is None:
            force_leaf(tree, node.id)
            continue

        k = choose_cut(tree, node, rows, best_dim, space_factor)
        for child_id in cut_node(tree, node.id, best_dim, k):
            if tree.nodes[child_id].kind == OPEN:
                queue.append(child_id)

    stats = tree.stats
    if stats.overflow_leaves:
        logger.warning(f"Baseline tree has {stats.overflow_leaves} overflow leaves")
    logger.info(f"Baseline tree over {','.join(FIELD_NAMES[f] for f in tree.subset)}: "
                f"depth={stats.depth} nodes={stats.node_count} bytes={stats.bytes_total}")
    return tree


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def tree_to_dict(tree: DecisionTree) -> Dict:
    rules = [[r.id, r.priority, [m.lo for m in r.matchers], [m.hi for m in r.matchers], r.action]
             for r in tree.ruleset.rules]
    nodes = []
    for node in sorted(tree.nodes.values(), key=lambda n: n.id):
        nodes.append({
            'id': node.id,
            'kind': node.kind,
            'depth': node.depth,
            'lo': list(node.range.lo),
            'hi': list(node.range.hi),
            'dim': node.dim,
            'k': node.k,
            'theta': node.theta,
            'slots': node.slots,
            'children': node.children,
            'rule_refs': list(node.rule_refs) if node.rule_refs is not None else None,
            'overflow': node.overflow,
            'in_partition': node.in_partition,
            'side': node.side,
        })
    return {
        'format': TREE_FORMAT,
        'version': TREE_VERSION,
        'subset': [FIELD_NAMES[f] for f in tree.subset],
        'leaf_threshold': tree.leaf_threshold,
        'partition_depth_mode': tree.partition_depth_mode,
        'root': tree.root_id,
        'source': tree.ruleset.source,
        'rules': rules,
        'nodes': nodes,
    }


def tree_from_dict(data: Dict) -> DecisionTree:
    if not isinstance(data, dict):
        raise ValueError(f"Not a tree dump (got {type(data).__name__})")
    if data.get('format') != TREE_FORMAT:
        raise ValueError(f"Not a tree dump (format={data.get('format')!r})")
    if data.get('version') != TREE_VERSION:
        raise ValueError(f"Unsupported tree dump version {data.get('version')}")
    require_keys(data, TREE_KEYS, 'tree dump')

    subset = field_indices(data['subset'])
    widths = [FIELD_SPECS[f].width for f in subset]
    rules = tuple(
        Rule(int(rid), int(priority),
             tuple(FieldMatcher(int(l), int(h), w) for l, h, w in zip(lo, hi, widths)), action)
        for rid, priority, lo, hi, action in data['rules']
    )
    tree = DecisionTree(Ruleset(rules, subset, data.get('source', '')),
                        int(data['leaf_threshold']), data['partition_depth_mode'])
    for item in data['nodes']:
        require_keys(item, NODE_KEYS, 'tree node')
        node = TreeNode(
            id=int(item['id']),
            range=NodeRange(tuple(item['lo']), tuple(item['hi'])),
            depth=int(item['depth']),
            kind=item['kind'],
            rule_refs=tuple(item['rule_refs']) if item['rule_refs'] is not None else None,
            dim=item['dim'],
            k=item['k'],
            theta=item['theta'],
            children=list(item['children']),
            slots=list(item['slots']),
            overflow=bool(item['overflow']),
            in_partition=bool(item['in_partition']),
            side=item['side'],
        )
        tree.nodes[node.id] = node
    tree.root_id = int(data['root'])
    tree._next_id = max(tree.nodes) + 1 if tree.nodes else 0
    return tree


def save_tree(path: str, tree: DecisionTree) -> str:
    path = write_text_atomic(path, json.dumps(tree_to_dict(tree)) + '\n')
    logger.info(f"Saved tree ({len(tree.nodes)} nodes) to {path}")
    return path


def load_tree(path: str) -> DecisionTree:
    with open(path, 'r') as f:
        data = json.load(f)
    try:
        return tree_from_dict(data)
    except ValueError as e:
        raise ValueError(f"{path}: {e}") from e
