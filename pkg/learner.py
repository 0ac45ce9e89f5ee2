# learner.py
"""
Actor-critic tree-building policy, trained with clipped-surrogate updates.

The network is a small numpy MLP (tanh trunk shared by three heads: dimension
logits, operation logits, value). Forward and backward passes are written out
by hand for this fixed architecture; the optimizer is Adam.

Usage:
    from learner import train
    report = train(rules, plan, 'a', config, out_dir='runs/of1')
    report.best_tree.stats.depth
"""

import json
import logging
import os
import time
import zipfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config import AppConfig, TrainConfig, write_csv_with_echo, write_text_atomic
from metrics import DecompositionPlan
from rl_env import (NUM_OPS, ActionSpec, EnvConfig, EpisodeRecord, Transition, TreeBuildEnv,
                    mask_from_observation, objective, rollout)
from ruleset import FIELD_NAMES, Ruleset, project
from tree import DecisionTree, save_tree

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'treeband-policy'
CHECKPOINT_VERSION = 1
META_KEY = '__meta__'


class NonFiniteLossError(RuntimeError):
    """Loss, gradient or parameters went NaN/Inf during an update."""

    def __init__(self, message: str, diagnostics: Optional[Dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(ValueError):
    """Checkpoint file is unreadable or does not fit the expected network."""


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

def _orthogonal(shape: Tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((rows, cols) if rows >= cols else (cols, rows))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def param_shapes(input_size: int, num_dims: int, hidden_sizes: Tuple[int, ...]) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    prev = input_size
    for i, h in enumerate(hidden_sizes):
        shapes[f'W{i}'] = (prev, h)
        shapes[f'b{i}'] = (h,)
        prev = h
    shapes.update({
        'W_dim': (prev, num_dims), 'b_dim': (num_dims,),
        'W_op': (prev, NUM_OPS), 'b_op': (NUM_OPS,),
        'W_value': (prev, 1), 'b_value': (1,),
    })
    return shapes


@dataclass
class PolicyNet:
    params: Dict[str, np.ndarray]
    input_size: int
    num_dims: int
    hidden_sizes: Tuple[int, ...]

    @classmethod
    def init(cls, input_size: int, num_dims: int, hidden_sizes: Tuple[int, ...] = (512, 512),
             rng: Optional[np.random.Generator] = None) -> 'PolicyNet':
        """Orthogonal trunk, 0.01-scaled policy heads, zero biases."""
        rng = rng if rng is not None else np.random.default_rng(0)
        params = {}
        for name, shape in param_shapes(input_size, num_dims, tuple(hidden_sizes)).items():
            if len(shape) == 1:
                params[name] = np.zeros(shape, dtype=np.float64)
            elif name in ('W_dim', 'W_op'):
                params[name] = _orthogonal(shape, 0.01, rng)
            else:
                params[name] = _orthogonal(shape, 1.0, rng)
        return cls(params, input_size, num_dims, tuple(hidden_sizes))

    def copy(self) -> 'PolicyNet':
        return PolicyNet({k: v.copy() for k, v in self.params.items()},
                         self.input_size, self.num_dims, self.hidden_sizes)

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.params.values())

    @property
    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def _forward(net: PolicyNet, observations: np.ndarray):
    """Trunk activations (input first) and the three head outputs for a batch."""
    p = net.params
    activations = [observations]
    h = observations
    for i in range(len(net.hidden_sizes)):
        h = np.tanh(h @ p[f'W{i}'] + p[f'b{i}'])
        activations.append(h)
    dim_logits = h @ p['W_dim'] + p['b_dim']
    op_logits = h @ p['W_op'] + p['b_op']
    values = (h @ p['W_value'] + p['b_value'])[:, 0]
    return activations, dim_logits, op_logits, values


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Log-probabilities with masked entries at -inf (probability exactly 0)."""
    if not mask.any(axis=-1).all():
        raise ValueError("Every row needs at least one legal entry; caller must force a leaf")
    z = np.where(mask, logits, -np.inf)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class PolicyOutput:
    dim_probs: np.ndarray
    op_probs: np.ndarray
    value: float
    dim_choice: int


def policy_forward(net: PolicyNet, observation: np.ndarray, dim_choice: Optional[int] = None) -> PolicyOutput:
    """
    Distributions over dimensions and operations for one observation.

    The operation distribution is conditioned on a dimension: dim_choice if
    given, otherwise the most likely legal dimension.
    """
    observation = np.asarray(observation, dtype=np.float64)
    if observation.shape != (net.input_size,):
        raise ValueError(f"Observation has shape {observation.shape}, network expects ({net.input_size},)")
    mask = mask_from_observation(observation, net.num_dims)
    _, dim_logits, op_logits, values = _forward(net, observation[None, :])
    dim_logp = masked_log_softmax(dim_logits[0], mask.any(axis=1))
    if dim_choice is None:
        dim_choice = int(np.argmax(dim_logp))
    op_logp = masked_log_softmax(op_logits[0], mask[dim_choice])
    return PolicyOutput(np.exp(dim_logp), np.exp(op_logp), float(values[0]), dim_choice)


def _sample(logp: np.ndarray, rng: np.random.Generator) -> int:
    cumulative = np.cumsum(np.exp(logp))
    index = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side='right'))
    return min(index, len(logp) - 1)


def act(net: PolicyNet, observation: np.ndarray, mask: np.ndarray,
        rng: Optional[np.random.Generator] = None, greedy: bool = False) -> Tuple[ActionSpec, float, float]:
    """
    Pick an action for one node.

    Returns:
        (action, log-probability of the action, value estimate)
    """
    _, dim_logits, op_logits, values = _forward(net, observation[None, :])
    dim_logp = masked_log_softmax(dim_logits[0], mask.any(axis=1))
    dim = int(np.argmax(dim_logp)) if greedy else _sample(dim_logp, rng)
    op_logp = masked_log_softmax(op_logits[0], mask[dim])
    op = int(np.argmax(op_logp)) if greedy else _sample(op_logp, rng)
    return ActionSpec(dim, op), float(dim_logp[dim] + op_logp[op]), float(values[0])


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    observations: np.ndarray
    dims: np.ndarray
    ops: np.ndarray
    old_logp: np.ndarray
    old_values: np.ndarray
    rewards: np.ndarray

    @property
    def size(self) -> int:
        return len(self.dims)

    @classmethod
    def from_transitions(cls, transitions: List[Transition]) -> 'Batch':
        valid = [t for t in transitions if t.valid]
        if not valid:
            raise ValueError("Batch has no valid transitions")
        return cls(
            observations=np.stack([t.observation for t in valid]),
            dims=np.array([t.action.dim for t in valid], dtype=np.int64),
            ops=np.array([t.action.op for t in valid], dtype=np.int64),
            old_logp=np.array([t.logp for t in valid], dtype=np.float64),
            old_values=np.array([t.value for t in valid], dtype=np.float64),
            rewards=np.array([t.reward for t in valid], dtype=np.float64),
        )

    def take(self, index: np.ndarray) -> 'Batch':
        return Batch(self.observations[index], self.dims[index], self.ops[index],
                     self.old_logp[index], self.old_values[index], self.rewards[index])


def batch_logp_and_values(net: PolicyNet, batch: Batch) -> Tuple[np.ndarray, np.ndarray]:
    """Log-probability of each taken action and the value estimate under the current net."""
    rows = np.arange(batch.size)
    _, dim_logits, op_logits, values = _forward(net, batch.observations)
    mask = mask_from_observation(batch.observations, net.num_dims)
    logp_dim = masked_log_softmax(dim_logits, mask.any(axis=2))
    logp_op = masked_log_softmax(op_logits, mask[rows, batch.dims])
    return logp_dim[rows, batch.dims] + logp_op[rows, batch.ops], values


def loss_and_grad(net: PolicyNet, batch: Batch, config: TrainConfig,
                  need_grad: bool = True) -> Tuple[float, Optional[Dict[str, np.ndarray]], Dict[str, float]]:
    """
    Clipped surrogate + clipped value loss - entropy bonus, and its gradient.

    Advantage is reward - old value (each decision is a one-step problem).

    Returns:
        (total loss, gradients by parameter name or None, diagnostics)
    """
    p = net.params
    n = batch.size
    rows = np.arange(n)
    eps = config.clip_param

    activations, dim_logits, op_logits, values = _forward(net, batch.observations)
    mask = mask_from_observation(batch.observations, net.num_dims)
    dim_mask = mask.any(axis=2)
    op_mask = mask[rows, batch.dims]
    logp_dim = masked_log_softmax(dim_logits, dim_mask)
    logp_op = masked_log_softmax(op_logits, op_mask)
    p_dim, p_op = np.exp(logp_dim), np.exp(logp_op)
    safe_dim = np.where(dim_mask, logp_dim, 0.0)
    safe_op = np.where(op_mask, logp_op, 0.0)
    entropy_dim = -(p_dim * safe_dim).sum(axis=1)
    entropy_op = -(p_op * safe_op).sum(axis=1)
    entropy = entropy_dim + entropy_op

    logp = logp_dim[rows, batch.dims] + logp_op[rows, batch.ops]
    advantages = batch.rewards - batch.old_values
    ratio = np.exp(logp - batch.old_logp)
    surr_unclipped = ratio * advantages
    surr_clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantages
    use_unclipped = surr_unclipped <= surr_clipped
    policy_loss = -np.where(use_unclipped, surr_unclipped, surr_clipped).mean()

    returns = batch.rewards
    vf_unclipped = (values - returns) ** 2
    delta = values - batch.old_values
    values_clipped = batch.old_values + np.clip(delta, -config.vf_clip, config.vf_clip)
    vf_clipped = (values_clipped - returns) ** 2
    use_vf_unclipped = vf_unclipped >= vf_clipped
    vf_loss = np.where(use_vf_unclipped, vf_unclipped, vf_clipped).mean()

    total = policy_loss + config.vf_loss_coeff * vf_loss - config.entropy_coeff * entropy.mean()
    info = {
        'total_loss': float(total),
        'policy_loss': float(policy_loss),
        'vf_loss': float(vf_loss),
        'entropy': float(entropy.mean()),
        'kl': float(np.mean(batch.old_logp - logp)),
        'clip_fraction': float(np.mean(np.abs(ratio - 1.0) > eps)),
    }
    if not np.isfinite(total):
        raise NonFiniteLossError(f"Non-finite loss {total}", info)
    if not need_grad:
        return float(total), None, info

    # d(total)/d(logp) through the surrogate; zero where the clipped branch is active
    g_logp = -np.where(use_unclipped, advantages, 0.0) * ratio / n
    onehot_dim = np.zeros_like(p_dim)
    onehot_dim[rows, batch.dims] = 1.0
    onehot_op = np.zeros_like(p_op)
    onehot_op[rows, batch.ops] = 1.0
    beta = config.entropy_coeff / n
    g_dim = g_logp[:, None] * (onehot_dim - p_dim) + beta * p_dim * (safe_dim + entropy_dim[:, None])
    g_op = g_logp[:, None] * (onehot_op - p_op) + beta * p_op * (safe_op + entropy_op[:, None])

    inside_clip = (np.abs(delta) < config.vf_clip).astype(np.float64)
    g_values = (config.vf_loss_coeff / n) * np.where(
        use_vf_unclipped, 2.0 * (values - returns), 2.0 * (values_clipped - returns) * inside_clip)

    h = activations[-1]
    grads = {
        'W_dim': h.T @ g_dim, 'b_dim': g_dim.sum(axis=0),
        'W_op': h.T @ g_op, 'b_op': g_op.sum(axis=0),
        'W_value': h.T @ g_values[:, None], 'b_value': np.array([g_values.sum()]),
    }
    g_h = g_dim @ p['W_dim'].T + g_op @ p['W_op'].T + g_values[:, None] @ p['W_value'].T
    for i in reversed(range(len(net.hidden_sizes))):
        g_z = g_h * (1.0 - activations[i + 1] ** 2)
        grads[f'W{i}'] = activations[i].T @ g_z
        grads[f'b{i}'] = g_z.sum(axis=0)
        g_h = g_z @ p[f'W{i}'].T

    if not all(np.isfinite(g).all() for g in grads.values()):
        raise NonFiniteLossError("Non-finite gradient", info)
    return float(total), grads, info


class Adam:
    """Adam optimizer over a dict of numpy parameters (updated in place)."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


@dataclass
class UpdateStats:
    total_loss: float
    policy_loss: float
    vf_loss: float
    entropy: float
    kl: float
    sgd_iters: int
    early_stopped: bool = False


def update(net: PolicyNet, batch: Batch, config: TrainConfig, optimizer: Adam,
           rng: np.random.Generator) -> UpdateStats:
    """
    Minibatch SGD passes over one batch; stops early once the approximate KL
    to the collecting policy exceeds kl_target.
    """
    minibatch = min(config.minibatch, batch.size)
    early_stopped = False
    iters = 0
    info: Dict[str, float] = {}

    for iters in range(1, config.sgd_iters_per_batch + 1):
        order = rng.permutation(batch.size)
        for start in range(0, batch.size, minibatch):
            _, grads, _ = loss_and_grad(net, batch.take(order[start:start + minibatch]), config)
            optimizer.step(net.params, grads)
        if not net.is_finite():
            raise NonFiniteLossError("Parameters became non-finite after an SGD pass",
                                     {'sgd_iter': iters, 'optimizer_step': optimizer.t})
        _, _, info = loss_and_grad(net, batch, config, need_grad=False)
        logger.debug(f"sgd pass {iters}: loss={info['total_loss']:.5f} kl={info['kl']:.5f}")
        if info['kl'] > config.kl_target:
            early_stopped = True
            logger.warning(f"KL {info['kl']:.4f} > target {config.kl_target} after {iters} SGD passes, stopping batch")
            break

    return UpdateStats(info['total_loss'], info['policy_loss'], info['vf_loss'],
                       info['entropy'], info['kl'], iters, early_stopped)


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

def run_policy_episode(env: TreeBuildEnv, net: PolicyNet, rng: Optional[np.random.Generator] = None,
                       greedy: bool = False) -> EpisodeRecord:
    """One episode driven by the policy; transitions carry logp and value."""
    taken: List[Tuple[float, float]] = []

    def choose(observation: np.ndarray, mask: np.ndarray) -> ActionSpec:
        action, logp, value = act(net, observation, mask, rng, greedy)
        taken.append((logp, value))
        return action

    record = rollout(env, choose)
    for transition, (logp, value) in zip(record.transitions, taken):
        transition.logp, transition.value = logp, value
    return record


def greedy_build(net: PolicyNet, env: TreeBuildEnv) -> DecisionTree:
    """Deterministic rollout taking the argmax of each head."""
    return run_policy_episode(env, net, greedy=True).tree


def _episode_worker(args) -> EpisodeRecord:
    params, input_size, num_dims, hidden_sizes, projected, env_config, entropy = args
    net = PolicyNet(params, input_size, num_dims, hidden_sizes)
    rng = np.random.default_rng(np.random.SeedSequence(list(entropy)))
    record = run_policy_episode(TreeBuildEnv(projected, env_config), net, rng)
    record.seed = entropy[-1]
    return record


def collect_batch(net: PolicyNet, projected: Ruleset, env_config: EnvConfig, config: TrainConfig,
                  iteration: int, max_steps: int, executor: Optional[ProcessPoolExecutor] = None) -> List[EpisodeRecord]:
    """
    Episodes until max_steps timesteps are collected. Episode e of iteration i
    is seeded with (seed, i, e); results are taken in episode order, so the
    batch does not depend on the worker count.
    """
    episodes: List[EpisodeRecord] = []
    steps = 0
    episode = 0
    wave = max(1, config.num_workers)
    while steps < max_steps:
        jobs = [(net.params, net.input_size, net.num_dims, net.hidden_sizes, projected, env_config,
                 (config.seed, iteration, episode + i)) for i in range(wave)]
        results = executor.map(_episode_worker, jobs) if executor else map(_episode_worker, jobs)
        for record in results:
            if steps >= max_steps:
                break
            if record.steps == 0:
                return episodes
            episodes.append(record)
            steps += record.steps
        episode += wave
    return episodes


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    label: str
    subset: Tuple[str, ...]
    seed: int
    iterations: int
    timesteps: int
    best_objective: float
    best_tree: DecisionTree
    net: PolicyNet
    curve: pd.DataFrame = field(default_factory=pd.DataFrame)
    wall_clock: float = 0.0
    stop_reason: str = ''

    @property
    def mean_objectives(self) -> List[float]:
        return [] if self.curve.empty else [float(v) for v in self.curve['mean_objective']]

    def to_dict(self) -> Dict:
        return {
            'label': self.label,
            'subset': list(self.subset),
            'seed': self.seed,
            'iterations': self.iterations,
            'timesteps': self.timesteps,
            'best_objective': self.best_objective,
            'best_depth': self.best_tree.stats.depth,
            'best_node_count': self.best_tree.stats.node_count,
            'mean_objectives': self.mean_objectives,
            'wall_clock': round(self.wall_clock, 3),
            'stop_reason': self.stop_reason,
        }


CURVE_COLUMNS = ['iteration', 'timesteps', 'episodes', 'mean_objective', 'greedy_objective',
                 'best_objective', 'kl', 'entropy', 'policy_loss', 'vf_loss', 'sgd_iters']


def train(ruleset: Ruleset, plan: DecompositionPlan, subset: str = 'a',
          config: Optional[AppConfig] = None, out_dir: Optional[str] = None) -> TrainReport:
    """Train a tree-building policy for subset 'a' or 'b' of the plan."""
    if subset not in ('a', 'b'):
        raise ValueError(f"subset must be 'a' or 'b', got {subset!r}")
    fields = plan.subset_a if subset == 'a' else plan.subset_b
    return train_subset(project(ruleset, fields), config, out_dir, label=subset)


def train_subset(projected: Ruleset, config: Optional[AppConfig] = None,
                 out_dir: Optional[str] = None, label: str = 'a') -> TrainReport:
    """
    Collect -> update -> greedy evaluate, keeping the best tree by objective.

    Stops at max_timesteps_total or after plateau_patience iterations
    without a better tree.
    """
    config = config or AppConfig()
    tc = config.train
    started = time.perf_counter()
    subset_names = tuple(FIELD_NAMES[f] for f in projected.fields)
    env_config = EnvConfig.from_app(config)
    env = TreeBuildEnv(projected, env_config)
    env.reset()

    init_seq, sgd_seq = np.random.SeedSequence(tc.seed).spawn(2)
    net = PolicyNet.init(env.observation_size, env.num_dims, tc.hidden_sizes, np.random.default_rng(init_seq))
    sgd_rng = np.random.default_rng(sgd_seq)
    optimizer = Adam(tc.learning_rate)

    best_tree = env.tree
    best_objective = objective(best_tree, config.c)
    rows: List[Dict] = []
    timesteps = 0
    iteration = 0
    stale = 0
    stop_reason = 'root is a leaf' if env.done else 'timestep budget'

    logger.info(f"Training subset {label} ({','.join(subset_names)}): {len(projected)} rules, "
                f"{net.num_params} parameters, obs size {env.observation_size}")

    if not env.done:
        best_objective = float('-inf')
        executor = ProcessPoolExecutor(max_workers=tc.num_workers) if tc.num_workers > 1 else None
        try:
            while timesteps < tc.max_timesteps_total:
                budget = min(tc.max_timesteps_per_batch, tc.max_timesteps_total - timesteps)
                episodes = collect_batch(net, projected, env_config, tc, iteration, budget, executor)
                steps = sum(e.steps for e in episodes)
                timesteps += steps

                transitions = [t for e in episodes for t in e.transitions]
                stats = update(net, Batch.from_transitions(transitions), tc, optimizer, sgd_rng)

                candidates = [(e.objective, e.tree) for e in episodes]
                greedy_objective = float('nan')
                if iteration % tc.eval_every == 0:
                    greedy_tree = greedy_build(net, TreeBuildEnv(projected, env_config))
                    greedy_objective = objective(greedy_tree, config.c)
                    candidates.append((greedy_objective, greedy_tree))

                improved = False
                for value, candidate in candidates:
                    if value > best_objective:
                        best_objective, best_tree, improved = value, candidate, True
                stale = 0 if improved else stale + 1

                mean_objective = float(np.mean([e.objective for e in episodes]))
                rows.append({
                    'iteration': iteration, 'timesteps': timesteps, 'episodes': len(episodes),
                    'mean_objective': mean_objective, 'greedy_objective': greedy_objective,
                    'best_objective': best_objective, 'kl': stats.kl, 'entropy': stats.entropy,
                    'policy_loss': stats.policy_loss, 'vf_loss': stats.vf_loss, 'sgd_iters': stats.sgd_iters,
                })
                logger.info(f"[{label}] iter {iteration}: {len(episodes)} episodes / {steps} steps, "
                            f"mean={mean_objective:.2f} best={best_objective:.2f} kl={stats.kl:.4f}")
                iteration += 1

                if stale >= tc.plateau_patience:
                    stop_reason = f'plateau ({tc.plateau_patience} iterations)'
                    break
        except NonFiniteLossError as e:
            logger.error(f"Training subset {label} aborted: {e}")
            if out_dir:
                dump = dict(e.diagnostics, iteration=iteration, timesteps=timesteps, label=label)
                write_text_atomic(os.path.join(out_dir, f'nonfinite_{label}.json'), json.dumps(dump, indent=2))
            raise
        finally:
            if executor:
                executor.shutdown()

    report = TrainReport(
        label=label, subset=subset_names, seed=tc.seed, iterations=iteration, timesteps=timesteps,
        best_objective=best_objective, best_tree=best_tree, net=net,
        curve=pd.DataFrame(rows, columns=CURVE_COLUMNS),
        wall_clock=time.perf_counter() - started, stop_reason=stop_reason,
    )
    logger.info(f"Subset {label} done after {iteration} iterations ({stop_reason}): "
                f"best objective {best_objective:.2f}, depth {best_tree.stats.depth}")
    if out_dir:
        save_training_artifacts(report, config, out_dir)
    return report


def save_training_artifacts(report: TrainReport, config: AppConfig, out_dir: str) -> Dict[str, str]:
    label = report.label
    paths = {
        'checkpoint': os.path.join(out_dir, f'policy_{label}.npz'),
        'curve': os.path.join(out_dir, f'curve_{label}.csv'),
        'tree': os.path.join(out_dir, f'best_tree_{label}.json'),
        'report': os.path.join(out_dir, f'report_{label}.json'),
    }
    save_checkpoint(paths['checkpoint'], report.net, report.subset, config.config_hash())
    write_csv_with_echo(paths['curve'], report.curve, config.echo_lines())
    save_tree(paths['tree'], report.best_tree)
    write_text_atomic(paths['report'], json.dumps(report.to_dict(), indent=2) + '\n')
    return paths


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, net: PolicyNet, subset: Tuple[str, ...] = (), config_hash: str = '') -> str:
    """All parameters as little-endian float64 plus a JSON metadata record, written atomically."""
    meta = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'config_hash': config_hash,
        'input_size': net.input_size,
        'num_dims': net.num_dims,
        'hidden_sizes': list(net.hidden_sizes),
        'subset': list(subset),
    }
    arrays = {name: np.ascontiguousarray(value, dtype='<f8') for name, value in net.params.items()}
    arrays[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode('utf-8'), dtype=np.uint8)

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp_file = f"{path}.tmp"
    try:
        with open(tmp_file, 'wb') as f:
            np.savez(f, **arrays)
        os.replace(tmp_file, path)
    finally:
        if os.path.exists(tmp_file):
            os.remove(tmp_file)
    logger.info(f"Saved checkpoint ({net.num_params} parameters) to {path}")
    return path


def load_checkpoint(path: str) -> Tuple[PolicyNet, Dict]:
    """
    Returns:
        (network, metadata)

    Raises:
        CheckpointError: Unreadable file, wrong format/version, or shape mismatch
    """
    try:
        with np.load(path, allow_pickle=False) as data:
            if META_KEY not in data.files:
                raise CheckpointError(f"{path}: no metadata record")
            meta = json.loads(data[META_KEY].astype(np.uint8).tobytes().decode('utf-8'))
            if meta.get('format') != CHECKPOINT_FORMAT or meta.get('version') != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint {meta.get('format')} v{meta.get('version')}")
            shapes = param_shapes(meta['input_size'], meta['num_dims'], tuple(meta['hidden_sizes']))
            params = {}
            for name, shape in shapes.items():
                if name not in data.files:
                    raise CheckpointError(f"{path}: missing parameter {name}")
                if data[name].shape != shape:
                    raise CheckpointError(f"{path}: {name} has shape {data[name].shape}, expected {shape}")
                params[name] = data[name].astype(np.float64)
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: cannot read checkpoint ({e})") from e

    net = PolicyNet(params, meta['input_size'], meta['num_dims'], tuple(meta['hidden_sizes']))
    return net, meta
