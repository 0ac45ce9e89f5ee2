# config.py
"""
TreeBand configuration.
Simple Python config: defaults are plain variables, the dataclasses below just
group them. A run can override them from a key=value file and CLI flags.
"""

import hashlib
import logging
import os
from dataclasses import dataclass, field, fields, asdict
from typing import Any, Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)

VERSION = "1.0.0"

# Tree building
LEAF_THRESHOLD = 16
MAX_TREE_DEPTH = 100            # 100 or 500
BASELINE_SPACE_FACTOR = 4.0     # baseline cut budget: child refs per rule
PARTITION_THETA = 0.5
PARTITION_DEPTH_LIMIT = 1       # partition only at the root level
PARTITION_DEPTH_MODE = 'max'    # 'max' (parallel) or 'sum' (sequential)

# Objective / rewards
TIME_SPACE_C = 1.0
REWARD_MODE = 'per_child'       # or 'objective_backprop'
COUNT_PRUNED_CHILDREN = False

# Field statistics
WILDCARD_POLICY = 'exclude'     # 'exclude', 'zero' or 'lo'

# Runtime
SEED = 0
WORKERS = os.cpu_count() or 1

# Not echoed: results never depend on them
ECHO_EXCLUDE = ('workers', 'train.num_workers')

VALID_CHOICES = {
    'partition_depth_mode': ('max', 'sum'),
    'reward_mode': ('per_child', 'objective_backprop'),
    'wildcard_policy': ('exclude', 'zero', 'lo'),
    'ruleset_format': ('native', 'classbench5'),
}


class ConfigError(ValueError):
    """Bad config key or value."""


@dataclass
class TrainConfig:
    """Learner hyperparameters."""
    learning_rate: float = 5e-5
    discount: float = 1.0
    entropy_coeff: float = 0.01
    clip_param: float = 0.3
    vf_clip: float = 10.0
    vf_loss_coeff: float = 1.0
    kl_target: float = 0.01
    sgd_iters_per_batch: int = 30
    minibatch: int = 1000
    max_timesteps_per_batch: int = 60000
    max_timesteps_total: int = 10_000_000
    max_tree_depth: int = MAX_TREE_DEPTH
    max_timesteps_per_rollout: int = 1000
    hidden_sizes: Tuple[int, ...] = (512, 512)
    plateau_patience: int = 50
    num_workers: int = WORKERS
    eval_every: int = 1
    seed: int = 0

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == 'seed':
                if value < 0:
                    raise ConfigError(f"train.seed must be >= 0, got {value}")
                continue
            if f.name == 'hidden_sizes':
                if not value or any(h <= 0 for h in value):
                    raise ConfigError(f"train.hidden_sizes must be positive, got {value}")
                continue
            if value <= 0:
                raise ConfigError(f"train.{f.name} must be positive, got {value}")


@dataclass
class AppConfig:
    """Effective configuration of one TreeBand run."""
    leaf_threshold: int = LEAF_THRESHOLD
    space_factor: float = BASELINE_SPACE_FACTOR
    c: float = TIME_SPACE_C
    wildcard_policy: str = WILDCARD_POLICY
    partition_theta: float = PARTITION_THETA
    partition_depth_limit: int = PARTITION_DEPTH_LIMIT
    partition_depth_mode: str = PARTITION_DEPTH_MODE
    reward_mode: str = REWARD_MODE
    count_pruned_children: bool = COUNT_PRUNED_CHILDREN
    seed: int = SEED
    workers: int = WORKERS
    ruleset_format: str = 'native'
    out_dir: str = '.'
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> 'AppConfig':
        for key, choices in VALID_CHOICES.items():
            if getattr(self, key) not in choices:
                raise ConfigError(f"{key} must be one of {choices}, got {getattr(self, key)!r}")
        if self.leaf_threshold < 1:
            raise ConfigError(f"leaf_threshold must be >= 1, got {self.leaf_threshold}")
        if self.space_factor <= 0:
            raise ConfigError(f"space_factor must be > 0, got {self.space_factor}")
        if not 0.0 <= self.c <= 1.0:
            raise ConfigError(f"c must be in [0, 1], got {self.c}")
        if not 0.0 <= self.partition_theta <= 1.0:
            raise ConfigError(f"partition_theta must be in [0, 1], got {self.partition_theta}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        self.train.validate()
        return self

    def to_flat_dict(self) -> Dict[str, Any]:
        """Flatten to key=value form, train fields as 'train.<name>'."""
        flat = {k: v for k, v in asdict(self).items() if k != 'train'}
        for k, v in asdict(self.train).items():
            flat[f'train.{k}'] = v
        return flat

    def echo_lines(self) -> List[str]:
        """Provenance block written at the top of every CSV artifact."""
        flat = {k: v for k, v in self.to_flat_dict().items() if k not in ECHO_EXCLUDE}
        flat['version'] = VERSION
        return [f"# {key}={_render(flat[key])}" for key in sorted(flat)]

    def config_hash(self) -> str:
        return hashlib.sha256('\n'.join(self.echo_lines()).encode('utf-8')).hexdigest()


def _render(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return ','.join(str(v) for v in value)
    return str(value)


def _coerce(name: str, raw: str, current: Any) -> Any:
    """Parse raw string into the type of the current default."""
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            lowered = raw.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(float(raw)) if 'e' in raw.lower() else int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(part) for part in raw.split(',') if part.strip())
    except ValueError:
        raise ConfigError(f"Bad value for {name}: {raw!r}")
    return raw


def apply_overrides(config: AppConfig, overrides: Dict[str, str]) -> AppConfig:
    """
    Apply key=value overrides onto a config.

    Args:
        config: Config to update in place
        overrides: Mapping of flat keys ('leaf_threshold', 'train.seed') to raw strings

    Returns:
        The same config, validated

    Raises:
        ConfigError: Unknown key or unparseable value
    """
    app_keys = {f.name for f in fields(AppConfig)} - {'train'}
    train_keys = {f.name for f in fields(TrainConfig)}

    for key, raw in overrides.items():
        if key.startswith('train.') and key[len('train.'):] in train_keys:
            name = key[len('train.'):]
            setattr(config.train, name, _coerce(key, raw, getattr(config.train, name)))
        elif key in app_keys:
            setattr(config, key, _coerce(key, raw, getattr(config, key)))
        else:
            raise ConfigError(f"Unknown config key: {key}")
    return config.validate()


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> AppConfig:
    """
    Load config from a key=value file, then apply overrides (flags win).

    Args:
        path: Optional config file path
        overrides: Optional flat key -> raw string mapping

    Returns:
        Validated AppConfig
    """
    config = AppConfig()
    values: Dict[str, str] = {}

    if path:
        with open(path, 'r') as f:
            for line_no, line in enumerate(f, 1):
                line = line.split('#', 1)[0].strip()
                if not line:
                    continue
                if '=' not in line:
                    raise ConfigError(f"{path}:{line_no}: expected key=value, got {line!r}")
                key, raw = line.split('=', 1)
                values[key.strip()] = raw
        logger.info(f"Loaded {len(values)} config values from {path}")

    values.update(overrides or {})
    if 'seed' in values and 'train.seed' not in values:
        values['train.seed'] = values['seed']  # one seed drives every random stream
    if 'workers' in values and 'train.num_workers' not in values:
        values['train.num_workers'] = values['workers']
    return apply_overrides(config, values)


def require_keys(data: Any, keys: Tuple[str, ...], what: str) -> Dict[str, Any]:
    """Check a decoded JSON object carries every key; ValueError names the missing ones."""
    if not isinstance(data, dict):
        raise ValueError(f"{what}: expected a JSON object, got {type(data).__name__}")
    missing = [key for key in keys if key not in data]
    if missing:
        raise ValueError(f"{what}: missing key {', '.join(repr(k) for k in missing)}")
    return data


def write_text_atomic(path: str, text: str) -> str:
    """Write a file via temp file + os.replace so readers never see half a file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_file = f"{path}.tmp"
    try:
        with open(tmp_file, 'w') as f:
            f.write(text)
        os.replace(tmp_file, path)
    finally:
        if os.path.exists(tmp_file):
            os.remove(tmp_file)
    return path


def write_csv_with_echo(path: str, df, echo: List[str]) -> str:
    """Write a DataFrame as CSV preceded by the config echo block."""
    return write_text_atomic(path, render_csv_with_echo(df, echo))


def render_csv_with_echo(df, echo: List[str]) -> str:
    header = "".join(f"{line}\n" for line in echo)
    return header + df.to_csv(index=False, lineterminator="\n")
