"""Configuration management for MoLRG Lab."""

import os
import yaml
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from .errors import InvalidArgumentError, StorageError
from .schedule import Schedule
from .optim import TrainConfig

DEFAULT_OUT_DIR = "results"


def default_settings() -> Dict[str, Any]:
    """Nested defaults; values follow the standard experiment settings where there is one."""
    return {
        'run': {
            'seed': 0,
            'out_dir': os.environ.get('MOLRG_OUT') or DEFAULT_OUT_DIR,
            'threads': 1,
            'log_level': 'INFO',
            'command': None,
        },
        'inputs': {
            'dataset': None,
            'model': None,
            'params': None,
            'generated': None,
        },
        'model': {
            'n': 48,
            'k': 1,
            'd': 6,
            'orth': True,
            'num': 1000,
            'noise': 0.0,
        },
        'schedule': {
            'kind': 've_linear',
            'sigma_min': 0.0,
            'sigma_max': 1.0,
            'vp_beta_min': 0.1,
            'vp_beta_max': 20.0,
            'lambda': 'unit',
        },
        'train': {
            'param': 'single',
            'learning_rate': None,
            'batch': None,
            'iters': None,
            'time_steps': 64,
            'init_from_truth': None,
            'shared_noise': False,
            'lr_decay': None,
            'decay_every': None,
            'log_every': 100,
        },
        'phase': {
            'method': 'pca',
            'd': '2..8',
            'num': '2..15',
            'trials': 20,
            'restarts': 10,
        },
        'sampler': {
            'steps': 18,
            't_min': 0.001,
            'count': 100,
        },
        'rank': {
            'eta': 0.99,
            'trajectories': 15,
        },
        'sweep': {
            'index': 1,
            't': 0.5,
            'alphas': '-2,-1,0,1,2',
        },
        'glscore': {
            'k': 2,
            'dims': '3,4,5,6',
            'multipliers': '1,2,5,20',
            'seeds': 3,
        },
        'check': {
            'quick': False,
            'trials': 50,
        },
    }


def _optional(value: Any, kind):
    # PyYAML reads exponent floats such as 1e-4 as strings
    if value is None:
        return None
    return kind(float(value))


def flatten(settings: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Nested sections become dotted keys; already-dotted keys pass through."""
    flat = {}
    for key, value in settings.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat


class Config:
    """Load and manage configuration from YAML file.

    Precedence is built-in defaults, then the file, then ``override``.
    """

    def __init__(self, config_path: Optional[str] = "config.yaml"):
        self.config_path = Path(config_path) if config_path else None
        self._config = flatten(default_settings())
        if self.config_path is not None:
            self._merge(self._load_config(), source=str(self.config_path))

    def _create_default_config(self):
        """Create default configuration file."""
        try:
            self.config_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.config_path, 'w') as f:
                yaml.dump(default_settings(), f, default_flow_style=False, sort_keys=False)
        except OSError as e:
            raise StorageError(f"cannot create default config ({e.strerror})", str(self.config_path)) from e

        print(f"✓ Created default config at {self.config_path}")

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from YAML file, create default if missing."""
        if not self.config_path.exists():
            print(f"Config file not found, creating default...")
            self._create_default_config()

        try:
            with open(self.config_path, 'r') as f:
                return yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise StorageError(f"malformed YAML ({e})", str(self.config_path)) from e
        except OSError as e:
            raise StorageError(f"cannot read config ({e.strerror})", str(self.config_path)) from e

    def _merge(self, settings: Mapping[str, Any], source: str):
        if not isinstance(settings, Mapping):
            raise InvalidArgumentError(f"config {source} must be a mapping")
        for key, value in flatten(settings).items():
            if key not in self._config:
                raise InvalidArgumentError(f"unknown config key '{key}' in {source}")
            self._config[key] = value

    def override(self, values: Mapping[str, Any]):
        """Apply command-line values; None means the flag was not given."""
        self._merge({k: v for k, v in values.items() if v is not None}, source="command line")

    def get(self, *keys):
        """Get configuration value by nested keys."""
        return self._config.get('.'.join(keys))

    def as_dict(self) -> Dict[str, Any]:
        return dict(sorted(self._config.items()))

    def dump_resolved(self, path: str) -> Path:
        """Write the flat, key-sorted settings that fully determine a run."""
        target = Path(path)
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            with open(target, 'w', encoding='utf-8') as f:
                yaml.safe_dump(self.as_dict(), f, default_flow_style=False, sort_keys=True)
        except OSError as e:
            raise StorageError(f"cannot write resolved config ({e.strerror})", str(target)) from e
        return target

    # Run settings
    @property
    def seed(self) -> int:
        return int(self.get('run', 'seed'))

    @property
    def out_dir(self) -> str:
        return str(self.get('run', 'out_dir') or DEFAULT_OUT_DIR)

    @property
    def threads(self) -> int:
        return max(1, int(self.get('run', 'threads') or 1))

    @property
    def log_level(self) -> str:
        return self.get('run', 'log_level') or 'INFO'

    @property
    def log_file(self) -> str:
        return str(Path(self.out_dir) / 'molrg.log')

    # Model settings
    @property
    def n(self) -> int:
        return int(self.get('model', 'n'))

    @property
    def K(self) -> int:
        return int(self.get('model', 'k'))

    @property
    def d(self) -> int:
        return int(self.get('model', 'd'))

    @property
    def orth(self) -> bool:
        return bool(self.get('model', 'orth'))

    @property
    def num(self) -> int:
        return int(self.get('model', 'num'))

    @property
    def noise(self) -> float:
        return float(self.get('model', 'noise'))

    # Schedule settings
    @property
    def schedule(self) -> Schedule:
        try:
            return Schedule(kind=self.get('schedule', 'kind'),
                            sigma_min=float(self.get('schedule', 'sigma_min')),
                            sigma_max=float(self.get('schedule', 'sigma_max')),
                            vp_beta_min=float(self.get('schedule', 'vp_beta_min')),
                            vp_beta_max=float(self.get('schedule', 'vp_beta_max')),
                            lambda_kind=self.get('schedule', 'lambda'))
        except ValueError as e:
            raise InvalidArgumentError(f"invalid schedule settings ({e})") from e

    # Training settings
    @property
    def parameterization(self) -> str:
        return self.get('train', 'param') or 'single'

    @property
    def init_from_truth(self) -> Optional[float]:
        value = self.get('train', 'init_from_truth')
        return None if value is None else float(value)

    def train_overrides(self) -> Dict[str, Any]:
        """Training settings that were set; the rest come from TrainConfig.defaults_for."""
        overrides = {
            'learning_rate': _optional(self.get('train', 'learning_rate'), float),
            'batch': _optional(self.get('train', 'batch'), int),
            'iters': _optional(self.get('train', 'iters'), int),
            'lr_decay': _optional(self.get('train', 'lr_decay'), float),
            'decay_every': _optional(self.get('train', 'decay_every'), int),
            'time_steps': int(self.get('train', 'time_steps')),
            'init_perturb': self.init_from_truth,
            'shared_noise': bool(self.get('train', 'shared_noise')),
            'log_every': int(self.get('train', 'log_every')),
        }
        return {key: value for key, value in overrides.items() if value is not None}

    def train_config(self, K: int, samples_per_component: int) -> TrainConfig:
        """Unset learning rate, batch, iterations and decay fall back to the standard values for K."""
        return TrainConfig.defaults_for(K, samples_per_component, seed=self.seed, **self.train_overrides())

    def ensure_directories(self):
        """Create required directories if they don't exist."""
        try:
            Path(self.out_dir).mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StorageError(f"cannot create output directory ({e.strerror})", self.out_dir) from e
