"""Run configuration: a flat TOML file mapped onto typed defaults.

Unknown keys are rejected so typos fail loudly. Integers are accepted for
float fields; nothing else is coerced. budget <= 1.0 is a fraction of the
dense parameter count, larger values are an absolute count. min_depth = 0
means automatic: ceil(n_layers / 2). workers = 0 means all logical cores;
search results do not depend on the worker count.
"""

import dataclasses
import math
import os
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .evaluation import RecoveryConfig, TrainConfig
from .model import ModelConfig
from .search import SearchConfig


@dataclasses.dataclass
class RunConfig:
    # model
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    n_kv_heads: int = 2
    d_head: int = 32
    d_ff: int = 256
    vocab_size: int = 256
    context_length: int = 128
    rounding_multiple: int = 4
    init_seed: int = 0
    # corpus
    corpus_path: str = ""
    corpus_seed: int = 0
    corpus_size: int = 1048576
    # base training
    train_steps: int = 3000
    train_batch: int = 8
    train_lr: float = 0.2
    train_momentum: float = 0.9
    train_seed: int = 1
    log_every: int = 200
    # proxy
    adapter_rank: int = 4
    adapter_seed: int = 7
    calib_sequences: int = 16
    calib_length: int = 128
    # search
    population_size: int = 30
    elites: int = 10
    crossover_rate: float = 0.7
    mutation_rate_depth: float = 0.2
    mutation_rate_width: float = 0.2
    iterations: int = 50
    budget: float = 0.6
    min_depth: int = 0
    kappa_min: float = 0.05
    jitter_sigma: float = 0.1
    search_seed: int = 0
    workers: int = 0
    init_mode: str = "importance"
    # evaluation
    heldout_sequences: int = 16
    recovery_steps: int = 0
    recovery_lr: float = 0.1
    recovery_batch: int = 4
    recovery_seed: int = 3
    # proxy validation
    pool_size: int = 24
    pool_seed: int = 11

    def __post_init__(self):
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            tname = field.type if isinstance(field.type, str) else field.type.__name__
            if tname == "float" and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
                setattr(self, field.name, value)
            expected = {"int": int, "float": float, "str": str}[tname]
            if not isinstance(value, expected) or isinstance(value, bool):
                raise ConfigError(
                    f"{field.name} must be {expected.__name__}, got {value!r}")
        if self.budget <= 0:
            raise ConfigError(f"budget must be positive, got {self.budget}")
        if self.min_depth < 0:
            raise ConfigError(f"min_depth must be >= 0, got {self.min_depth}")
        if self.corpus_size < 256:
            raise ConfigError(f"corpus_size must be >= 256, got {self.corpus_size}")
        if not 2 <= self.calib_length <= self.context_length + 1:
            raise ConfigError(
                f"calib_length must be in [2, context_length + 1], got {self.calib_length}")
        for name in ("calib_sequences", "heldout_sequences", "pool_size",
                     "train_steps", "train_batch", "recovery_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.recovery_steps < 0:
            raise ConfigError(f"recovery_steps must be >= 0, got {self.recovery_steps}")
        if self.workers < 0:
            raise ConfigError(f"workers must be >= 0, got {self.workers}")

    def model_config(self):
        return ModelConfig(self.n_layers, self.d_model, self.n_heads,
                           self.n_kv_heads, self.d_head, self.d_ff,
                           self.vocab_size, self.context_length,
                           self.rounding_multiple)

    def train_config(self):
        return TrainConfig(steps=self.train_steps, batch_size=self.train_batch,
                           lr=self.train_lr, momentum=self.train_momentum,
                           seed=self.train_seed, log_every=self.log_every)

    def recovery_config(self):
        return RecoveryConfig(steps=self.recovery_steps, lr=self.recovery_lr,
                              momentum=self.train_momentum,
                              batch_size=self.recovery_batch,
                              seed=self.recovery_seed)

    def resolve_budget(self, dense_params):
        if self.budget <= 1.0:
            return int(self.budget * dense_params)
        return int(self.budget)

    def resolve_min_depth(self, n_layers):
        if self.min_depth == 0:
            return math.ceil(n_layers / 2)
        return self.min_depth

    def resolve_workers(self):
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)

    def search_config(self, dense_params, n_layers):
        return SearchConfig(
            budget=self.resolve_budget(dense_params),
            population_size=self.population_size,
            elites=self.elites,
            crossover_rate=self.crossover_rate,
            mutation_rate_depth=self.mutation_rate_depth,
            mutation_rate_width=self.mutation_rate_width,
            iterations=self.iterations,
            min_depth=self.resolve_min_depth(n_layers),
            kappa_min=self.kappa_min,
            jitter_sigma=self.jitter_sigma,
            seed=self.search_seed,
            workers=self.resolve_workers(),
            init_mode=self.init_mode,
        )


_FIELD_NAMES = {f.name for f in dataclasses.fields(RunConfig)}


def run_config_from_dict(data):
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"config must be flat, got table {key!r}")
    unknown = sorted(set(data) - _FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**data)


def load_run_config(path=None, overrides=None):
    """Build a RunConfig from an optional TOML file plus override pairs."""
    data = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: invalid TOML: {exc}") from None
    if overrides:
        data.update(overrides)
    return run_config_from_dict(data)


def default_config_toml():
    """Template TOML listing every key at its default."""
    lines = ["# prunesearch run configuration (all keys optional)"]
    for field in dataclasses.fields(RunConfig):
        value = getattr(RunConfig(), field.name)
        if isinstance(value, str):
            rendered = f'"{value}"'
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append(f"{field.name} = {rendered}")
    return "\n".join(lines) + "\n"
