"""Experiment configuration: one structured file, explicit seeds everywhere."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

# seed-stream tags so every random purpose gets an independent generator
STREAM_CITY = 1
STREAM_MATRIX = 2
STREAM_TRAIN_DAY = 10
STREAM_TEST_DAY = 11
STREAM_NET_INIT = 20
STREAM_EXPLORE = 21
STREAM_REPLAY = 22
STREAM_DDQN_INIT = 30
STREAM_DDQN_EPS = 31
STREAM_DDQN_REPLAY = 32


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (seed, purpose, ...) tuples."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


@dataclass
class ExperimentConfig:
    """Every knob of a dispatching experiment; see README for the key reference."""

    seed: int = 0

    # city / travel times
    n_locations: int = 36
    spread_km: float = 6.0
    cluster_count: int = 3
    speed_kmh: float = 20.0
    noise_fraction: float = 0.10

    # horizon
    delta_minutes: float = 5.0
    horizon_minutes: float = 1440.0

    # fleet and orders
    n_couriers: int = 6
    queue_max: int = 3
    delay_max: float = 10.0
    shift_length: float = 360.0
    daily_orders: float = 330.0
    arrival_sigma: float = 1.0

    # dataset sizes
    n_train_days: int = 12
    n_test_days: int = 20

    # value-function training
    train_episodes: int = 60
    gamma: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 32
    replay_capacity: int = 10_000
    priority_alpha: float = 0.6
    is_beta_start: float = 0.4
    is_beta_end: float = 1.0
    priority_eps: float = 1e-3
    sigma_start: float = 0.1
    sigma_decay_frac: float = 0.6
    target_sync_every: int = 200
    update_every_epochs: int = 1
    min_replay: int = 200
    avg_tau: float = 0.0  # >0: checkpoint the EMA of parameters instead of the last iterate

    # value-network architecture
    d_embed: int = 8
    lstm_hidden: int = 32
    head_sizes: tuple[int, ...] = (64, 32)

    # DDQN baseline
    ddqn_episodes: int = 30
    ddqn_gamma: float = 0.99
    ddqn_lr: float = 1e-3
    ddqn_hidden: tuple[int, ...] = (32, 64, 64, 32)
    ddqn_eps_start: float = 1.0
    ddqn_eps_end: float = 0.05
    ddqn_eps_frac: float = 0.5
    ddqn_batch_size: int = 32
    ddqn_replay_capacity: int = 20_000
    ddqn_sync_every: int = 200

    @property
    def n_epochs(self) -> int:
        return int(round(self.horizon_minutes / self.delta_minutes))

    def validate(self) -> None:
        if self.speed_kmh <= 0:
            raise ValueError("speed_kmh must be positive")
        if self.queue_max < 1:
            raise ValueError("queue_max must be >= 1")
        if self.n_couriers < 0:
            raise ValueError("n_couriers must be >= 0")
        if self.delta_minutes <= 0 or self.horizon_minutes <= 0:
            raise ValueError("delta_minutes and horizon_minutes must be positive")
        if self.shift_length > self.horizon_minutes:
            raise ValueError("shift_length cannot exceed the horizon")
        if not (0.0 <= self.noise_fraction <= 1.0):
            raise ValueError("noise_fraction must be in [0, 1]")

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            raw = json.load(fh)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(raw)
        for key in ("head_sizes", "ddqn_hidden"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def replaced(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)
