import numpy as np
import pytest

from dispatchsim.config import ExperimentConfig
from dispatchsim.geo import build_travel_times, generate_city
from dispatchsim.sim import build_shift_plan, default_profile, sample_day


@pytest.fixture(scope="session")
def small_cfg():
    return ExperimentConfig(
        seed=11,
        n_locations=16,
        n_couriers=4,
        daily_orders=110,
        horizon_minutes=720.0,
        min_replay=64,
        train_episodes=4,
    )


@pytest.fixture(scope="session")
def small_city(small_cfg):
    return generate_city(small_cfg.n_locations, small_cfg.spread_km, small_cfg.cluster_count, seed=101)


@pytest.fixture(scope="session")
def small_matrix(small_cfg, small_city):
    return build_travel_times(small_city, small_cfg.speed_kmh, small_cfg.noise_fraction, seed=102)


@pytest.fixture(scope="session")
def small_profile(small_cfg):
    return default_profile(small_cfg.n_epochs, small_cfg.delta_minutes, small_cfg.daily_orders)


@pytest.fixture(scope="session")
def small_plan(small_cfg, small_profile):
    return build_shift_plan(
        small_cfg.n_couriers,
        small_profile,
        small_cfg.horizon_minutes,
        small_cfg.delta_minutes,
        small_cfg.shift_length,
    )


@pytest.fixture(scope="session")
def small_days(small_cfg, small_profile, small_city, small_matrix):
    return [
        sample_day(small_cfg, small_profile, small_city, small_matrix, np.random.default_rng(500 + k))
        for k in range(3)
    ]
