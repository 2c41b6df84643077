import numpy as np
import pytest

from dispatchsim.ceilings import direct_ceiling, fixed_ceiling
from dispatchsim.policies import MyopicPolicy, NeurAdpPolicy
from dispatchsim.sim import DayStream, Order, ShiftPlan, run_episode


class TestDirectCeiling:
    def test_zero_couriers(self, small_cfg, small_matrix, small_days):
        got = direct_ceiling(small_days[0], small_cfg, small_matrix, ShiftPlan([], 360.0))
        assert got.fulfilled == 0

    def test_impossible_deadlines_give_zero(self, small_cfg, small_matrix, small_plan):
        epochs = [[] for _ in range(small_cfg.n_epochs)]
        epochs[40] = [Order(0, 1, 0.0), Order(1, 2, 0.0)]  # deadlines already past
        day = DayStream(epochs)
        got = direct_ceiling(day, small_cfg, small_matrix, small_plan)
        assert got.fulfilled == 0

    def test_dominates_policies_on_paired_streams(self, small_cfg, small_matrix, small_plan, small_days):
        for day in small_days:
            ceiling = direct_ceiling(day, small_cfg, small_matrix, small_plan).fulfilled
            for policy in (NeurAdpPolicy(None), MyopicPolicy("dc"), MyopicPolicy("cf")):
                got = run_episode(policy, day, small_cfg, small_matrix, small_plan)
                assert ceiling >= got.total_fulfilled

    def test_bounded_by_arrivals(self, small_cfg, small_matrix, small_plan, small_days):
        got = direct_ceiling(small_days[0], small_cfg, small_matrix, small_plan)
        assert got.fulfilled <= small_days[0].total
        assert sum(got.per_epoch) == got.fulfilled

    def test_deterministic(self, small_cfg, small_matrix, small_plan, small_days):
        a = direct_ceiling(small_days[0], small_cfg, small_matrix, small_plan)
        b = direct_ceiling(small_days[0], small_cfg, small_matrix, small_plan)
        assert a.per_epoch == b.per_epoch


class TestFixedCeiling:
    def test_bounded_and_deterministic(self, small_cfg, small_matrix, small_plan, small_days):
        cfg = small_cfg.replaced(train_episodes=2, min_replay=48)
        counts_a = fixed_ceiling(small_days[:1], cfg, small_matrix, small_plan, seed=3)
        counts_b = fixed_ceiling(small_days[:1], cfg, small_matrix, small_plan, seed=3)
        assert counts_a == counts_b
        assert counts_a[0] <= small_days[0].total

    def test_usually_at_least_untrained(self, small_cfg, small_matrix, small_plan, small_days):
        cfg = small_cfg.replaced(train_episodes=3, min_replay=48)
        wins = 0
        for seed in range(3):
            trained = fixed_ceiling(small_days[:1], cfg, small_matrix, small_plan, seed=seed)[0]
            untrained = run_episode(
                NeurAdpPolicy(None), small_days[0], cfg, small_matrix, small_plan
            ).total_fulfilled
            if trained >= untrained:
                wins += 1
        assert wins >= 2
