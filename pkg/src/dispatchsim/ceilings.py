"""Artificial performance bounds: instant-delivery and train-on-the-test-day."""

from __future__ import annotations

from dataclasses import dataclass

from .config import ExperimentConfig
from .feasibility import feasible_matches
from .matching import solve_matching
from .sim import DayStream, ShiftPlan, SystemState, compute_beta


@dataclass
class CeilingResult:
    fulfilled: int
    per_epoch: list[int]


def direct_ceiling(
    day: DayStream,
    cfg: ExperimentConfig,
    matrix,
    shift_plan: ShiftPlan,
) -> CeilingResult:
    """Upper bound with teleporting couriers.

    Matching keeps the real capacity, shift and deadline constraints at the
    decision instant, but every matched order is delivered by the next
    epoch and every on-shift courier starts each epoch idle at the depot.
    """
    beta = compute_beta(matrix, cfg.queue_max)
    couriers = shift_plan.make_couriers()
    per_epoch = []
    for t, orders in enumerate(day.epochs):
        state = SystemState(t, couriers, list(orders))
        fmatches = feasible_matches(state, matrix, cfg, beta)
        assignment = solve_matching(fmatches, len(orders))
        per_epoch.append(sum(len(c.orders) for c in assignment.chosen))
    return CeilingResult(sum(per_epoch), per_epoch)


def fixed_ceiling(
    test_days: list[DayStream],
    cfg: ExperimentConfig,
    matrix,
    shift_plan: ShiftPlan,
    seed: int,
    episodes: int | None = None,
) -> list[int]:
    """Train the value-based policy on each evaluation day itself, then score it.

    The per-day fulfilled counts serve as the fill-percentage denominator.
    """
    from .policies import NeurAdpPolicy
    from .sim import run_episode
    from .vfa import train_neuradp

    counts = []
    for k, day in enumerate(test_days):
        net, _ = train_neuradp(
            cfg, matrix, shift_plan, [day], seed=seed + 7919 * k, episodes=episodes
        )
        metrics = run_episode(NeurAdpPolicy(net, gamma=cfg.gamma), day, cfg, matrix, shift_plan)
        counts.append(metrics.total_fulfilled)
    return counts
