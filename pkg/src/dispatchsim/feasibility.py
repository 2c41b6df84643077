"""Batch enumeration and courier-batch feasibility checking.

Produces the feasible match set for one epoch: per courier, every batch it
can serve (with the minimum-return-time route) plus the mandatory null
candidate.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .config import ExperimentConfig
from .geo import TravelTimeMatrix
from .sim import Courier, Order, SystemState, action_reward, best_route


@dataclass(frozen=True)
class RoutePlan:
    """One delivery sequence with committed drop minutes and depot return."""

    sequence: tuple[Order, ...]
    drop_times: tuple[float, ...]
    return_time: float
    start_time: float

    @property
    def duration(self) -> float:
        return self.return_time - self.start_time


@dataclass(frozen=True)
class MatchCandidate:
    """A feasible (courier, batch) pair; ``orders`` empty means the null action."""

    courier: int
    orders: tuple[Order, ...]
    route: RoutePlan | None
    immediate_reward: float
    score: float = 0.0

    @property
    def batch_ids(self) -> tuple[int, ...]:
        return tuple(o.id for o in self.orders)

    def with_score(self, score: float) -> "MatchCandidate":
        return MatchCandidate(self.courier, self.orders, self.route, self.immediate_reward, score)

    @property
    def value(self) -> float:
        return self.immediate_reward + self.score


def enumerate_batches(orders: list[Order], max_size: int) -> list[tuple[Order, ...]]:
    """All subsets of the epoch's orders with 1 <= size <= max_size, by size then id."""
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    ordered = sorted(orders, key=lambda o: o.id)
    out: list[tuple[Order, ...]] = []
    for k in range(1, min(max_size, len(ordered)) + 1):
        out.extend(itertools.combinations(ordered, k))
    return out


def check_match(
    courier: Courier,
    batch: tuple[Order, ...],
    minute: float,
    matrix: TravelTimeMatrix,
    cfg: ExperimentConfig,
) -> RoutePlan | None:
    """Feasibility gate for assigning ``batch`` to ``courier`` at this epoch.

    Gates: the courier is on shift, the combined queue fits its capacity,
    and the next dispatch (pending orders plus the batch, leaving the depot
    at now + ret) has a permutation meeting every deadline and returning
    before shift end. Returns the minimum-return-time plan, or None.
    """
    if courier.shift_start > minute + 1e-9:
        return None
    if courier.shift_end <= minute + 1e-9:
        return None
    if courier.queue_size() + len(batch) > cfg.queue_max:
        return None
    start = minute + max(0.0, courier.ret)
    plan = best_route(list(courier.pending) + list(batch), start, matrix, courier.shift_end)
    if plan is None:
        return None
    seq, drops, ret_time = plan
    return RoutePlan(seq, drops, ret_time, start)


def null_candidate(
    courier_idx: int,
    courier: Courier,
    minute: float,
    matrix: TravelTimeMatrix,
    cfg: ExperimentConfig,
    beta: float,
) -> MatchCandidate:
    """The always-available do-nothing action for one courier.

    Contributes zero reward: the committed remainder (current trip plus
    already-accepted pending orders) is constant across the courier's
    candidates, so it cancels in the matching objective and is excluded
    from the reward stream. The pending route is still attached for
    post-state projection.
    """
    if courier.pending and courier.on_shift(minute):
        start = minute + max(0.0, courier.ret)
        plan = best_route(list(courier.pending), start, matrix, courier.shift_end)
        if plan is not None:
            seq, drops, ret_time = plan
            route = RoutePlan(seq, drops, ret_time, start)
            return MatchCandidate(courier_idx, (), route, 0.0)
    return MatchCandidate(courier_idx, (), None, 0.0)


def feasible_matches(
    state: SystemState,
    matrix: TravelTimeMatrix,
    cfg: ExperimentConfig,
    beta: float,
) -> list[list[MatchCandidate]]:
    """Per-courier feasible candidates for the epoch, null candidate always first.

    Batches are tried smallest first; supersets of an infeasible batch are
    skipped (capacity and deadlines only tighten as batches grow).
    """
    minute = state.t * cfg.delta_minutes
    batches = enumerate_batches(state.orders, cfg.queue_max)
    out: list[list[MatchCandidate]] = []
    for idx, courier in enumerate(state.couriers):
        null = null_candidate(idx, courier, minute, matrix, cfg, beta)
        # committed baseline: taking a batch is charged only the route time
        # it newly induces beyond the already-accepted pending orders
        base_duration = null.route.duration if null.route is not None else 0.0
        cands = [null]
        infeasible: list[frozenset[int]] = []
        for batch in batches:
            ids = frozenset(o.id for o in batch)
            if any(bad <= ids for bad in infeasible):
                continue
            plan = check_match(courier, batch, minute, matrix, cfg)
            if plan is None:
                infeasible.append(ids)
                continue
            reward = action_reward(beta, len(batch), plan.duration - base_duration)
            cands.append(MatchCandidate(idx, batch, plan, reward))
        out.append(cands)
    return out
