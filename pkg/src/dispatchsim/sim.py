"""MDP core: state, order arrivals, rewards, transitions, episode runner.

All times are absolute minutes from day start; epoch t begins at minute
t * delta. A courier's ``manifest`` holds the orders on its current trip
(drop-off minutes committed at dispatch) and ``pending`` the orders queued
for its next dispatch; together they are the courier's order queue.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .geo import Location, TravelTimeMatrix

_EPS = 1e-9


@dataclass(frozen=True)
class Order:
    id: int
    dest: int
    dead: float


@dataclass(frozen=True)
class QueuedOrder:
    order: Order
    drop: float  # committed drop-off minute, fixed at dispatch


@dataclass
class Courier:
    shift_start: float
    shift_end: float
    ret: float = 0.0
    manifest: list[QueuedOrder] = field(default_factory=list)
    pending: list[Order] = field(default_factory=list)

    def on_shift(self, minute: float) -> bool:
        return self.shift_start <= minute < self.shift_end

    def at_depot(self) -> bool:
        return self.ret <= 0.0

    def queue_size(self) -> int:
        return len(self.manifest) + len(self.pending)

    def queue_orders(self) -> list[Order]:
        return [q.order for q in self.manifest] + list(self.pending)

    def clone(self) -> "Courier":
        return Courier(
            self.shift_start,
            self.shift_end,
            self.ret,
            list(self.manifest),
            list(self.pending),
        )


@dataclass
class SystemState:
    t: int
    couriers: list[Courier]
    orders: list[Order]


@dataclass
class ArrivalProfile:
    means: np.ndarray
    sigma: float = 1.0

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float)
        if np.any(self.means < 0):
            raise ValueError("arrival means must be non-negative")

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(
                {"means": [repr(float(v)) for v in self.means], "sigma": self.sigma},
                fh,
            )
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ArrivalProfile":
        with open(path) as fh:
            raw = json.load(fh)
        return cls(np.array([float(v) for v in raw["means"]]), float(raw["sigma"]))


def default_profile(n_epochs: int, delta: float, daily_orders: float, sigma: float = 1.0) -> ArrivalProfile:
    """Day-shaped arrival curve: overnight trough, lunchtime bump, evening peak."""
    minutes = np.arange(n_epochs) * delta
    w = (
        0.06
        + 0.50 * np.exp(-(((minutes - 780.0) / 170.0) ** 2))
        + 1.00 * np.exp(-(((minutes - 1170.0) / 130.0) ** 2))
    )
    means = daily_orders * w / w.sum()
    return ArrivalProfile(means, sigma)


@dataclass
class ShiftPlan:
    shift_starts: list[float]
    shift_length: float = 360.0

    def make_couriers(self) -> list[Courier]:
        return [Courier(s, s + self.shift_length) for s in self.shift_starts]


@dataclass
class EpochContext:
    """Per-epoch inputs a policy may need besides the raw state."""

    t: int
    minute: float
    matrix: TravelTimeMatrix
    cfg: ExperimentConfig
    beta: float
    arrivals_count: int


def order_deadline(t_minute: float, dest: int, matrix: TravelTimeMatrix, delay_max: float) -> float:
    """Hard deadline: arrival epoch + direct depot-to-destination time + allowed delay."""
    if dest < 1:
        raise ValueError("order destination must be a delivery location (id >= 1)")
    return t_minute + matrix[0, dest] + delay_max


def sample_arrivals(
    t_idx: int,
    profile: ArrivalProfile,
    locations: list[Location],
    matrix: TravelTimeMatrix,
    delay_max: float,
    delta: float,
    rng: np.random.Generator,
    start_id: int = 0,
) -> list[Order]:
    """Orders arriving in (t-1, t]; count is a rounded, zero-truncated normal draw."""
    mean = float(profile.means[t_idx])
    count = int(np.rint(rng.normal(mean, profile.sigma))) if profile.sigma > 0 else int(np.rint(mean))
    count = max(0, count)
    if count == 0:
        return []
    weights = np.array([loc.weight for loc in locations[1:]], dtype=float)
    p = weights / weights.sum()
    dests = rng.choice(np.arange(1, len(locations)), size=count, p=p)
    minute = t_idx * delta
    return [
        Order(start_id + k, int(d), order_deadline(minute, int(d), matrix, delay_max))
        for k, d in enumerate(dests)
    ]


def compute_beta(matrix: TravelTimeMatrix, queue_max: int) -> float:
    """Reward multiplier exceeding any single-action route duration.

    Sum of the queue_max largest inter-location legs plus the largest
    return-to-depot leg, so serving one more order always beats any amount
    of saved route time.
    """
    if queue_max < 1:
        raise ValueError("queue_max must be >= 1")
    m = matrix.minutes
    n = matrix.n_locations
    if n < 2:
        return 0.0
    inter = m[1:, 1:]
    offdiag = inter[~np.eye(n - 1, dtype=bool)]
    top = np.sort(offdiag)[::-1][:queue_max] if offdiag.size else np.array([])
    return float(top.sum() + m[1:, 0].max())


def action_reward(beta: float, n_new: int, route_minutes: float) -> float:
    """Per-courier contribution: beta * new orders served - route-and-return minutes."""
    return beta * n_new - route_minutes


def best_route(
    orders: list[Order],
    start_minute: float,
    matrix: TravelTimeMatrix,
    shift_end: float,
) -> tuple[tuple[Order, ...], tuple[float, ...], float] | None:
    """Minimum-return-time delivery sequence starting from the depot.

    Exhaustive over permutations (queues are small); every drop must meet
    its order's deadline and the depot return must precede shift end.
    Ties broken by lexicographic order-id sequence. Returns None when no
    permutation is feasible.
    """
    if not orders:
        return ((), (), start_minute)
    m = matrix.minutes
    best: tuple[float, tuple[int, ...], tuple[Order, ...], tuple[float, ...]] | None = None
    for perm in itertools.permutations(sorted(orders, key=lambda o: o.id)):
        t_now = start_minute
        prev = 0
        drops = []
        ok = True
        for o in perm:
            t_now += m[prev, o.dest]
            if t_now > o.dead + _EPS:
                ok = False
                break
            drops.append(t_now)
            prev = o.dest
        if not ok:
            continue
        ret_time = t_now + m[prev, 0]
        if ret_time >= shift_end - _EPS:
            continue
        key = (ret_time, tuple(o.id for o in perm))
        if best is None or key < (best[0], best[1]):
            best = (ret_time, key[1], perm, tuple(drops))
    if best is None:
        return None
    return best[2], best[3], best[0]


def _route_or_fail(orders, start_minute, matrix, shift_end):
    plan = best_route(orders, start_minute, matrix, shift_end)
    if plan is None:
        raise RuntimeError("committed queue has no feasible route; feasibility was violated upstream")
    return plan


def _advance_courier(
    courier: Courier,
    batch: tuple[Order, ...],
    route,
    minute: float,
    cfg: ExperimentConfig,
    matrix: TravelTimeMatrix,
    delivered: list[tuple[Order, float]],
) -> Courier:
    """Apply one courier's action, then simulate delta minutes of movement."""
    nxt = courier.clone()
    end = minute + cfg.delta_minutes
    if batch:
        if not courier.on_shift(minute):
            raise RuntimeError("assignment matched an off-shift courier")
        if courier.queue_size() + len(batch) > cfg.queue_max:
            raise RuntimeError("assignment exceeds courier capacity")
        if courier.at_depot():
            # prompt dispatch: the candidate route covers the whole new queue
            if route is None:
                raise RuntimeError("dispatch candidate carries no route")
            nxt.manifest = [QueuedOrder(o, d) for o, d in zip(route.sequence, route.drop_times)]
            nxt.pending = []
            nxt.ret = route.return_time - minute
        else:
            nxt.pending = nxt.pending + list(batch)

    if nxt.ret > 0:
        ret_abs = minute + nxt.ret
        keep = []
        for q in nxt.manifest:
            if q.drop <= end + _EPS:
                delivered.append((q.order, q.drop))
            else:
                keep.append(q)
        nxt.manifest = keep
        if ret_abs <= end + _EPS:
            # returned this epoch: queue emptied, accumulated orders go right back out
            nxt.ret = 0.0
            if nxt.pending:
                seq, drops, ret2 = _route_or_fail(nxt.pending, ret_abs, matrix, nxt.shift_end)
                nxt.pending = []
                keep2 = []
                for o, d in zip(seq, drops):
                    if d <= end + _EPS:
                        delivered.append((o, d))
                    else:
                        keep2.append(QueuedOrder(o, d))
                nxt.manifest = keep2
                nxt.ret = max(0.0, ret2 - end)
        else:
            nxt.ret = ret_abs - end
    else:
        nxt.ret = 0.0
    return nxt


def transition_post(
    state: SystemState,
    assignment,
    cfg: ExperimentConfig,
    matrix: TravelTimeMatrix,
) -> tuple[list[Courier], list[tuple[Order, float]]]:
    """Post-decision transition: dispatch/queue per action, advance one period."""
    if len(assignment.chosen) != len(state.couriers):
        raise RuntimeError("assignment must carry one candidate per courier")
    minute = state.t * cfg.delta_minutes
    delivered: list[tuple[Order, float]] = []
    couriers = [
        _advance_courier(c, cand.orders, cand.route, minute, cfg, matrix, delivered)
        for c, cand in zip(state.couriers, assignment.chosen)
    ]
    return couriers, delivered


def transition_next(post_couriers: list[Courier], new_orders: list[Order], t_next: int) -> SystemState:
    """Exogenous transition: next state's orders are exactly the new arrivals."""
    return SystemState(t_next, post_couriers, list(new_orders))


def build_shift_plan(
    n_couriers: int,
    profile: ArrivalProfile,
    horizon_minutes: float,
    delta: float,
    shift_length: float = 360.0,
) -> ShiftPlan:
    """Stagger shift starts so headcount tracks the (smoothed) arrival curve.

    Start epochs are binned into min(n_couriers, feasible-starts) equal
    buckets weighted by the demand a shift starting there would cover;
    couriers are allocated to buckets by largest remainder and spread
    evenly inside each bucket.
    """
    if n_couriers < 1:
        raise ValueError("n_couriers must be >= 1")
    n_ep = int(round(horizon_minutes / delta))
    shift_ep = int(round(shift_length / delta))
    if shift_ep > n_ep:
        raise ValueError("shift longer than horizon")
    n_starts = n_ep - shift_ep + 1

    window = max(1, int(round(60.0 / delta)))
    kernel = np.ones(window) / window
    smoothed = np.convolve(profile.means, kernel, mode="same")
    cum = np.concatenate([[0.0], np.cumsum(smoothed)])
    cover = np.array([cum[s + shift_ep] - cum[s] for s in range(n_starts)])
    if cover.sum() <= 0:
        cover = np.ones(n_starts)

    n_buckets = min(n_couriers, n_starts)
    edges = [int(round(b * n_starts / n_buckets)) for b in range(n_buckets + 1)]
    bw = np.array([cover[edges[b]: edges[b + 1]].sum() for b in range(n_buckets)])
    if bw.sum() <= 0:
        bw = np.ones(n_buckets)
    quota = n_couriers * bw / bw.sum()
    alloc = np.floor(quota).astype(int)
    rem = n_couriers - alloc.sum()
    order = sorted(range(n_buckets), key=lambda b: (-(quota[b] - alloc[b]), b))
    for b in order[:rem]:
        alloc[b] += 1

    starts = []
    for b in range(n_buckets):
        lo, hi = edges[b], edges[b + 1]
        k = alloc[b]
        for j in range(k):
            s = lo + int((j + 0.5) * (hi - lo) / k)
            starts.append(min(s, n_starts - 1) * delta)
    starts.sort()
    return ShiftPlan(starts, shift_length)


@dataclass
class DayStream:
    """Pre-sampled arrivals per epoch, for reproducible days."""

    epochs: list[list[Order]]

    @property
    def total(self) -> int:
        return sum(len(e) for e in self.epochs)

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "order_id", "dest", "dead"])
            for t, orders in enumerate(self.epochs):
                for o in orders:
                    writer.writerow([t, o.id, o.dest, repr(o.dead)])

    @classmethod
    def load(cls, path, n_epochs: int) -> "DayStream":
        epochs: list[list[Order]] = [[] for _ in range(n_epochs)]
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["epoch", "order_id", "dest", "dead"]:
                raise ValueError(f"{path}: expected header 'epoch,order_id,dest,dead'")
            for row in reader:
                if not row:
                    continue
                t, oid, dest, dead = int(row[0]), int(row[1]), int(row[2]), float(row[3])
                if not (0 <= t < n_epochs):
                    raise ValueError(f"{path}: epoch {t} outside horizon")
                epochs[t].append(Order(oid, dest, dead))
        return cls(epochs)


def sample_day(
    cfg: ExperimentConfig,
    profile: ArrivalProfile,
    locations: list[Location],
    matrix: TravelTimeMatrix,
    rng: np.random.Generator,
) -> DayStream:
    epochs = []
    next_id = 0
    for t in range(cfg.n_epochs):
        orders = sample_arrivals(
            t, profile, locations, matrix, cfg.delay_max, cfg.delta_minutes, rng, next_id
        )
        next_id += len(orders)
        epochs.append(orders)
    return DayStream(epochs)


@dataclass
class EpisodeMetrics:
    seen: list[int]
    fulfilled: list[int]
    lost: list[int]
    total_arrivals: int = 0
    total_fulfilled: int = 0
    total_lost: int = 0
    total_reward: float = 0.0
    delivered_count: int = 0
    in_flight_at_end: int = 0
    late_deliveries: int = 0
    capacity_violations: int = 0
    shift_violations: int = 0
    avg_return_time: float = 0.0
    avg_inflight_queue: float = 0.0
    avg_at_depot: float = 0.0
    avg_accepted_direct: float = 0.0

    def to_dict(self) -> dict:
        return {
            "seen": self.seen,
            "fulfilled": self.fulfilled,
            "lost": self.lost,
            "total_arrivals": self.total_arrivals,
            "total_fulfilled": self.total_fulfilled,
            "total_lost": self.total_lost,
            "total_reward": float(self.total_reward),
            "delivered_count": self.delivered_count,
            "in_flight_at_end": self.in_flight_at_end,
            "late_deliveries": self.late_deliveries,
            "capacity_violations": self.capacity_violations,
            "shift_violations": self.shift_violations,
            "avg_return_time": self.avg_return_time,
            "avg_inflight_queue": self.avg_inflight_queue,
            "avg_at_depot": self.avg_at_depot,
            "avg_accepted_direct": self.avg_accepted_direct,
        }


def _audit_assignment(assignment, state: SystemState) -> None:
    taken: set[int] = set()
    pool = {o.id for o in state.orders}
    for cand in assignment.chosen:
        for o in cand.orders:
            if o.id not in pool:
                raise RuntimeError(f"assignment uses order {o.id} not in the current epoch")
            if o.id in taken:
                raise RuntimeError(f"order {o.id} assigned to more than one courier")
            taken.add(o.id)
    recomputed = sum(c.immediate_reward + c.score for c in assignment.chosen)
    if not math.isclose(recomputed, assignment.objective, rel_tol=1e-9, abs_tol=1e-6):
        raise RuntimeError("assignment objective does not match its candidates")


def run_episode(
    policy,
    day: DayStream,
    cfg: ExperimentConfig,
    matrix: TravelTimeMatrix,
    shift_plan: ShiftPlan,
    hooks=None,
    audit: bool = True,
) -> EpisodeMetrics:
    """Roll one day forward under a policy and collect per-epoch metrics."""
    from .feasibility import feasible_matches  # runtime import: feasibility builds on sim types

    n_ep = cfg.n_epochs
    if len(day.epochs) != n_ep:
        raise ValueError("day stream length does not match the horizon")
    beta = compute_beta(matrix, cfg.queue_max)
    couriers = shift_plan.make_couriers()
    for c in couriers:
        if c.shift_end > cfg.horizon_minutes + _EPS:
            raise ValueError("shift extends past the horizon")
    state = SystemState(0, couriers, list(day.epochs[0]))

    metrics = EpisodeMetrics(seen=[], fulfilled=[], lost=[], total_arrivals=day.total)
    ret_samples: list[float] = []
    queue_samples: list[int] = []
    depot_counts: list[int] = []
    accepted_direct: list[float] = []

    for t in range(n_ep):
        minute = t * cfg.delta_minutes
        on_shift = [c for c in state.couriers if c.on_shift(minute)]
        away = [c for c in on_shift if not c.at_depot()]
        depot_counts.append(len(on_shift) - len(away))
        for c in away:
            ret_samples.append(c.ret)
            queue_samples.append(c.queue_size())
        for c in state.couriers:
            if c.queue_size() > cfg.queue_max:
                metrics.capacity_violations += 1
            if not c.at_depot() and (
                minute < c.shift_start - _EPS or minute + c.ret > c.shift_end + 1e-6
            ):
                metrics.shift_violations += 1

        fmatches = feasible_matches(state, matrix, cfg, beta)
        ctx = EpochContext(t, minute, matrix, cfg, beta, len(state.orders))
        decision = policy.decide(state, fmatches, ctx)
        if audit:
            _audit_assignment(decision.assignment, state)

        matched = sum(len(c.orders) for c in decision.assignment.chosen)
        metrics.seen.append(len(state.orders))
        metrics.fulfilled.append(matched)
        metrics.lost.append(len(state.orders) - matched)
        metrics.total_reward += sum(c.immediate_reward for c in decision.assignment.chosen)
        for cand in decision.assignment.chosen:
            for o in cand.orders:
                accepted_direct.append(matrix[0, o.dest])

        if hooks is not None:
            hooks.on_decision(state, fmatches, decision, ctx)

        post, delivered = transition_post(state, decision.assignment, cfg, matrix)
        for order, drop in delivered:
            metrics.delivered_count += 1
            if drop > order.dead + 1e-6:
                metrics.late_deliveries += 1
        new_orders = day.epochs[t + 1] if t + 1 < n_ep else []
        state = transition_next(post, new_orders, t + 1)

    # flush committed work past the last epoch (all of it lands before shift end)
    horizon_min = n_ep * cfg.delta_minutes
    for c in state.couriers:
        for q in c.manifest:
            metrics.delivered_count += 1
            if q.drop > q.order.dead + 1e-6:
                metrics.late_deliveries += 1
        if c.pending:
            ret_abs = horizon_min + c.ret
            seq, drops, _ = _route_or_fail(c.pending, ret_abs, matrix, c.shift_end)
            for o, d in zip(seq, drops):
                metrics.delivered_count += 1
                if d > o.dead + 1e-6:
                    metrics.late_deliveries += 1

    metrics.total_fulfilled = sum(metrics.fulfilled)
    metrics.total_lost = sum(metrics.lost)
    metrics.in_flight_at_end = metrics.total_fulfilled - metrics.delivered_count
    metrics.avg_return_time = float(np.mean(ret_samples)) if ret_samples else 0.0
    metrics.avg_inflight_queue = float(np.mean(queue_samples)) if queue_samples else 0.0
    metrics.avg_at_depot = float(np.mean(depot_counts)) if depot_counts else 0.0
    metrics.avg_accepted_direct = float(np.mean(accepted_direct)) if accepted_direct else 0.0
    if hooks is not None and hasattr(hooks, "on_episode_end"):
        hooks.on_episode_end(metrics)
    return metrics
