"""Dispatching policies: value-based matching, myopic variants, accept/reject DRL.

Every policy exposes ``decide(state, fmatches, ctx) -> PolicyDecision`` and
returns a structurally feasible assignment, so the episode runner treats
them interchangeably.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import (
    STREAM_DDQN_EPS,
    STREAM_DDQN_INIT,
    STREAM_DDQN_REPLAY,
    ExperimentConfig,
    rng_for,
)
from .feasibility import MatchCandidate, check_match, null_candidate
from .matching import Assignment, greedy_matching, solve_matching
from .nn import Adam, QNet
from .sim import (
    Courier,
    EpochContext,
    Order,
    SystemState,
    action_reward,
    run_episode,
)
from .vfa import score_candidates

DDQN_FEATURES = 10

MYOPIC_VARIANTS = ("dc", "df", "ce", "cf")


@dataclass
class PolicyDecision:
    assignment: Assignment
    diagnostics: dict = field(default_factory=dict)


class NeurAdpPolicy:
    """Score candidates with the value net, then solve the matching exactly.

    With ``net=None`` all scores are zero and the policy maximizes the
    immediate reward alone (the behaviour of an untrained value function).
    ``gamma`` weights downstream value against immediate reward exactly as
    the Bellman targets do; at the default 1.0 the score is the raw value.
    """

    def __init__(self, net=None, name: str = "neuradp", gamma: float = 1.0):
        self.net = net
        self.active = net  # may point at a noisy copy during training
        self.name = name
        self.gamma = gamma

    def decide(self, state: SystemState, fmatches, ctx: EpochContext) -> PolicyDecision:
        if self.active is None:
            scored = fmatches
            diagnostics = {}
        else:
            scores, packed = score_candidates(self.active, state, fmatches, ctx)
            scored = [
                [cand.with_score(self.gamma * float(s)) for cand, s in zip(cands, row)]
                for cands, row in zip(fmatches, scores)
            ]
            diagnostics = {"packed": packed}
        assignment = solve_matching(scored, len(state.orders))
        diagnostics["chosen_idx"] = [
            next(j for j, c in enumerate(cands) if c.batch_ids == chosen.batch_ids)
            for cands, chosen in zip(scored, assignment.chosen)
        ]
        return PolicyDecision(assignment, diagnostics)


def _courier_sort_key(variant: str, courier: Courier, idx: int):
    if variant == "dc":
        return (courier.ret, idx)
    if variant == "df":
        return (-courier.ret, idx)
    if variant == "ce":
        return (courier.queue_size(), idx)
    if variant == "cf":
        return (-courier.queue_size(), idx)
    raise ValueError(f"unknown variant {variant!r}; expected one of {MYOPIC_VARIANTS}")


class MyopicPolicy:
    """Greedy per-courier matching: most new orders first, then quickest route.

    Couriers are visited in variant order (dc/df: closest/farthest to the
    depot by return time; ce/cf: emptiest/fullest queue) and each takes its
    best remaining non-conflicting candidate.
    """

    def __init__(self, variant: str = "dc"):
        if variant not in MYOPIC_VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {MYOPIC_VARIANTS}")
        self.variant = variant
        self.name = f"myopic-{variant}"

    def decide(self, state: SystemState, fmatches, ctx: EpochContext) -> PolicyDecision:
        order = sorted(
            range(len(state.couriers)),
            key=lambda i: _courier_sort_key(self.variant, state.couriers[i], i),
        )
        used: set[int] = set()
        chosen: list[MatchCandidate | None] = [None] * len(state.couriers)
        for i in order:
            best = None
            best_key = None
            for cand in fmatches[i]:
                if any(o in used for o in cand.batch_ids):
                    continue
                duration = cand.route.duration if cand.route is not None else 0.0
                key = (-len(cand.orders), duration, cand.batch_ids)
                if best_key is None or key < best_key:
                    best, best_key = cand, key
            assert best is not None  # the null candidate never conflicts
            chosen[i] = best
            used.update(best.batch_ids)
        objective = sum(c.value for c in chosen)
        return PolicyDecision(Assignment(list(chosen), objective))


def ddqn_features(
    couriers: list[Courier],
    order: Order,
    ctx: EpochContext,
) -> np.ndarray:
    """Fixed-size accept/reject state: fleet aggregates plus the order itself."""
    cfg = ctx.cfg
    H = cfg.horizon_minutes
    n = max(1, len(couriers))
    on_shift = [c for c in couriers if c.on_shift(ctx.minute)]
    rets = [c.ret for c in on_shift]
    occ = [c.queue_size() / cfg.queue_max for c in on_shift]
    direct = ctx.matrix[0, order.dest]
    return np.array(
        [
            min(rets) / H if rets else 1.0,
            float(np.mean(rets)) / H if rets else 1.0,
            float(np.mean(occ)) if occ else 1.0,
            (n - len(on_shift)) / n,
            sum(1 for c in on_shift if c.at_depot()) / n,
            order.dest / max(1, ctx.matrix.n_locations - 1),
            direct / H,
            max(0.0, order.dead - ctx.minute - direct) / H,
            ctx.t / max(1, cfg.n_epochs),
            ctx.arrivals_count / n,
        ]
    )


class DrlPolicy:
    """Per-order accept/reject network plus heuristic courier attachment.

    Orders are visited in increasing direct delivery time; an accepted
    order goes to the variant-chosen courier with a feasible singleton
    match, or is dropped with no credit if none exists.
    """

    def __init__(self, qnet: QNet, variant: str = "dc", epsilon: float = 0.0, rng=None):
        if variant not in MYOPIC_VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {MYOPIC_VARIANTS}")
        self.qnet = qnet
        self.variant = variant
        self.epsilon = epsilon
        self.rng = rng
        self.name = f"drl-{variant}"
        self.transitions: list | None = None  # set by the trainer
        self._prev: tuple[np.ndarray, int, float] | None = None

    def _record(self, s, a, r) -> None:
        if self.transitions is None:
            return
        if self._prev is not None:
            ps, pa, pr = self._prev
            self.transitions.append((ps, pa, pr, s, False))
        self._prev = (s, a, r)

    def end_episode(self) -> None:
        if self.transitions is not None and self._prev is not None:
            ps, pa, pr = self._prev
            self.transitions.append((ps, pa, pr, np.zeros(DDQN_FEATURES), True))
        self._prev = None

    def decide(self, state: SystemState, fmatches, ctx: EpochContext) -> PolicyDecision:
        cfg = ctx.cfg
        working = [c.clone() for c in state.couriers]
        batches: dict[int, list[Order]] = {}
        ordered = sorted(state.orders, key=lambda o: (ctx.matrix[0, o.dest], o.id))
        accepted, dropped = [], []
        for order in ordered:
            s = ddqn_features(working, order, ctx)
            if self.epsilon > 0 and self.rng is not None and self.rng.random() < self.epsilon:
                act = int(self.rng.integers(2))
            else:
                q = self.qnet.forward(s)[0]
                act = int(np.argmax(q))
            reward = 0.0
            if act == 1:  # accept
                feasible = [
                    i
                    for i, c in enumerate(working)
                    if check_match(c, (order,), ctx.minute, ctx.matrix, cfg) is not None
                ]
                if feasible:
                    pick = min(
                        feasible,
                        key=lambda i: _courier_sort_key(self.variant, working[i], i),
                    )
                    working[pick].pending.append(order)
                    batches.setdefault(pick, []).append(order)
                    accepted.append(order.id)
                    reward = 1.0
                else:
                    dropped.append(order.id)
            self._record(s, act, reward)

        chosen = []
        for i, courier in enumerate(state.couriers):
            batch = batches.get(i)
            if batch:
                plan = check_match(courier, tuple(batch), ctx.minute, ctx.matrix, cfg)
                assert plan is not None  # attachment was checked incrementally
                chosen.append(
                    MatchCandidate(
                        i, tuple(batch), plan, action_reward(ctx.beta, len(batch), plan.duration)
                    )
                )
            else:
                chosen.append(null_candidate(i, courier, ctx.minute, ctx.matrix, cfg, ctx.beta))
        objective = sum(c.value for c in chosen)
        return PolicyDecision(
            Assignment(chosen, objective), {"accepted": accepted, "dropped": dropped}
        )


def build_qnet(cfg: ExperimentConfig, seed: int) -> QNet:
    return QNet(
        DDQN_FEATURES,
        cfg.ddqn_hidden,
        n_actions=2,
        seed=int(rng_for(seed, STREAM_DDQN_INIT).integers(2**31)),
    )


def ddqn_update_step(qnet: QNet, target: QNet, optimizer: Adam, batch, gamma: float) -> float:
    """One Double-DQN step on (s, a, r, s', done) tuples; returns the loss."""
    s = np.stack([b[0] for b in batch])
    a = np.array([b[1] for b in batch])
    r = np.array([b[2] for b in batch])
    s2 = np.stack([b[3] for b in batch])
    done = np.array([b[4] for b in batch], dtype=float)
    best_next = np.argmax(qnet.forward(s2), axis=1)
    q_next = target.forward(s2)[np.arange(len(batch)), best_next]
    y = r + gamma * (1.0 - done) * q_next
    q, cache = qnet.forward(s, want_cache=True)
    taken = q[np.arange(len(batch)), a]
    dout = np.zeros_like(q)
    dout[np.arange(len(batch)), a] = 2.0 * (taken - y) / len(batch)
    grads = qnet.backward(cache, dout)
    optimizer.step(qnet.params, grads)
    return float(np.mean((taken - y) ** 2))


def ddqn_train(
    cfg: ExperimentConfig,
    matrix,
    shift_plan,
    days: list,
    seed: int,
    episodes: int | None = None,
    variant: str = "dc",
) -> QNet:
    """Double-DQN accept/reject training on the same day streams as the VFA."""
    episodes = cfg.ddqn_episodes if episodes is None else episodes
    qnet = build_qnet(cfg, seed)
    if episodes == 0:
        return qnet
    if not days:
        raise ValueError("training requires at least one day stream")
    target = qnet.clone()
    optimizer = Adam(lr=cfg.ddqn_lr)
    replay: list = []
    eps_rng = rng_for(seed, STREAM_DDQN_EPS)
    sample_rng = rng_for(seed, STREAM_DDQN_REPLAY)
    policy = DrlPolicy(qnet, variant=variant, epsilon=1.0, rng=eps_rng)
    policy.transitions = replay
    updates = 0

    for ep in range(episodes):
        span = max(1.0, cfg.ddqn_eps_frac * episodes)
        frac = min(1.0, ep / span)
        policy.epsilon = cfg.ddqn_eps_start + (cfg.ddqn_eps_end - cfg.ddqn_eps_start) * frac
        day = days[ep % len(days)]
        run_episode(policy, day, cfg, matrix, shift_plan, audit=False)
        policy.end_episode()
        if len(replay) > cfg.ddqn_replay_capacity:
            del replay[: len(replay) - cfg.ddqn_replay_capacity]
        n_updates = max(1, min(len(replay), 2000) // (4 * cfg.ddqn_batch_size))
        for _ in range(n_updates):
            if len(replay) < cfg.ddqn_batch_size:
                break
            idx = sample_rng.integers(len(replay), size=cfg.ddqn_batch_size)
            batch = [replay[i] for i in idx]
            ddqn_update_step(qnet, target, optimizer, batch, cfg.ddqn_gamma)
            updates += 1
            if updates % cfg.ddqn_sync_every == 0:
                for name, arr in qnet.params.items():
                    target.params[name] = arr.copy()
    policy.transitions = None
    return qnet
