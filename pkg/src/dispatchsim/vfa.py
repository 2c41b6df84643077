"""Neural post-decision value function: features, replay, Bellman updates.

One shared network values every courier's post-decision state; scores
enter the matching objective as constants, so the whole-fleet value is the
sum of per-courier evaluations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import STREAM_EXPLORE, STREAM_NET_INIT, STREAM_REPLAY, ExperimentConfig, rng_for
from .feasibility import MatchCandidate, RoutePlan
from .matching import solve_matching
from .nn import Adam, ValueNet, perturb_params, sync_params
from .sim import Courier, EpochContext, SystemState, _advance_courier


@dataclass(frozen=True)
class FeatureVector:
    """Post-decision state of one courier plus fleet context, in raw units."""

    queue_part: tuple[tuple[int, float], ...]  # (destination id, slack minutes) in route order
    courier_part: tuple[float, float, float]  # ret minutes, minutes to shift end, at-depot flag
    time_frac: float
    aux_part: tuple[float, float, float, float]  # others off shift, others at depot, mean occupancy, arrivals


def featurize(
    post_courier: Courier,
    pending_route: RoutePlan | None,
    others: list[Courier],
    t: int,
    arrivals_count: int,
    cfg: ExperimentConfig,
) -> FeatureVector:
    """Deterministic mapping from a post-decision courier state to features.

    Slack is deadline minus (committed or projected) drop time; pending
    orders take their drops from the candidate's route.
    """
    queue: list[tuple[int, float]] = []
    for q in post_courier.manifest:
        queue.append((q.order.dest, max(0.0, q.order.dead - q.drop)))
    if post_courier.pending:
        if pending_route is None:
            raise ValueError("pending orders need a projected route for slack computation")
        drop_by_id = {o.id: d for o, d in zip(pending_route.sequence, pending_route.drop_times)}
        for o in post_courier.pending:
            queue.append((o.dest, max(0.0, o.dead - drop_by_id[o.id])))

    post_minute = (t + 1) * cfg.delta_minutes
    until_end = max(0.0, post_courier.shift_end - post_minute)
    at_depot = 1.0 if post_courier.at_depot() and post_courier.on_shift(post_minute) else 0.0

    minute = t * cfg.delta_minutes
    n_off = sum(1 for c in others if not c.on_shift(minute))
    n_depot = sum(1 for c in others if c.on_shift(minute) and c.at_depot())
    occ = [c.queue_size() / cfg.queue_max for c in others]
    mean_occ = float(np.mean(occ)) if occ else 0.0

    return FeatureVector(
        queue_part=tuple(queue),
        courier_part=(max(0.0, post_courier.ret), until_end, at_depot),
        time_frac=(t + 1) / cfg.n_epochs,
        aux_part=(float(n_off), float(n_depot), mean_occ, float(arrivals_count)),
    )


# short-horizon minute quantities (slack, return time) are normalized at route
# scale rather than day scale so candidate differences stay well-conditioned
ROUTE_SCALE_MINUTES = 60.0


def pack_feature(fv: FeatureVector, cfg: ExperimentConfig) -> np.ndarray:
    """Flatten to the network's input row; minutes scaled, counts / fleet size."""
    qmax = cfg.queue_max
    if len(fv.queue_part) > qmax:
        raise ValueError("queue_part longer than queue_max")
    n = max(1, cfg.n_couriers)
    row = np.zeros(1 + 2 * qmax + ValueNet.STATIC_DIM)
    row[0] = len(fv.queue_part)
    for k, (dest, slack) in enumerate(fv.queue_part):
        row[1 + k] = dest
        row[1 + qmax + k] = slack / ROUTE_SCALE_MINUTES
    ret, until_end, at_depot = fv.courier_part
    base = 1 + 2 * qmax
    row[base] = ret / ROUTE_SCALE_MINUTES
    row[base + 1] = until_end / cfg.shift_length
    row[base + 2] = at_depot
    row[base + 3] = fv.time_frac
    n_off, n_depot, mean_occ, arrivals = fv.aux_part
    row[base + 4] = n_off / n
    row[base + 5] = n_depot / n
    row[base + 6] = mean_occ
    row[base + 7] = arrivals / n
    return row


def value(net: ValueNet, fv: FeatureVector, cfg: ExperimentConfig) -> float:
    """Scalar value of one feature vector."""
    out = float(net.forward(pack_feature(fv, cfg))[0])
    if not math.isfinite(out):
        raise RuntimeError("value network produced a non-finite output")
    return out


def project_post(
    courier: Courier,
    cand: MatchCandidate,
    minute: float,
    cfg: ExperimentConfig,
    matrix,
) -> Courier:
    """The courier state one period after taking ``cand`` (no bookkeeping)."""
    sink: list = []
    return _advance_courier(courier, cand.orders, cand.route, minute, cfg, matrix, sink)


def candidate_features(
    state: SystemState,
    fmatches: list[list[MatchCandidate]],
    ctx: EpochContext,
) -> list[np.ndarray]:
    """Packed post-decision features for every candidate, grouped by courier."""
    cfg = ctx.cfg
    out = []
    for idx, cands in enumerate(fmatches):
        others = [c for j, c in enumerate(state.couriers) if j != idx]
        rows = np.zeros((len(cands), 1 + 2 * cfg.queue_max + ValueNet.STATIC_DIM))
        for k, cand in enumerate(cands):
            post = project_post(state.couriers[idx], cand, ctx.minute, cfg, ctx.matrix)
            fv = featurize(post, cand.route, others, ctx.t, ctx.arrivals_count, cfg)
            rows[k] = pack_feature(fv, cfg)
        out.append(rows)
    return out


def score_candidates(
    net: ValueNet,
    state: SystemState,
    fmatches: list[list[MatchCandidate]],
    ctx: EpochContext,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-candidate downstream scores (one network evaluation each) and features."""
    packed = candidate_features(state, fmatches, ctx)
    if not packed:
        return [], []
    stacked = np.concatenate(packed, axis=0)
    values = net.forward(stacked)
    if not np.all(np.isfinite(values)):
        raise RuntimeError("value network produced non-finite candidate scores")
    scores = []
    pos = 0
    for rows in packed:
        scores.append(values[pos: pos + len(rows)])
        pos += len(rows)
    return scores, packed


@dataclass
class CandidateSet:
    """Serialized feasible actions of one courier at one epoch."""

    rewards: np.ndarray
    packed: np.ndarray
    batch_ids: tuple[tuple[int, ...], ...]


@dataclass
class Experience:
    """One stored decision epoch: feasible sets now and realized sets next."""

    t: int
    next_is_terminal: bool
    cur: list[CandidateSet]
    chosen_idx: list[int]
    nxt: list[CandidateSet]
    n_next_orders: int


@dataclass(frozen=True)
class _IPCand:
    """Minimal stand-in so stored candidate sets can go through the matcher."""

    value: float
    batch_ids: tuple[int, ...]

    @property
    def orders(self) -> tuple:
        return self.batch_ids


class ReplayBuffer:
    """Prioritized ring buffer of experiences."""

    def __init__(self, capacity: int, alpha: float = 0.6, eps: float = 1e-3):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.alpha = alpha
        self.eps = eps
        self.items: list[Experience] = []
        self.priorities = np.zeros(capacity)
        self._next = 0

    def __len__(self) -> int:
        return len(self.items)

    def add(self, exp: Experience) -> None:
        p = self.priorities[: len(self.items)].max() if self.items else 1.0
        if len(self.items) < self.capacity:
            self.items.append(exp)
            self.priorities[len(self.items) - 1] = p
        else:
            self.items[self._next] = exp
            self.priorities[self._next] = p
            self._next = (self._next + 1) % self.capacity

    def update_priorities(self, indices: np.ndarray, new_priorities: np.ndarray) -> None:
        self.priorities[indices] = np.maximum(new_priorities, self.eps)


def replay_sample(
    buffer: ReplayBuffer,
    batch_size: int,
    rng: np.random.Generator,
    beta_is: float = 1.0,
):
    """Priority-proportional sample with importance weights, or None if not ready."""
    n = len(buffer)
    if n < batch_size:
        return None
    p = buffer.priorities[:n] ** buffer.alpha
    probs = p / p.sum()
    indices = rng.choice(n, size=batch_size, replace=True, p=probs)
    weights = (n * probs[indices]) ** (-beta_is)
    weights = weights / ((n * probs.min()) ** (-beta_is))
    return indices, [buffer.items[i] for i in indices], weights


def batched_bellman_targets(
    target_net: ValueNet,
    prediction_net: ValueNet,
    experiences: list[Experience],
    gamma: float,
) -> list[np.ndarray]:
    """Double-Q targets for a whole minibatch in three network passes.

    Next-epoch actions are selected with the prediction net through the
    matcher; the selected post-decision states are evaluated with the
    target net.
    """
    live = [exp for exp in experiences if exp.nxt and not exp.next_is_terminal]
    sel_scores: dict[int, np.ndarray] = {}
    if live:
        stacked = np.concatenate([cs.packed for exp in live for cs in exp.nxt], axis=0)
        # selection must rank by the same objective the target evaluates: r + gamma*V
        values = gamma * prediction_net.forward(stacked)
        pos = 0
        for exp in live:
            n = sum(len(cs.rewards) for cs in exp.nxt)
            sel_scores[id(exp)] = values[pos: pos + n]
            pos += n

    out: list[np.ndarray] = []
    boot_rows: list[np.ndarray] = []
    boot_at: list[tuple[int, int]] = []  # (experience index, courier index)
    for e_idx, exp in enumerate(experiences):
        n_couriers = len(exp.nxt)
        if n_couriers == 0:
            out.append(np.zeros(0))
            continue
        scores = sel_scores.get(id(exp))
        candidates = []
        pos = 0
        for cs in exp.nxt:
            k = len(cs.rewards)
            vals = cs.rewards if scores is None else cs.rewards + scores[pos: pos + k]
            candidates.append([_IPCand(float(v), b) for v, b in zip(vals, cs.batch_ids)])
            pos += k
        assignment = solve_matching(candidates, exp.n_next_orders)
        targets = np.zeros(n_couriers)
        for i, (cs, cand) in enumerate(zip(exp.nxt, assignment.chosen)):
            j = cs.batch_ids.index(cand.batch_ids)
            targets[i] = cs.rewards[j]
            if not exp.next_is_terminal:
                boot_rows.append(cs.packed[j])
                boot_at.append((e_idx, i))
        out.append(targets)

    if boot_rows:
        boot_vals = target_net.forward(np.asarray(boot_rows))
        for (e_idx, i), v in zip(boot_at, boot_vals):
            out[e_idx][i] += gamma * v
    return out


def bellman_targets(
    target_net: ValueNet,
    prediction_net: ValueNet,
    exp: Experience,
    gamma: float,
) -> np.ndarray:
    """Double-Q targets for one experience; see batched_bellman_targets."""
    return batched_bellman_targets(target_net, prediction_net, [exp], gamma)[0]


def weighted_td_loss(net: ValueNet, X: np.ndarray, y: np.ndarray, w: np.ndarray):
    """Importance-weighted MSE, its gradients, and raw residuals."""
    values, cache = net.forward(X, want_cache=True)
    residuals = values - y
    m = len(y)
    loss = float(np.sum(w * residuals**2) / m)
    dvalues = 2.0 * w * residuals / m
    grads = net.backward(cache, dvalues)
    return loss, grads, residuals


def update(
    prediction_net: ValueNet,
    target_net: ValueNet,
    optimizer: Adam,
    experiences: list[Experience],
    is_weights: np.ndarray,
    gamma: float,
    priority_eps: float = 1e-3,
):
    """One gradient step on the chosen candidates of a minibatch.

    Returns the loss and per-experience new priorities (mean |TD error|
    over the experience's couriers, plus a small epsilon).
    """
    if not experiences:
        raise ValueError("minibatch is empty")
    all_targets = batched_bellman_targets(target_net, prediction_net, experiences, gamma)
    rows, targets, weights, slices = [], [], [], []
    pos = 0
    for exp, w, t in zip(experiences, is_weights, all_targets):
        for i, cs in enumerate(exp.cur):
            rows.append(cs.packed[exp.chosen_idx[i]])
            targets.append(t[i])
            weights.append(w)
        slices.append((pos, pos + len(exp.cur)))
        pos += len(exp.cur)

    X = np.asarray(rows)
    y = np.asarray(targets)
    w_arr = np.asarray(weights)
    loss, grads, residuals = weighted_td_loss(prediction_net, X, y, w_arr)
    if not math.isfinite(loss):
        n_bad = int(np.sum(~np.isfinite(y)))
        raise RuntimeError(
            f"non-finite training loss ({loss}); {n_bad}/{len(y)} targets non-finite"
        )
    optimizer.step(prediction_net.params, grads)
    new_priorities = np.array(
        [float(np.mean(np.abs(residuals[a:b]))) + priority_eps for a, b in slices]
    )
    return loss, new_priorities


def sync_target(prediction_net: ValueNet, target_net: ValueNet, mode: str = "hard", tau: float = 1.0) -> None:
    sync_params(prediction_net, target_net, mode=mode, tau=tau)


def perturb_for_exploration(net: ValueNet, sigma: float, seed: int) -> ValueNet:
    """Noisy copy used only for scoring during training episodes."""
    return perturb_params(net, sigma, seed)


class NeurAdpTrainer:
    """Episode hooks implementing the replay-driven Bellman training loop."""

    def __init__(self, cfg: ExperimentConfig, net: ValueNet, seed: int, expected_updates: int):
        self.cfg = cfg
        self.prediction = net
        self.target = net.clone()
        self.averaged = net.clone() if cfg.avg_tau > 0 else None
        self.optimizer = Adam(lr=cfg.learning_rate)
        self.buffer = ReplayBuffer(cfg.replay_capacity, cfg.priority_alpha, cfg.priority_eps)
        self.rng = rng_for(seed, STREAM_REPLAY)
        self.expected_updates = max(1, expected_updates)
        self.updates = 0
        self.episode = 0
        self.sigma = 0.0
        self.log: list[dict] = []
        self._pending: Experience | None = None
        self._seen = 0
        self._matched = 0

    def begin_episode(self, episode: int, sigma: float) -> None:
        self.episode = episode
        self.sigma = sigma
        self._pending = None
        self._seen = 0
        self._matched = 0

    def _beta_is(self) -> float:
        frac = min(1.0, self.updates / self.expected_updates)
        return self.cfg.is_beta_start + (self.cfg.is_beta_end - self.cfg.is_beta_start) * frac

    def on_decision(self, state, fmatches, decision, ctx) -> None:
        diag = decision.diagnostics
        packed = diag.get("packed")
        if packed is None:
            packed = candidate_features(state, fmatches, ctx)
        sets = [
            CandidateSet(
                rewards=np.array([c.immediate_reward for c in cands]),
                packed=np.asarray(rows),
                batch_ids=tuple(c.batch_ids for c in cands),
            )
            for cands, rows in zip(fmatches, packed)
        ]
        self._seen += len(state.orders)
        self._matched += sum(len(c.orders) for c in decision.assignment.chosen)

        if self._pending is not None:
            self._pending.nxt = sets
            self._pending.n_next_orders = len(state.orders)
            self._pending.next_is_terminal = ctx.t == self.cfg.n_epochs - 1
            self.buffer.add(self._pending)
        if ctx.t < self.cfg.n_epochs - 1:
            chosen_idx = diag.get("chosen_idx")
            if chosen_idx is None:
                chosen_idx = [
                    cands.index(next(c for c in cands if c.batch_ids == ch.batch_ids))
                    for cands, ch in zip(fmatches, decision.assignment.chosen)
                ]
            self._pending = Experience(
                t=ctx.t,
                next_is_terminal=False,
                cur=sets,
                chosen_idx=list(chosen_idx),
                nxt=[],
                n_next_orders=0,
            )
        else:
            self._pending = None

        if (
            ctx.t % self.cfg.update_every_epochs == 0
            and len(self.buffer) >= max(self.cfg.min_replay, self.cfg.batch_size)
        ):
            sample = replay_sample(self.buffer, self.cfg.batch_size, self.rng, self._beta_is())
            if sample is None:
                return
            indices, batch, weights = sample
            loss, new_p = update(
                self.prediction,
                self.target,
                self.optimizer,
                batch,
                weights,
                self.cfg.gamma,
                self.cfg.priority_eps,
            )
            self.buffer.update_priorities(indices, new_p)
            self.updates += 1
            if self.updates % self.cfg.target_sync_every == 0:
                sync_target(self.prediction, self.target, mode="hard")
            if self.averaged is not None:
                sync_target(self.prediction, self.averaged, mode="polyak", tau=self.cfg.avg_tau)
            self.log.append(
                {
                    "episode": self.episode,
                    "update": self.updates,
                    "loss": loss,
                    "fill_pct": 100.0 * self._matched / self._seen if self._seen else None,
                    "sigma": self.sigma,
                    "buffer": len(self.buffer),
                }
            )

    def on_episode_end(self, metrics) -> None:
        pass


def exploration_sigma(cfg: ExperimentConfig, episode: int, total_episodes: int) -> float:
    """Linear decay from sigma_start to 0 over the first sigma_decay_frac of training."""
    span = max(1.0, cfg.sigma_decay_frac * total_episodes)
    return cfg.sigma_start * max(0.0, 1.0 - episode / span)


def train_neuradp(
    cfg: ExperimentConfig,
    matrix,
    shift_plan,
    days: list,
    seed: int,
    episodes: int | None = None,
    log_fn=None,
):
    """Full training loop; returns the trained net and the per-update log."""
    from .policies import NeurAdpPolicy
    from .sim import run_episode

    episodes = cfg.train_episodes if episodes is None else episodes
    net = ValueNet(
        matrix.n_locations,
        cfg.queue_max,
        cfg.d_embed,
        cfg.lstm_hidden,
        cfg.head_sizes,
        seed=int(rng_for(seed, STREAM_NET_INIT).integers(2**31)),
    )
    expected_updates = episodes * max(1, cfg.n_epochs // cfg.update_every_epochs)
    trainer = NeurAdpTrainer(cfg, net, seed, expected_updates)
    policy = NeurAdpPolicy(net, gamma=cfg.gamma)
    if not days and episodes > 0:
        raise ValueError("training requires at least one day stream")
    for ep in range(episodes):
        sigma = exploration_sigma(cfg, ep, episodes)
        trainer.begin_episode(ep, sigma)
        if sigma > 0:
            noise_seed = int(rng_for(seed, STREAM_EXPLORE, ep).integers(2**31))
            policy.active = perturb_for_exploration(net, sigma, noise_seed)
        else:
            policy.active = net
        day = days[ep % len(days)]
        metrics = run_episode(policy, day, cfg, matrix, shift_plan, hooks=trainer, audit=False)
        if log_fn is not None:
            log_fn(ep, metrics, trainer)
    policy.active = net
    trained = trainer.averaged if trainer.averaged is not None else net
    return trained, trainer.log
