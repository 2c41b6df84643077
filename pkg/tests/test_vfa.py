import numpy as np
import pytest

from dispatchsim.config import ExperimentConfig
from dispatchsim.feasibility import MatchCandidate, check_match, feasible_matches, null_candidate
from dispatchsim.nn import Adam, ValueNet, params_hash
from dispatchsim.sim import (
    Courier,
    EpochContext,
    Order,
    SystemState,
    compute_beta,
    order_deadline,
)
from dispatchsim.vfa import (
    CandidateSet,
    Experience,
    FeatureVector,
    ReplayBuffer,
    bellman_targets,
    candidate_features,
    exploration_sigma,
    featurize,
    pack_feature,
    perturb_for_exploration,
    project_post,
    replay_sample,
    score_candidates,
    sync_target,
    train_neuradp,
    update,
    value,
    weighted_td_loss,
)


def make_ctx(cfg, matrix, t=60, arrivals=2):
    beta = compute_beta(matrix, cfg.queue_max)
    return EpochContext(t, t * cfg.delta_minutes, matrix, cfg, beta, arrivals)


def stub_net(cfg, matrix, constant=0.0, seed=0):
    net = ValueNet(matrix.n_locations, cfg.queue_max, cfg.d_embed, cfg.lstm_hidden, cfg.head_sizes, seed=seed)
    last = net.n_head_layers - 1
    net.params[f"w{last}"][:] = 0.0
    net.params[f"b{last}"][:] = constant
    return net


class TestFeaturize:
    def test_idle_at_depot(self, small_cfg, small_matrix):
        ctx = make_ctx(small_cfg, small_matrix)
        c = Courier(0.0, 500.0)
        fv = featurize(c, None, [], ctx.t, 3, small_cfg)
        assert fv.queue_part == ()
        assert fv.courier_part[0] == 0.0
        assert fv.courier_part[2] == 1.0
        assert fv.aux_part[3] == 3.0

    def test_identical_couriers_identical_vectors(self, small_cfg, small_matrix):
        ctx = make_ctx(small_cfg, small_matrix)
        c1, c2 = Courier(0.0, 500.0, ret=8.0), Courier(0.0, 500.0, ret=8.0)
        other = Courier(100.0, 460.0, ret=3.0)
        fv1 = featurize(c1, None, [c2, other], ctx.t, 2, small_cfg)
        fv2 = featurize(c2, None, [c1, other], ctx.t, 2, small_cfg)
        assert fv1 == fv2

    def test_slack_matches_independent_recompute(self, small_cfg, small_matrix):
        ctx = make_ctx(small_cfg, small_matrix)
        minute = ctx.minute
        c = Courier(minute - 100.0, minute + 300.0)
        orders = tuple(
            Order(k, k + 1, order_deadline(minute, k + 1, small_matrix, 25.0)) for k in range(2)
        )
        plan = check_match(c, orders, minute, small_matrix, small_cfg)
        cand = MatchCandidate(0, orders, plan, 0.0)
        post = project_post(c, cand, minute, small_cfg, ctx.matrix)
        fv = featurize(post, cand.route, [], ctx.t, 0, small_cfg)
        # recompute drop times from scratch along the chosen sequence
        m = small_matrix.minutes
        t, prev = minute, 0
        drops = {}
        for o in plan.sequence:
            t = t + m[prev, o.dest]
            drops[o.dest] = t
            prev = o.dest
        for dest, slack in fv.queue_part:
            assert slack == pytest.approx(
                dict((o.dest, o.dead) for o in orders)[dest] - drops[dest], abs=1e-9
            )

    def test_pack_dimensions_and_normalization(self, small_cfg):
        fv = FeatureVector(
            queue_part=((2, 36.0),),
            courier_part=(18.0, 180.0, 0.0),
            time_frac=0.25,
            aux_part=(1.0, 2.0, 0.5, 3.0),
        )
        from dispatchsim.vfa import ROUTE_SCALE_MINUTES

        row = pack_feature(fv, small_cfg)
        assert len(row) == 1 + 2 * small_cfg.queue_max + 8
        assert row[0] == 1.0
        assert row[1] == 2.0
        assert row[1 + small_cfg.queue_max] == pytest.approx(36.0 / ROUTE_SCALE_MINUTES)
        assert row[-4] == pytest.approx(1.0 / small_cfg.n_couriers)


class TestValueOp:
    def test_purity_and_zero_head(self, small_cfg, small_matrix):
        net = stub_net(small_cfg, small_matrix, 0.0)
        fv = featurize(Courier(0.0, 500.0), None, [], 10, 0, small_cfg)
        assert value(net, fv, small_cfg) == 0.0
        assert value(net, fv, small_cfg) == value(net, fv, small_cfg)

    def test_nonfinite_output_raises(self, small_cfg, small_matrix):
        net = stub_net(small_cfg, small_matrix, np.inf)
        fv = featurize(Courier(0.0, 500.0), None, [], 10, 0, small_cfg)
        with pytest.raises(RuntimeError, match="non-finite"):
            value(net, fv, small_cfg)

    def test_other_courier_permutation_invariance(self, small_cfg, small_matrix):
        net = ValueNet(small_matrix.n_locations, small_cfg.queue_max, seed=4)
        a = Courier(0.0, 500.0, ret=5.0)
        b = Courier(120.0, 480.0)
        me = Courier(60.0, 420.0)
        f1 = featurize(me, None, [a, b], 30, 1, small_cfg)
        f2 = featurize(me, None, [b, a], 30, 1, small_cfg)
        assert value(net, f1, small_cfg) == value(net, f2, small_cfg)


class TestScoreCandidates:
    def _setup(self, cfg, matrix, n_orders=3):
        minute = 300.0
        couriers = [Courier(minute - 120.0, minute + 240.0) for _ in range(3)]
        couriers[1] = Courier(minute - 120.0, minute + 240.0, ret=9.0)
        orders = [
            Order(k, 1 + k, order_deadline(minute, 1 + k, matrix, 20.0)) for k in range(n_orders)
        ]
        state = SystemState(int(minute / cfg.delta_minutes), couriers, orders)
        beta = compute_beta(matrix, cfg.queue_max)
        fm = feasible_matches(state, matrix, cfg, beta)
        ctx = EpochContext(state.t, minute, matrix, cfg, beta, len(orders))
        return state, fm, ctx

    def test_one_evaluation_per_candidate(self, small_cfg, small_matrix):
        state, fm, ctx = self._setup(small_cfg, small_matrix)
        net = ValueNet(small_matrix.n_locations, small_cfg.queue_max, seed=1)
        scores, packed = score_candidates(net, state, fm, ctx)
        for cands, srow, rows in zip(fm, scores, packed):
            assert len(srow) == len(cands) == len(rows)

    def test_clone_gives_identical_scores(self, small_cfg, small_matrix):
        state, fm, ctx = self._setup(small_cfg, small_matrix)
        net = ValueNet(small_matrix.n_locations, small_cfg.queue_max, seed=2)
        s1, _ = score_candidates(net, state, fm, ctx)
        s2, _ = score_candidates(net.clone(), state, fm, ctx)
        for a, b in zip(s1, s2):
            assert np.array_equal(a, b)

    def test_null_of_idle_courier_scores_advanced_state(self, small_cfg, small_matrix):
        state, fm, ctx = self._setup(small_cfg, small_matrix)
        net = ValueNet(small_matrix.n_locations, small_cfg.queue_max, seed=3)
        scores, _ = score_candidates(net, state, fm, ctx)
        idle = 0  # courier 0 is at the depot with an empty queue
        null_idx = next(j for j, c in enumerate(fm[idle]) if c.orders == ())
        others = [c for i, c in enumerate(state.couriers) if i != idle]
        advanced = Courier(state.couriers[idle].shift_start, state.couriers[idle].shift_end)
        fv = featurize(advanced, None, others, ctx.t, ctx.arrivals_count, small_cfg)
        assert scores[idle][null_idx] == pytest.approx(value(net, fv, small_cfg))


def make_candidate_set(rng, net, cfg, n_cands, rewards=None):
    rows = np.zeros((n_cands, net.feature_dim))
    rows[:, 0] = rng.integers(0, cfg.queue_max + 1, n_cands)
    rows[:, 1: 1 + cfg.queue_max] = rng.integers(1, net.arch["n_locations"], (n_cands, cfg.queue_max))
    rows[:, 1 + cfg.queue_max:] = rng.uniform(0, 0.5, (n_cands, net.feature_dim - 1 - cfg.queue_max))
    if rewards is None:
        rewards = np.round(rng.uniform(0, 50, n_cands), 1)
    rewards = np.asarray(rewards, dtype=float)
    rewards[0] = min(rewards[0], 0.0)  # index 0 is the null candidate
    ids = [()] + [tuple(sorted(rng.choice(6, size=rng.integers(1, 3), replace=False).tolist())) for _ in range(n_cands - 1)]
    return CandidateSet(rewards=rewards, packed=rows, batch_ids=tuple(ids))


def make_experience(rng, net, cfg, n_couriers=2, terminal=False):
    cur = [make_candidate_set(rng, net, cfg, int(rng.integers(2, 5))) for _ in range(n_couriers)]
    nxt = [make_candidate_set(rng, net, cfg, int(rng.integers(2, 5))) for _ in range(n_couriers)]
    chosen = [int(rng.integers(len(cs.rewards))) for cs in cur]
    return Experience(t=5, next_is_terminal=terminal, cur=cur, chosen_idx=chosen, nxt=nxt, n_next_orders=6)


class TestBellmanTargets:
    def test_terminal_is_immediate_reward_only(self, small_cfg, small_matrix):
        rng = np.random.default_rng(0)
        net = ValueNet(small_matrix.n_locations, small_cfg.queue_max, seed=5)
        exp = make_experience(rng, net, small_cfg, terminal=True)
        targets = bellman_targets(net.clone(), net, exp, gamma=1.0)
        for i, cs in enumerate(exp.nxt):
            assert targets[i] in cs.rewards

    def test_gamma_zero_gives_next_rewards(self, small_cfg, small_matrix):
        rng = np.random.default_rng(1)
        net = ValueNet(small_matrix.n_locations, small_cfg.queue_max, seed=6)
        exp = make_experience(rng, net, small_cfg)
        targets = bellman_targets(net.clone(), net, exp, gamma=0.0)
        for i, cs in enumerate(exp.nxt):
            assert targets[i] in cs.rewards

    def test_stub_network_hand_computed(self, small_cfg, small_matrix):
        rng = np.random.default_rng(2)
        vstub = 7.5
        target = stub_net(small_cfg, small_matrix, vstub)
        pred = stub_net(small_cfg, small_matrix, 0.0)
        cs = make_candidate_set(rng, target, small_cfg, 2, rewards=[0.0, 12.0])
        exp = Experience(3, False, [cs], [1], [cs], 6)
        targets = bellman_targets(target, pred, exp, gamma=0.9)
        # one courier, best next candidate has reward 12 -> 12 + 0.9 * 7.5
        assert targets[0] == pytest.approx(12.0 + 0.9 * vstub)


class TestUpdate:
    def test_zero_residual_keeps_parameters(self, small_cfg, small_matrix):
        rng = np.random.default_rng(3)
        pred = stub_net(small_cfg, small_matrix, 0.0, seed=8)
        tgt = stub_net(small_cfg, small_matrix, 0.0, seed=8)
        cs = make_candidate_set(rng, pred, small_cfg, 2, rewards=[0.0, 0.0])
        exp = Experience(3, True, [cs], [0], [CandidateSet(np.array([0.0]), cs.packed[:1], ((),))], 0)
        before = params_hash(pred)
        loss, priorities = update(pred, tgt, Adam(lr=1e-3), [exp], np.array([1.0]), gamma=1.0)
        assert loss == 0.0
        assert params_hash(pred) == before
        assert priorities[0] == pytest.approx(small_cfg.priority_eps)

    def test_overfit_single_sample(self, small_cfg, small_matrix):
        rng = np.random.default_rng(4)
        net = ValueNet(small_matrix.n_locations, small_cfg.queue_max, seed=9)
        X = make_candidate_set(rng, net, small_cfg, 1).packed
        y = np.array([3.0])
        w = np.array([1.0])
        opt = Adam(lr=1e-2)
        loss = None
        for _ in range(400):
            loss, grads, _ = weighted_td_loss(net, X, y, w)
            opt.step(net.params, grads)
        assert loss < 1e-3

    def test_gradcheck_through_update_loss(self, small_cfg, small_matrix):
        rng = np.random.default_rng(5)
        net = ValueNet(12, 3, d_embed=4, lstm_hidden=5, head_sizes=(8,), seed=10)
        X = np.zeros((5, net.feature_dim))
        X[:, 0] = rng.integers(0, 4, 5)
        X[:, 1:4] = rng.integers(1, 12, (5, 3))
        X[:, 4:] = rng.uniform(0, 0.5, (5, net.feature_dim - 4))
        y = rng.normal(0, 3, 5)
        w = rng.uniform(0.5, 1.0, 5)
        loss, grads, _ = weighted_td_loss(net, X, y, w)
        for name, g in grads.items():
            p = net.params[name]
            fi = int(np.argmax(np.abs(g)))
            idx = np.unravel_index(fi, p.shape)
            eps = 1e-4 * max(1.0, abs(p[idx]))
            old = p[idx]
            p[idx] = old + eps
            lp, _, _ = weighted_td_loss(net, X, y, w)
            p[idx] = old - eps
            lm, _, _ = weighted_td_loss(net, X, y, w)
            p[idx] = old
            fd = (lp - lm) / (2 * eps)
            assert abs(g[idx] - fd) <= 1e-4 * max(abs(g[idx]), abs(fd), 1e-6), name

    def test_nonfinite_loss_aborts(self, small_cfg, small_matrix):
        rng = np.random.default_rng(6)
        pred = stub_net(small_cfg, small_matrix, 0.0)
        tgt = stub_net(small_cfg, small_matrix, np.nan)
        cs = make_candidate_set(rng, pred, small_cfg, 2)
        exp = Experience(3, False, [cs], [0], [cs], 6)
        with pytest.raises(RuntimeError, match="non-finite"):
            update(pred, tgt, Adam(), [exp], np.array([1.0]), gamma=1.0)


class TestSyncAndNoise:
    def test_hard_sync(self, small_cfg, small_matrix):
        a = ValueNet(small_matrix.n_locations, small_cfg.queue_max, seed=1)
        b = ValueNet(small_matrix.n_locations, small_cfg.queue_max, seed=2)
        sync_target(a, b, mode="hard")
        assert params_hash(a) == params_hash(b)

    def test_perturb_sigma_zero(self, small_cfg, small_matrix):
        a = ValueNet(small_matrix.n_locations, small_cfg.queue_max, seed=1)
        assert params_hash(perturb_for_exploration(a, 0.0, 5)) == params_hash(a)

    def test_sigma_schedule(self, small_cfg):
        cfg = small_cfg.replaced(sigma_start=0.1, sigma_decay_frac=0.6)
        assert exploration_sigma(cfg, 0, 100) == pytest.approx(0.1)
        assert exploration_sigma(cfg, 30, 100) == pytest.approx(0.05)
        assert exploration_sigma(cfg, 60, 100) == 0.0
        assert exploration_sigma(cfg, 90, 100) == 0.0


class TestReplay:
    def _filled_buffer(self, n=50, priority=None):
        buf = ReplayBuffer(capacity=64, alpha=0.6, eps=1e-3)
        rng = np.random.default_rng(0)
        net = ValueNet(8, 3, d_embed=2, lstm_hidden=3, head_sizes=(4,), seed=0)
        cfg = ExperimentConfig(queue_max=3, n_locations=8)
        for k in range(n):
            buf.add(make_experience(rng, net, cfg, n_couriers=1))
        if priority is not None:
            buf.priorities[:n] = priority
        return buf

    def test_uniform_priorities_give_unit_weights(self):
        buf = self._filled_buffer(40)
        _, _, weights = replay_sample(buf, 16, np.random.default_rng(1), beta_is=0.7)
        assert np.allclose(weights, 1.0)

    def test_alpha_zero_is_uniform_sampling(self):
        buf = self._filled_buffer(40)
        buf.alpha = 0.0
        buf.priorities[:40] = np.linspace(0.1, 10.0, 40)
        rng = np.random.default_rng(2)
        counts = np.zeros(40)
        for _ in range(300):
            idx, _, _ = replay_sample(buf, 16, rng, beta_is=1.0)
            counts[idx] += 1
        from scipy import stats

        assert stats.chisquare(counts).pvalue >= 0.01

    def test_sampling_frequencies_follow_priorities(self):
        buf = self._filled_buffer(8)
        buf.priorities[:8] = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
        rng = np.random.default_rng(3)
        draws = np.zeros(8)
        for _ in range(2000):
            idx, _, _ = replay_sample(buf, 8, rng, beta_is=1.0)
            for i in idx:
                draws[i] += 1
        from scipy import stats

        p = buf.priorities[:8] ** buf.alpha
        expected = p / p.sum() * draws.sum()
        assert stats.chisquare(draws, expected).pvalue >= 0.01

    def test_underfilled_buffer_not_ready(self):
        buf = self._filled_buffer(5)
        assert replay_sample(buf, 16, np.random.default_rng(0)) is None

    def test_ring_overwrite(self):
        buf = self._filled_buffer(64)
        first = buf.items[0]
        rng = np.random.default_rng(9)
        net = ValueNet(8, 3, d_embed=2, lstm_hidden=3, head_sizes=(4,), seed=0)
        cfg = ExperimentConfig(queue_max=3, n_locations=8)
        buf.add(make_experience(rng, net, cfg, n_couriers=1))
        assert len(buf) == 64
        assert buf.items[0] is not first


class TestTrainingLoop:
    def test_two_runs_identical_parameters(self, small_cfg, small_matrix, small_plan, small_days):
        cfg = small_cfg.replaced(train_episodes=2, min_replay=48)
        net1, log1 = train_neuradp(cfg, small_matrix, small_plan, small_days[:1], seed=5)
        net2, log2 = train_neuradp(cfg, small_matrix, small_plan, small_days[:1], seed=5)
        assert params_hash(net1) == params_hash(net2)
        assert log1 == log2
        assert len(log1) > 0

    def test_target_changes_only_at_sync(self, small_cfg, small_matrix, small_plan, small_days):
        from dispatchsim.vfa import NeurAdpTrainer
        from dispatchsim.policies import NeurAdpPolicy
        from dispatchsim.sim import run_episode

        cfg = small_cfg.replaced(train_episodes=1, min_replay=32, target_sync_every=10**9)
        net = ValueNet(small_matrix.n_locations, cfg.queue_max, seed=3)
        trainer = NeurAdpTrainer(cfg, net, seed=0, expected_updates=100)
        target_before = params_hash(trainer.target)
        trainer.begin_episode(0, 0.0)
        policy = NeurAdpPolicy(net)
        run_episode(policy, small_days[0], cfg, small_matrix, small_plan, hooks=trainer, audit=False)
        assert trainer.updates > 0
        assert params_hash(trainer.target) == target_before  # stale until a sync point
        assert params_hash(trainer.prediction) != target_before
        sync_target(trainer.prediction, trainer.target)
        assert params_hash(trainer.target) == params_hash(trainer.prediction)
