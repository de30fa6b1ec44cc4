import numpy as np
import pytest

from feudal import nn
from feudal.agent import AgentConfig, FeudalNet
from feudal.envs import ChainSpec, TMazeSpec
from feudal.gradcheck import check_critics, check_manager_path, check_worker_path
from feudal.training import (
    FeudalLearner, TrainConfig, _horizon_masks, clip_reward, compute_returns,
    intrinsic_reward, manager_goal_grad, transition_pg_equivalence_check,
)


# -- returns -----------------------------------------------------------------

def test_returns_examples():
    r = compute_returns(np.array([[0.0], [0.0], [1.0]]), 0.9, 0.0)
    assert np.allclose(r[:, 0], [0.81, 0.9, 1.0], rtol=0, atol=1e-15)
    rew = np.random.default_rng(0).standard_normal((6, 2))
    assert np.array_equal(compute_returns(rew, 0.0, 5.0), rew)


def test_returns_match_brute_force_with_terminals():
    rng = np.random.default_rng(1)
    for _ in range(50):
        T, gamma, boot = int(rng.integers(1, 12)), float(rng.uniform()), float(rng.standard_normal())
        rew = rng.standard_normal((T, 1))
        term = rng.random((T, 1)) < 0.2
        got = compute_returns(rew, gamma, boot, term)[:, 0]
        for t in range(T):
            acc, disc, cut = 0.0, 1.0, False
            for u in range(t, T):
                acc += disc * rew[u, 0]
                disc *= gamma
                if term[u, 0]:
                    cut = True
                    break
            if not cut:
                acc += disc * boot
            assert got[t] == pytest.approx(acc, abs=1e-12)


# -- intrinsic reward --------------------------------------------------------------

def _history(latents, goals, c):
    """Lookback arrays as seen when arriving at latents[-1]."""
    n = len(latents) - 1
    lat = np.zeros((c, latents.shape[1]))
    gl = np.zeros_like(lat)
    valid = np.zeros(c, dtype=bool)
    for i in range(1, min(c, n) + 1):
        lat[i - 1] = latents[n - i]
        gl[i - 1] = goals[n - i]
        valid[i - 1] = True
    return lat, gl, valid


def test_intrinsic_reward_follows_goals_exactly():
    c, d = 4, 5
    rng = np.random.default_rng(2)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    latents = np.array([t * direction for t in range(12)])
    goals = np.tile(direction, (12, 1))
    for t in range(1, 12):
        lat, gl, valid = _history(latents[:t + 1], goals, c)
        assert intrinsic_reward(latents[t], lat, gl, valid, c) == pytest.approx(min(c, t) / c, abs=1e-12)


def test_intrinsic_reward_zero_without_movement_and_oracle():
    c, d = 3, 4
    rng = np.random.default_rng(3)
    s = np.ones(d)
    goals = rng.standard_normal((6, d))
    lat, gl, valid = _history(np.tile(s, (6, 1)), goals, c)
    assert intrinsic_reward(s, lat, gl, valid, c) == 0.0
    latents = rng.standard_normal((8, d))
    goals = rng.standard_normal((8, d))
    lat, gl, valid = _history(latents, goals, c)
    ref = sum(nn.cosine_similarity(latents[7] - latents[7 - i], goals[7 - i]) for i in range(1, c + 1)) / c
    assert intrinsic_reward(latents[7], lat, gl, valid, c) == pytest.approx(ref, abs=1e-14)


# -- manager rule ---------------------------------------------------------------

def test_manager_goal_grad_properties():
    rng = np.random.default_rng(4)
    target = rng.standard_normal(6)
    assert not manager_goal_grad(target, rng.standard_normal(6), 0.0).any()
    for _ in range(100):
        target = rng.standard_normal(6)
        g = target * float(rng.uniform(0.1, 3.0))
        dg = manager_goal_grad(target, g, float(rng.standard_normal()))
        assert abs(float(dg @ g)) < 1e-10
        g = rng.standard_normal(6)
        dg = manager_goal_grad(target, g, float(rng.standard_normal()))
        assert abs(float(dg @ g)) < 1e-10


def test_manager_worker_critic_finite_differences():
    rng = np.random.default_rng(5)
    assert check_manager_path(rng, cases=100).worst < 1e-5
    assert check_worker_path(rng, cases=100).worst < 1e-5
    assert check_critics(rng, cases=100).worst < 1e-5


def test_worker_policy_gradient_zero_and_sign():
    pi = np.array([[0.3, 0.7]])
    assert not nn.policy_loss_grad(pi, np.array([1]), np.array([0.0]), 0.0).any()
    d = nn.policy_loss_grad(pi, np.array([0]), np.array([1.0]), 0.0)
    # a descent step on the loss raises the logit of the rewarded action
    assert d[0, 0] < 0 < d[0, 1]


def test_critic_hand_derivative():
    # d/dV of 1/2 (V - R)^2 at V=0, R=2
    assert (0.0 - 2.0) == -2.0
    cfg = AgentConfig(obs_dim=3, num_actions=2, d=4, k=2, c=2, r=2,
                      percept_hidden=4, worker_hidden=3, manager_hidden=3)
    agent = FeudalNet(cfg, seed=0)
    state = agent.initial_state(1)
    out = agent.step(np.ones((1, 3)), state)
    agent.zero_grads()
    zeros = np.zeros((1, 1, 2))
    agent.backward([out.cache], zeros, None, np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
    assert all(not g.any() for _, _, g in agent.named_parameters())


def _tiny(mode="full_fun", **kw):
    base = dict(obs_dim=5, num_actions=2, d=6, k=3, c=3, r=2,
                percept_hidden=8, worker_hidden=6, manager_hidden=7, mode=mode)
    base.update(kw)
    return FeudalNet(AgentConfig(**base), seed=1)


def test_gradient_isolation():
    agent = _tiny()
    state = agent.initial_state(2)
    xs = np.random.default_rng(6).standard_normal((8, 2, 5))
    outs = [agent.step(x, state) for x in xs]
    caches = [o.cache for o in outs]
    # worker signal only: nothing reaches the Manager's recurrent core or goal head
    agent.zero_grads()
    pi = np.stack([o.pi for o in outs])
    agent.backward(caches, nn.policy_loss_grad(pi, np.zeros((8, 2), dtype=int), np.ones((8, 2))))
    for name in ("manager_rnn", "goal_head"):
        assert all(not g.any() for g in agent.modules()[name].grads.values())
    # manager signal only: U head and phi stay untouched
    agent.zero_grads()
    d_goals = np.random.default_rng(7).standard_normal((8, 2, 6))
    agent.backward(caches, np.zeros((8, 2, 2)), d_goals)
    for name in ("u_head", "phi", "worker_rnn"):
        assert all(not g.any() for g in agent.modules()[name].grads.values())
    assert any(g.any() for g in agent.modules()["manager_rnn"].grads.values())


def test_non_feudal_worker_gradient_reaches_manager():
    agent = _tiny("non_feudal")
    state = agent.initial_state(1)
    xs = np.random.default_rng(8).standard_normal((6, 1, 5))
    outs = [agent.step(x, state) for x in xs]
    agent.zero_grads()
    pi = np.stack([o.pi for o in outs])
    agent.backward([o.cache for o in outs], nn.policy_loss_grad(pi, np.zeros((6, 1), dtype=int), np.ones((6, 1))))
    assert any(g.any() for g in agent.modules()["manager_rnn"].grads.values())


# -- horizon bookkeeping ------------------------------------------------------------

def test_horizon_masks_brute_force():
    rng = np.random.default_rng(9)
    for _ in range(200):
        K, B, c = int(rng.integers(1, 12)), 2, int(rng.integers(1, 5))
        term = rng.random((K, B)) < 0.15
        resolved, pending = _horizon_masks(term, c)
        for t in range(K):
            for b in range(B):
                end = t + c - 1
                alive = not term[t:min(end, K), b].any()
                assert resolved[t, b] == (end < K and alive)
                assert pending[t, b] == (end >= K and not term[t:, b].any())


def test_manager_targets_are_c_steps_ahead():
    spec = ChainSpec(length=40, cap=200)
    agent = _tiny(c=3, obs_dim=41, epsilon_goal=0.0)
    learner = FeudalLearner(agent, spec, TrainConfig(bptt_len=12, num_envs=2, seed=3))
    learner.train_segment()
    seg = learner.last["segment"]
    lat = np.stack([ch["s"] for ch in seg["caches"]])
    # s_next[t + c - 1] is the latent the agent sees at step t + c
    c = 3
    for t in range(12 - c):
        assert np.array_equal(seg["s_next"][t + c - 1], lat[t + c])


def test_zero_reward_segment_changes_nothing_but_intrinsic_critic():
    spec = ChainSpec(length=60, cap=500)
    for mode in ("full_fun", "non_feudal"):
        agent = _tiny(mode, obs_dim=61, epsilon_goal=0.0, alpha=0.0)
        for head in (agent.value_manager, agent.value_ext, agent.value_int):
            for p in head.params.values():
                p.fill(0.0)
        before = {n: p.copy() for n, p, _ in agent.named_parameters()}
        learner = FeudalLearner(agent, spec, TrainConfig(bptt_len=10, entropy_weight=0.0, seed=4))
        learner.train_segment()
        assert not learner.last["segment"]["rewards"].any()
        changed = {n for n, p, _ in agent.named_parameters() if not np.array_equal(p, before[n])}
        if mode == "non_feudal":
            assert changed == set()
        else:
            # only the intrinsic critic (and the trunks feeding it) may move
            assert not any(n.startswith(("u_head", "phi", "goal_head", "manager_rnn",
                                         "value_manager", "value_ext")) for n in changed)


def test_reward_clipping_recorded():
    assert clip_reward(5.0) == 1.0 and clip_reward(-3.0) == -1.0
    spec = ChainSpec(length=2, cap=8)
    agent = _tiny(obs_dim=3)
    learner = FeudalLearner(agent, spec, TrainConfig(bptt_len=20, seed=5))
    raw_step = learner.envs.step

    def scaled(actions):
        obs, rew, term = raw_step(actions)
        return obs, 5.0 * rew, term

    learner.envs.step = scaled
    learner.train_segment()
    rew = learner.last["segment"]["rewards"]
    assert rew.max() == 1.0 and set(np.unique(rew)) <= {0.0, 1.0}


def test_dual_discount_agreement():
    spec = ChainSpec(length=3, cap=12)
    agent = _tiny(obs_dim=4, alpha=0.0, gamma_worker=0.97, gamma_manager=0.97)
    learner = FeudalLearner(agent, spec, TrainConfig(bptt_len=15, seed=6))
    learner.train_segment()
    last = learner.last
    term = last["segment"]["terminals"]
    # same rewards and discount; only the critic used to bootstrap at the cut differs
    diff = last["R_E"] - last["R_M"]
    K = term.shape[0]
    for b in range(term.shape[1]):
        for t in range(K):
            if term[t:, b].any():
                assert diff[t, b] == 0.0
        alive = [t for t in range(K) if not term[t:, b].any()]
        if len(alive) > 1:
            ratios = [diff[t, b] / diff[t + 1, b] for t in alive[:-1]]
            assert np.allclose(ratios, 0.97, rtol=1e-9)


def test_training_is_deterministic():
    def run():
        agent = _tiny(obs_dim=8, num_actions=4)
        learner = FeudalLearner(agent, TMazeSpec(corridor_len=2, trials=2),
                                TrainConfig(bptt_len=10, num_envs=2, seed=7))
        out = [learner.train_segment() for _ in range(5)]
        return out, [p.copy() for _, p, _ in agent.named_parameters()]

    (m1, p1), (m2, p2) = run(), run()
    assert m1 == m2
    assert all(np.array_equal(a, b) for a, b in zip(p1, p2))


def test_bptt_shorter_than_horizon_rejected():
    with pytest.raises(ValueError):
        FeudalLearner(_tiny(obs_dim=4, c=3), ChainSpec(length=3), TrainConfig(bptt_len=2))


# -- transition policy gradient -------------------------------------------------------

def test_tpg_zero_advantage_and_shared_cosine():
    agent = _tiny(c=2)
    xs = np.random.default_rng(10).standard_normal((7, 2, 5))
    rep = transition_pg_equivalence_check(agent, xs, np.zeros((7, 2)))
    assert rep["gradient_norm"] == 0.0 and rep["max_abs_deviation"] == 0.0
    state = agent.initial_state(2)
    outs = [agent.step(x, state) for x in xs]
    lat = np.stack([o.latent for o in outs])
    goals = np.stack([o.goal for o in outs])
    for t in range(rep["steps"]):
        # the i = c term of the intrinsic reward at step t + c
        valid = np.array([[False, True]] * 2)
        past_l = np.stack([lat[t + 1], lat[t]], axis=1)
        past_g = np.stack([goals[t + 1], goals[t]], axis=1)
        r = intrinsic_reward(lat[t + 2], past_l, past_g, valid, 2)
        assert np.allclose(rep["d_cos"][t], 2 * r, rtol=0, atol=1e-15)


def test_tpg_equivalence_random_instances():
    rng = np.random.default_rng(11)
    for _ in range(50):
        agent = _tiny(c=int(rng.integers(1, 4)), r=int(rng.integers(1, 4)))
        xs = rng.standard_normal((9, 2, 5))
        rep = transition_pg_equivalence_check(agent, xs, rng.standard_normal((9, 2)))
        assert rep["max_abs_deviation"] < 1e-10
        assert rep["gradient_norm"] > 0
