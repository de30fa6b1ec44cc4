import numpy as np
import pytest

from feudal.agent import AgentConfig, FeudalNet
from feudal.baseline import (BaselineConfig, BaselineLearner, BaselineNet, count_parameters,
                             match_hidden)
from feudal.envs import ChainSpec, TMazeSpec, make_env
from feudal.gradcheck import check_baseline
from feudal.training import FeudalLearner, TrainConfig


def test_config_rules():
    assert BaselineConfig(3, 2, recurrent_kind="lstm", r=5).r == 1
    assert BaselineConfig(3, 2, recurrent_kind="dlstm", r=5).r == 5
    with pytest.raises(ValueError):
        BaselineConfig(3, 2, recurrent_kind="gru")
    with pytest.raises(ValueError):
        BaselineConfig(3, 0)


@pytest.mark.parametrize("kind", ["lstm", "dlstm"])
def test_zero_policy_head_gives_uniform_pi(kind):
    net = BaselineNet(BaselineConfig(5, 3, hidden=6, percept_hidden=4, recurrent_kind=kind, r=3))
    for p in net.policy.params.values():
        p.fill(0.0)
    state = net.initial_state(4)
    rng = np.random.default_rng(0)
    for _ in range(5):
        pi, v, _ = net.step(rng.standard_normal((4, 5)), np.zeros((4, 3)), state)
        assert np.array_equal(pi, np.full((4, 3), 1 / 3)) and v.shape == (4,)


def test_unroll_finite_differences():
    assert check_baseline(np.random.default_rng(1), cases=100).worst < 1e-5


@pytest.mark.parametrize("obs_dim,actions,hidden,percept,kind", [
    (3, 2, 1, 1, "lstm"), (8, 4, 17, 9, "dlstm"), (30, 4, 99, 64, "lstm")])
def test_parameter_count_is_exact(obs_dim, actions, hidden, percept, kind):
    cfg = BaselineConfig(obs_dim, actions, hidden=hidden, percept_hidden=percept, recurrent_kind=kind)
    assert count_parameters(cfg) == BaselineNet(cfg).num_parameters()


@pytest.mark.parametrize("spec", [TMazeSpec(), ChainSpec()], ids=["tmaze", "chain"])
@pytest.mark.parametrize("kind", ["lstm", "dlstm"])
def test_matched_size_within_five_percent(spec, kind):
    env = make_env(spec)
    agent_cfg = AgentConfig(env.obs_dim, env.num_actions)
    target = FeudalNet(agent_cfg).num_parameters()
    cfg = match_hidden(agent_cfg, kind, r=10)
    assert abs(BaselineNet(cfg).num_parameters() - target) <= 0.05 * target
    gap = lambda h: abs(count_parameters(BaselineConfig(
        env.obs_dim, env.num_actions, hidden=h, recurrent_kind=kind, r=10)) - target)
    assert gap(cfg.hidden) <= min(gap(cfg.hidden - 1), gap(cfg.hidden + 1))


def test_dilated_core_isolation():
    cfg = BaselineConfig(4, 2, hidden=5, percept_hidden=3, recurrent_kind="dlstm", r=3)
    net = BaselineNet(cfg, seed=2)
    state = net.initial_state(1)
    rng = np.random.default_rng(3)
    for t in range(7):
        before = state.h.copy(), state.c.copy()
        net.step(rng.standard_normal((1, 4)), np.zeros((1, 2)), state)
        others = [i for i in range(3) if i != t % 3]
        assert np.array_equal(state.h[:, others], before[0][:, others])
        assert np.array_equal(state.c[:, others], before[1][:, others])


def _tcfg(**kw):
    base = dict(bptt_len=10, num_envs=3, seed=5, total_steps=1000)
    base.update(kw)
    return TrainConfig(**base)


def test_interface_parity_with_fun():
    spec = TMazeSpec(corridor_len=2, trials=2)
    env = make_env(spec)
    fun = FeudalLearner(FeudalNet(AgentConfig(env.obs_dim, env.num_actions, c=3, r=3)), spec, _tcfg())
    base = BaselineLearner(BaselineNet(BaselineConfig(env.obs_dim, env.num_actions)), spec, _tcfg())
    assert np.array_equal(fun.envs.obs, base.envs.obs)
    rng = np.random.default_rng(6)
    for _ in range(200):
        a = rng.integers(env.num_actions, size=3)
        for x, y in zip(fun.envs.step(a), base.envs.step(a)):
            assert np.array_equal(x, y)
        assert np.array_equal(fun.envs.obs, base.envs.obs)


def test_previous_action_cleared_at_episode_start():
    spec = ChainSpec(length=1, cap=1)  # every step ends the episode
    learner = BaselineLearner(BaselineNet(BaselineConfig(2, 2, hidden=4)), spec, _tcfg())
    learner.train_segment()
    assert not learner.prev_action.any()
    spec = ChainSpec(length=50)
    learner = BaselineLearner(BaselineNet(BaselineConfig(51, 2, hidden=4)), spec, _tcfg())
    learner.train_segment()
    assert np.array_equal(learner.prev_action.sum(axis=1), np.ones(3))


def test_training_is_deterministic_and_reports_metrics():
    spec = ChainSpec(length=4)

    def run():
        learner = BaselineLearner(BaselineNet(BaselineConfig(5, 2, hidden=8), seed=1), spec, _tcfg())
        metrics = [learner.train_segment() for _ in range(4)]
        return learner.agent, metrics

    (a, ma), (b, mb) = run(), run()
    for (_, p, _), (_, q, _) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(p, q)
    assert ma == mb
    fun = FeudalLearner(FeudalNet(AgentConfig(5, 2, c=3, r=3)), spec, _tcfg())
    assert set(ma[0]) == set(fun.train_segment())


def test_learns_short_chain():
    spec = ChainSpec(length=4)
    learner = BaselineLearner(BaselineNet(BaselineConfig(5, 2, hidden=16), seed=0), spec,
                              _tcfg(num_envs=8, bptt_len=20, learning_rate=3e-3))
    returns = []
    for _ in range(150):
        returns += learner.train_segment()["episode_returns"]
    assert np.mean(returns[-100:]) > 0.9
