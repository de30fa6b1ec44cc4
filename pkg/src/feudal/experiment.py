"""Glue between configs, learners and evaluation rollouts."""

import dataclasses
import logging

import numpy as np

from .agent import AgentConfig, FeudalNet
from .baseline import BaselineLearner, BaselineNet
from .envs import make_env, optimal_return
from .report import MetricsLog
from .training import FeudalLearner, act

log = logging.getLogger(__name__)

ABLATIONS = ("non_feudal", "absolute_goals", "c1", "no_dilation", "alpha_sweep")
ALPHA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def build_model(agent_config, seed):
    if isinstance(agent_config, AgentConfig):
        return FeudalNet(agent_config, seed=seed)
    return BaselineNet(agent_config, seed=seed)


def build_learner(model, env_spec, train_config):
    if isinstance(model, FeudalNet):
        return FeudalLearner(model, env_spec, train_config)
    return BaselineLearner(model, env_spec, train_config)


def train_run(agent_config, env_spec, train_config, seed, on_row=None):
    """Train one seed; returns (model, metric rows)."""
    tcfg = dataclasses.replace(train_config, seed=seed)
    model = build_model(agent_config, seed)
    learner = build_learner(model, env_spec, tcfg)
    metrics = MetricsLog(tcfg.eval_interval)
    while learner.steps < tcfg.total_steps:
        row = metrics.add(learner.train_segment())
        if row is not None:
            log.info("seed %d step %d return %s", seed, row["step"], row["return"])
            if on_row is not None:
                on_row(row)
    return model, metrics.rows


def with_mode(agent_config, mode):
    """Apply a ``train --mode`` override to a FuN config."""
    if not isinstance(agent_config, AgentConfig):
        raise ValueError("modes apply to the FuN agent only")
    return dataclasses.replace(agent_config, mode=mode)


def ablation_variants(agent_config, name):
    """List of (tag, AgentConfig) pairs for one ablation name."""
    if not isinstance(agent_config, AgentConfig):
        raise ValueError("ablations apply to the FuN agent only")
    rep = dataclasses.replace
    if name == "non_feudal":
        return [("non_feudal", rep(agent_config, mode="non_feudal"))]
    if name == "absolute_goals":
        return [("absolute_goals", rep(agent_config, mode="absolute_goals"))]
    if name == "c1":
        return [("c1", rep(agent_config, c=1))]
    if name == "no_dilation":
        return [("no_dilation", rep(agent_config, mode="no_dilation"))]
    if name == "alpha_sweep":
        return [(f"alpha{a:g}", rep(agent_config, alpha=a)) for a in ALPHA_GRID]
    raise ValueError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")


# --------------------------------------------------------------------------
# evaluation policies: begin(batch), probs(obs) -> pi, observe(actions, done)

class UniformPolicy:
    def __init__(self, num_actions):
        self.num_actions = num_actions

    def begin(self, batch):
        pass

    def probs(self, obs):
        return np.full((len(obs), self.num_actions), 1.0 / self.num_actions)

    def observe(self, actions, done):
        pass


class ScriptedPolicy:
    """Deterministic policy from a function of (env, obs) -> action; the
    evaluator hands over the live environments."""

    def __init__(self, num_actions, choose):
        self.num_actions = num_actions
        self.choose = choose
        self.envs = None

    def begin(self, batch):
        pass

    def probs(self, obs):
        pi = np.zeros((len(obs), self.num_actions))
        for i, (env, o) in enumerate(zip(self.envs, obs)):
            pi[i, self.choose(env, o)] = 1.0
        return pi

    def observe(self, actions, done):
        pass


class FunPolicy:
    def __init__(self, agent):
        self.agent = agent

    def begin(self, batch):
        self.state = self.agent.initial_state(batch)

    def probs(self, obs):
        # no exploration goals at evaluation time
        return self.agent.step(obs, self.state, None).pi

    def observe(self, actions, done):
        if done.any():
            self.state.reset(done)


class BaselinePolicy:
    def __init__(self, net):
        self.net = net

    def begin(self, batch):
        self.state = self.net.initial_state(batch)
        self.prev = np.zeros((batch, self.net.config.num_actions))

    def probs(self, obs):
        return self.net.step(obs, self.prev, self.state)[0]

    def observe(self, actions, done):
        self.prev = np.eye(self.net.config.num_actions)[actions]
        if done.any():
            self.state.reset(done)
            self.prev[done] = 0.0


def policy_for(model):
    return FunPolicy(model) if isinstance(model, FeudalNet) else BaselinePolicy(model)


def evaluate(policy, env_spec, episodes, seed=0, greedy=False, batch=16):
    """Roll out ``episodes`` episodes; returns a summary dict.

    Environment ``i`` of the batch plays episodes ``i, i+batch, ...`` so
    the set of episodes played does not depend on their lengths.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    B = min(batch, episodes)
    quota = [len(range(i, episodes, B)) for i in range(B)]
    seeds = np.random.SeedSequence(seed).spawn(B + 1)
    rng = np.random.default_rng(seeds[0])
    envs = [make_env(env_spec) for _ in range(B)]
    obs = np.stack([env.reset(int(s.generate_state(1)[0])) for env, s in zip(envs, seeds[1:])])
    if isinstance(policy, ScriptedPolicy):
        policy.envs = envs
    policy.begin(B)
    returns = [[] for _ in range(B)]
    running = np.zeros(B)
    active = np.ones(B, dtype=bool)
    while active.any():
        pi = policy.probs(obs)
        a = np.argmax(pi, axis=-1) if greedy else act(pi, rng)
        done = np.zeros(B, dtype=bool)
        for i in np.flatnonzero(active):
            out = envs[i].step(int(a[i]))
            running[i] += out.reward
            obs[i] = out.observation
            if out.terminal:
                done[i] = True
                returns[i].append(running[i])
                running[i] = 0.0
                if len(returns[i]) == quota[i]:
                    active[i] = False
                else:
                    obs[i] = envs[i].reset()
        policy.observe(a, done)
    flat = [r for rs in returns for r in rs]
    mean = float(np.mean(flat))
    best = optimal_return(env_spec)
    return {
        "episodes": len(flat),
        "mean_return": mean,
        "std_return": float(np.std(flat)),
        "optimal_return": best,
        "ratio_to_optimal": mean / best if best else float("nan"),
    }
