"""Flat recurrent baselines trained with advantage actor-critic.

The input to the recurrent core is the perceptual feature vector joined
with a one-hot of the previous action (zero at episode start). The core is
an LSTM or a dilated LSTM; both share the ``DilatedLSTM`` implementation.
"""

from dataclasses import dataclass, asdict

import numpy as np

from .agent import DilatedLSTM
from .nn import RMSProp, Linear, entropy, policy_loss_grad, relu, softmax
from .training import VecEnv, act, clip_reward, compute_returns

KINDS = ("lstm", "dlstm")


@dataclass
class BaselineConfig:
    obs_dim: int
    num_actions: int
    hidden: int = 96
    percept_hidden: int = 64
    recurrent_kind: str = "lstm"
    r: int = 1
    gamma: float = 0.99
    clip_rewards: bool = True

    def __post_init__(self):
        if self.recurrent_kind not in KINDS:
            raise ValueError(f"recurrent_kind must be one of {KINDS}")
        if self.recurrent_kind == "lstm":
            self.r = 1
        for name in ("obs_dim", "num_actions", "hidden", "percept_hidden", "r"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma outside [0, 1]")

    def to_dict(self):
        return asdict(self)


def count_parameters(config):
    """Exact parameter count of a ``BaselineNet`` built from ``config``."""
    P, H, A = config.percept_hidden, config.hidden, config.num_actions
    percept = config.obs_dim * P + P
    core = 4 * H * (P + A) + 4 * H * H + 4 * H
    heads = H * A + A + H + 1
    return percept + core + heads


def match_hidden(agent_config, recurrent_kind="lstm", tolerance=0.05, **kw):
    """Baseline config whose parameter count is closest to the FuN agent
    described by ``agent_config``; raises if none is within ``tolerance``."""
    from .agent import FeudalNet

    target = FeudalNet(agent_config).num_parameters()
    best = None
    for hidden in range(1, 4096):
        cfg = BaselineConfig(agent_config.obs_dim, agent_config.num_actions, hidden=hidden,
                             percept_hidden=agent_config.percept_hidden,
                             recurrent_kind=recurrent_kind, **kw)
        n = count_parameters(cfg)
        if best is None or abs(n - target) < abs(best[1] - target):
            best = (cfg, n)
        if n > target:
            break
    cfg, n = best
    if abs(n - target) > tolerance * target:
        raise ValueError(f"no hidden size within {tolerance:.0%} of {target} parameters")
    return cfg


class BaselineNet:
    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        P, H, A = config.percept_hidden, config.hidden, config.num_actions
        self.percept = Linear(config.obs_dim, P, rng=rng)
        self.rnn = DilatedLSTM(P + A, H, config.r, rng)
        self.policy = Linear(H, A, rng=rng)
        self.value = Linear(H, 1, rng=rng)

    def modules(self):
        return {"percept": self.percept, "rnn": self.rnn.cell,
                "policy": self.policy, "value": self.value}

    def named_parameters(self):
        for name, m in self.modules().items():
            yield from m.named_parameters(name + ".")

    def zero_grads(self):
        for m in self.modules().values():
            m.zero_grads()

    def num_parameters(self):
        return sum(p.size for _, p, _ in self.named_parameters())

    def initial_state(self, batch=1):
        return self.rnn.initial_state(batch)

    def step(self, x, prev_action, state):
        """One step for a batch; ``prev_action`` is a (B, A) one-hot (zeros
        at episode start). Returns (pi, value, cache)."""
        x = np.asarray(x, dtype=float)
        z = relu(self.percept.forward(x))
        inp = np.concatenate([z, prev_action], axis=-1)
        y, rcache = self.rnn.step(inp, state)
        logits = self.policy.forward(y)
        pi = softmax(logits)
        v = self.value.forward(y)[:, 0]
        return pi, v, {"x": x, "z": z, "y": y, "rnn": rcache, "pi": pi, "v": v}

    def backward(self, caches, d_logits, d_v):
        T = len(caches)
        P = self.config.percept_hidden
        dys = []
        for t in range(T):
            y = caches[t]["y"]
            dy = self.policy.backward(y, d_logits[t])
            dy = dy + self.value.backward(y, d_v[t][:, None])
            dys.append(dy)
        dinps = self.rnn.backward([ch["rnn"] for ch in caches], dys)
        xs = np.stack([ch["x"] for ch in caches])
        zs = np.stack([ch["z"] for ch in caches])
        dz = np.stack(dinps)[..., :P] * (zs > 0)
        self.percept.backward(xs, dz)


class BaselineLearner:
    """Synchronous advantage actor-critic for ``BaselineNet``."""

    def __init__(self, agent, env_spec, train_config):
        self.agent = agent
        self.cfg = agent.config
        self.tcfg = train_config
        self.rng = np.random.default_rng(train_config.seed)
        self.envs = VecEnv(env_spec, train_config.num_envs, train_config.seed + 1)
        if self.envs.obs_dim != self.cfg.obs_dim or self.envs.num_actions != self.cfg.num_actions:
            raise ValueError("agent and environment dimensions disagree")
        B = train_config.num_envs
        self.state = agent.initial_state(B)
        self.prev_action = np.zeros((B, self.cfg.num_actions))
        self.optimizer = RMSProp(
            [(p, g) for _, p, g in agent.named_parameters()],
            learning_rate=train_config.learning_rate,
            decay=train_config.rmsprop_decay,
            eps=train_config.rmsprop_eps,
            modules=agent.modules().values(),
        )
        self.steps = 0

    def _lr(self):
        t = self.tcfg
        if not t.anneal_lr:
            return t.learning_rate
        return t.learning_rate * (1.0 - 0.5 * min(self.steps / t.total_steps, 1.0))

    def train_segment(self):
        agent, cfg, tcfg = self.agent, self.cfg, self.tcfg
        K, B = tcfg.bptt_len, tcfg.num_envs
        N = K * B
        caches, actions, rewards, terms = [], [], [], []
        for _ in range(K):
            pi, v, cache = agent.step(self.envs.obs, self.prev_action, self.state)
            a = act(pi, self.rng)
            _, rew, term = self.envs.step(a)
            if cfg.clip_rewards:
                rew = clip_reward(rew)
            self.prev_action = np.eye(cfg.num_actions)[a]
            if term.any():
                self.state.reset(term)
                self.prev_action[term] = 0.0
            caches.append(cache)
            actions.append(a)
            rewards.append(rew)
            terms.append(term)
        rewards, terms = np.stack(rewards), np.stack(terms)
        _, boot, _ = agent.step(self.envs.obs, self.prev_action, self.state.copy())
        pi = np.stack([ch["pi"] for ch in caches])
        V = np.stack([ch["v"] for ch in caches])
        R = compute_returns(rewards, cfg.gamma, boot, terms)
        A = R - V
        agent.zero_grads()
        agent.backward(caches, policy_loss_grad(pi, np.stack(actions), A, tcfg.entropy_weight) / N,
                       tcfg.value_weight * (V - R) / N)
        self.optimizer.learning_rate = self._lr()
        self.optimizer.step()
        self.steps += N
        return {
            "steps": N,
            "episode_returns": self.envs.pop_completed(),
            "intrinsic_mean": 0.0,
            "entropy": float(entropy(pi).mean()),
            "value_loss_manager": 0.0,
            "value_loss_ext": float(0.5 * np.mean((V - R) ** 2)),
            "value_loss_int": 0.0,
            "skipped_manager_updates": 0,
        }
