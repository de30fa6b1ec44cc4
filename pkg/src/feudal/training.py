"""Learning rules for the hierarchical agent and the synchronous training loop.

Per segment of ``K`` steps the loss minimised is (averaged over steps and
environments)::

    - A_D * log pi(a)  - beta * H(pi)                   worker
    - A_M * cos(s_{t+c} - s_t, g_t)                      manager (s constant)
    + 1/2 (V_M - R_M)^2 + 1/2 (V_E - R_E)^2 + 1/2 (V_I - R_I)^2

with ``A_D = (R_E - V_E) + alpha (R_I - V_I)`` and ``A_M = R_M - V_M``.
"""

import logging
from dataclasses import dataclass, asdict

import numpy as np

from .nn import (
    NORM_EPS,
    DTYPE, RMSProp, cosine_similarity, cosine_similarity_backward, entropy,
    policy_loss_grad,
)
from .envs import make_env

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    bptt_len: int = 80
    learning_rate: float = 1e-3
    entropy_weight: float = 1e-3
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 1e-8
    value_weight: float = 1.0
    total_steps: int = 100_000
    eval_interval: int = 10_000
    seed: int = 0
    num_envs: int = 1
    anneal_lr: bool = False

    def __post_init__(self):
        for name in ("bptt_len", "learning_rate", "rmsprop_decay", "rmsprop_eps",
                     "total_steps", "eval_interval", "num_envs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("entropy_weight", "value_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# returns and rewards

def compute_returns(rewards, gamma, bootstrap, terminals=None):
    """Discounted returns ``R_t = r_t + gamma * R_{t+1}`` seeded with
    ``bootstrap`` after the last step; a terminal step drops the tail."""
    rewards = np.asarray(rewards, dtype=DTYPE)
    out = np.empty_like(rewards)
    running = np.asarray(bootstrap, dtype=DTYPE) * np.ones(rewards.shape[1:])
    for t in range(rewards.shape[0] - 1, -1, -1):
        if terminals is not None:
            running = np.where(terminals[t], 0.0, running)
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def intrinsic_reward(s_now, past_latents, past_goals, valid, c, directional=True):
    """Goal-following reward for arriving at latent ``s_now``.

    ``past_latents``/``past_goals`` hold ``s_{t-i}``, ``g_{t-i}`` for
    ``i = 1..c`` along axis -2 (most recent first); invalid lookbacks
    (before the episode start) contribute nothing, and the divisor stays ``c``.
    """
    s_now = np.asarray(s_now, dtype=DTYPE)
    if directional:
        delta = s_now[..., None, :] - past_latents
    else:
        delta = np.broadcast_to(s_now[..., None, :], np.shape(past_latents))
    terms = cosine_similarity(delta, past_goals)
    return np.where(valid, terms, 0.0).sum(axis=-1) / c


def manager_goal_grad(target, goal, advantage):
    """dL/dg for ``L = -A * cos(target, g)``; ``target`` is constant."""
    _, dg = cosine_similarity_backward(target, goal, -np.asarray(advantage, dtype=DTYPE))
    return dg


def manager_goal_grads(latents, goals, targets, advantages, mask, directional=True):
    """Transition-policy-gradient upstream for a run of steps.

    ``targets`` holds s_{t+c} per step; with directional goals the cosine is
    taken against ``s_{t+c} - s_t``, otherwise against ``s_{t+c}``. Steps
    outside ``mask`` (unresolved horizon, sampled goal) get zero.
    """
    direction = targets - latents if directional else targets
    dg = manager_goal_grad(direction, goals, advantages)
    return np.where(np.asarray(mask)[..., None], dg, 0.0)


def act(pi, rng):
    """Sample one action per row of ``pi`` by inverse CDF."""
    pi = np.asarray(pi, dtype=DTYPE)
    single = pi.ndim == 1
    pi2 = pi[None] if single else pi
    if np.any(np.abs(pi2.sum(axis=-1) - 1.0) > 1e-9) or np.any(pi2 < 0):
        raise ValueError("policy is not a normalised distribution")
    u = rng.random(pi2.shape[0])
    a = (np.cumsum(pi2, axis=-1) <= u[:, None]).sum(axis=-1)
    a = np.minimum(a, pi2.shape[-1] - 1)
    return int(a[0]) if single else a


def clip_reward(r):
    return np.clip(r, -1.0, 1.0)


# --------------------------------------------------------------------------
# vectorised environments

class VecEnv:
    """A batch of independent environments that restart on termination."""

    def __init__(self, spec, num_envs, seed):
        self.envs = [make_env(spec) for _ in range(num_envs)]
        seeds = np.random.SeedSequence(seed).spawn(num_envs)
        self.obs = np.stack([
            env.reset(int(s.generate_state(1)[0])) for env, s in zip(self.envs, seeds)
        ])
        self.episode_return = np.zeros(num_envs)
        self.completed = []
        self.obs_dim = self.envs[0].obs_dim
        self.num_actions = self.envs[0].num_actions

    def step(self, actions):
        """Returns (arrival_obs, rewards, terminals); ``self.obs`` is then the
        observation the agent sees next (a fresh episode after terminals)."""
        B = len(self.envs)
        arrival = np.empty_like(self.obs)
        rewards = np.empty(B)
        terminals = np.zeros(B, dtype=bool)
        for i, env in enumerate(self.envs):
            out = env.step(int(actions[i]))
            arrival[i] = out.observation
            rewards[i] = out.reward
            terminals[i] = out.terminal
            self.episode_return[i] += out.reward
            if out.terminal:
                self.completed.append(self.episode_return[i])
                self.episode_return[i] = 0.0
                self.obs[i] = env.reset()
            else:
                self.obs[i] = out.observation
        return arrival, rewards, terminals

    def pop_completed(self):
        done, self.completed = self.completed, []
        return done


# --------------------------------------------------------------------------
# FuN learner

def _horizon_masks(terminals, c):
    """For each step t of a (K, B) terminal array return (resolved, pending):
    ``resolved`` when s_{t+c} lies inside the segment and episode,
    ``pending`` when it lies beyond the cut but the episode is still alive."""
    K = terminals.shape[0]
    prefix = np.concatenate([np.zeros((1,) + terminals.shape[1:], dtype=np.int64),
                             np.cumsum(terminals, axis=0)])
    t = np.arange(K)
    end = t + c - 1
    inside = end < K
    hit = prefix[np.minimum(end, K)] - prefix[t]
    resolved = inside[:, None] & (hit == 0)
    alive_to_cut = (prefix[K] - prefix[t]) == 0
    pending = (~inside)[:, None] & alive_to_cut
    return resolved, pending


class FeudalLearner:
    """Collects segments with one agent over ``num_envs`` environments and
    applies the Manager, Worker and critic updates."""

    def __init__(self, agent, env_spec, train_config):
        self.agent = agent
        self.cfg = agent.config
        self.tcfg = train_config
        self.rng = np.random.default_rng(train_config.seed)
        self.envs = VecEnv(env_spec, train_config.num_envs, train_config.seed + 1)
        if self.envs.obs_dim != self.cfg.obs_dim or self.envs.num_actions != self.cfg.num_actions:
            raise ValueError("agent and environment dimensions disagree")
        if train_config.bptt_len < self.cfg.c:
            raise ValueError("bptt_len must be at least the Manager horizon c")
        self.state = agent.initial_state(train_config.num_envs)
        self.optimizer = RMSProp(
            [(p, g) for _, p, g in agent.named_parameters()],
            learning_rate=train_config.learning_rate,
            decay=train_config.rmsprop_decay,
            eps=train_config.rmsprop_eps,
            modules=agent.modules().values(),
        )
        self.pending = None
        self.last = None
        self.steps = 0
        self.skipped_manager = 0

    def _lr(self):
        t = self.tcfg
        if not t.anneal_lr:
            return t.learning_rate
        frac = min(self.steps / t.total_steps, 1.0)
        return t.learning_rate * (1.0 - 0.5 * frac)

    def collect(self, K):
        agent, cfg, rng = self.agent, self.cfg, self.rng
        c = cfg.c
        tail = c - 1
        caches, rewards, r_int, terms, s_next, actions = [], [], [], [], [], []
        snapshot = None
        for t in range(K):
            if tail and t == K - tail:
                snapshot = self.state.copy()
            out = agent.step(self.envs.obs, self.state, rng)
            a = act(out.pi, rng)
            arrival, rew, term = self.envs.step(a)
            if cfg.clip_rewards:
                rew = clip_reward(rew)
            _, s_arr = agent.latent(arrival)
            if cfg.feudal:
                lat, goals, valid = self.state.history.lookback()
                ri = intrinsic_reward(s_arr, lat, goals, valid, c, cfg.directional)
            else:
                ri = np.zeros_like(rew)
            if term.any():
                self.state.reset(term)
            caches.append(out.cache)
            actions.append(a)
            rewards.append(rew)
            r_int.append(ri)
            terms.append(term)
            s_next.append(s_arr)
        return {
            "caches": caches,
            "actions": np.stack(actions),
            "rewards": np.stack(rewards),
            "r_int": np.stack(r_int),
            "terminals": np.stack(terms),
            "s_next": np.stack(s_next),
            "snapshot": snapshot,
        }

    def train_segment(self):
        agent, cfg, tcfg = self.agent, self.cfg, self.tcfg
        K, c = tcfg.bptt_len, cfg.c
        seg = self.collect(K)
        caches = seg["caches"]
        B = tcfg.num_envs
        N = K * B

        pi = np.stack([ch["pi"] for ch in caches])
        V_M = np.stack([ch["v_m"] for ch in caches])
        V_E = np.stack([ch["v_e"] for ch in caches])
        V_I = np.stack([ch["v_i"] for ch in caches])
        terms = seg["terminals"]
        bm, be, bi = agent.peek_values(self.envs.obs, self.state)
        R_E = compute_returns(seg["rewards"], cfg.gamma_worker, be, terms)
        R_M = compute_returns(seg["rewards"], cfg.gamma_manager, bm, terms)
        if cfg.feudal:
            R_I = compute_returns(seg["r_int"], cfg.gamma_worker, bi, terms)
            alpha = cfg.alpha
        else:
            R_I = V_I.copy()
            alpha = 0.0
        A_D = (R_E - V_E) + alpha * (R_I - V_I)
        A_M = R_M - V_M
        self.last = {"segment": seg, "R_E": R_E, "R_M": R_M, "R_I": R_I, "A_D": A_D, "A_M": A_M}

        d_logits = policy_loss_grad(pi, seg["actions"], A_D, tcfg.entropy_weight) / N
        vw = tcfg.value_weight / N
        d_vm, d_ve, d_vi = vw * (V_M - R_M), vw * (V_E - R_E), vw * (V_I - R_I)

        agent.zero_grads()
        d_goals = None
        skipped = 0
        if cfg.feudal:
            resolved, pending = _horizon_masks(terms, c)
            latents = np.stack([ch["s"] for ch in caches])
            goals = np.stack([ch["g"] for ch in caches])
            explored = np.stack([ch["explore"] for ch in caches])
            targets = np.zeros_like(latents)
            K_in = K - (c - 1)
            targets[:K_in] = seg["s_next"][c - 1:]
            d_goals = manager_goal_grads(latents, goals, targets, A_M, resolved & ~explored,
                                         cfg.directional) / N
            skipped = int((~resolved & ~pending).sum())
            self._resolve_pending(seg, N)
            self.pending = self._make_pending(seg, pending, A_M, latents, explored)
        agent.backward(caches, d_logits, d_goals, d_vm, d_ve, d_vi)

        self.optimizer.learning_rate = self._lr()
        self.optimizer.step()
        self.steps += N
        self.skipped_manager += skipped

        ent = entropy(pi)
        return {
            "steps": N,
            "episode_returns": self.envs.pop_completed(),
            "intrinsic_mean": float(seg["r_int"].mean()),
            "entropy": float(ent.mean()),
            "value_loss_manager": float(0.5 * np.mean((V_M - R_M) ** 2)),
            "value_loss_ext": float(0.5 * np.mean((V_E - R_E) ** 2)),
            "value_loss_int": float(0.5 * np.mean((V_I - R_I) ** 2)),
            "skipped_manager_updates": skipped,
        }

    def _make_pending(self, seg, pending, A_M, latents, explored):
        tail = self.cfg.c - 1
        if tail == 0 or seg["snapshot"] is None:
            return None
        K = pending.shape[0]
        sl = slice(K - tail, K)
        caches = seg["caches"][sl]
        return {
            "state": seg["snapshot"],
            "xs": [ch["x"] for ch in caches],
            "taus": [ch["tau"] for ch in caches],
            "explore": explored[sl],
            "mask": pending[sl],
            "advantage": A_M[sl],
            "latents": latents[sl],
        }

    def _resolve_pending(self, seg, N):
        """Finish Manager updates whose horizon crossed the previous cut."""
        p = self.pending
        if p is None:
            return
        cfg = self.cfg
        tail = len(p["xs"])
        terms = seg["terminals"]
        # target for tail step j sits at this segment's index j
        prefix = np.concatenate([np.zeros((1, terms.shape[1]), dtype=np.int64),
                                 np.cumsum(terms, axis=0)])
        mask = p["mask"].copy()
        for j in range(tail):
            mask[j] &= prefix[j] == 0
        self.skipped_manager += int((p["mask"] & ~mask).sum())
        if not mask.any():
            return
        caches = self.agent.manager_recompute(p["xs"], p["state"], p["explore"], p["taus"])
        goals = np.stack([mc["g"] for mc in caches])
        d_goals = manager_goal_grads(p["latents"], goals, seg["s_next"][:tail], p["advantage"],
                                     mask & ~p["explore"], cfg.directional) / N
        self.agent.manager_only_backward(caches, list(d_goals))


# --------------------------------------------------------------------------
# transition policy gradient equivalence

def _unit(x):
    """Normalise along the last axis; rows with norm < 1e-8 become zero."""
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n >= NORM_EPS, x / np.where(n >= NORM_EPS, n, 1.0), 0.0)


def vmf_log_density(direction, mean_direction, kappa=1.0):
    """Unnormalised von Mises-Fisher log density of ``direction`` (any
    nonzero vector, normalised here) about ``mean_direction``."""
    x = _unit(np.asarray(direction, dtype=DTYPE))
    mu = _unit(np.asarray(mean_direction, dtype=DTYPE))
    return kappa * (x * mu).sum(axis=-1)


def vmf_log_density_grad(direction, goal, kappa=1.0):
    """d/dg of ``vmf_log_density(direction, g/|g|)`` via the projection
    ``(I - mu mu^T)/|g|`` of the mean-direction chain rule."""
    x = _unit(np.asarray(direction, dtype=DTYPE))
    g = np.asarray(goal, dtype=DTYPE)
    gn = np.linalg.norm(g, axis=-1, keepdims=True)
    ok = gn >= NORM_EPS
    gn = np.where(ok, gn, 1.0)
    mu = g / gn
    d_mu = kappa * x
    return np.where(ok, (d_mu - mu * (mu * d_mu).sum(axis=-1, keepdims=True)) / gn, 0.0)


def transition_pg_equivalence_check(agent, xs, advantages, state=None):
    """Compare the transition-policy-gradient estimator under a von
    Mises-Fisher transition model with the Manager's cosine update.

    ``xs``: (T, B, obs_dim) observation sequence; ``advantages``: (T, B).
    Both estimators are pushed through the same Manager backward and the
    resulting parameter gradients compared. Returns a report dict.
    """
    cfg = agent.config
    c = cfg.c
    T, B = len(xs), xs[0].shape[0]
    if state is None:
        state = agent.initial_state(B)
    taus = [np.full(B, t, dtype=np.int64) + state.manager.tau for t in range(T)]
    no_explore = np.zeros((T, B), dtype=bool)
    caches = agent.manager_recompute(xs, state.copy(), no_explore, taus)
    latents = np.stack([mc["s"] for mc in caches])
    goals = np.stack([mc["g"] for mc in caches])
    steps = T - c
    deltas = latents[c:] - latents[:steps]
    adv = np.asarray(advantages, dtype=DTYPE)[:steps]
    d_cos = cosine_similarity(deltas, goals[:steps])
    log_p = vmf_log_density(deltas, goals[:steps])

    def grads(d_goal):
        agent.zero_grads()
        full = [d_goal[t] if t < steps else np.zeros((B, cfg.d)) for t in range(T)]
        agent.manager_only_backward(caches, full)
        return np.concatenate([g.ravel().copy() for _, _, g in agent.named_parameters()])

    # ascent directions for the objective A * log p and A * cos
    tpg = grads(adv[..., None] * vmf_log_density_grad(deltas, goals[:steps]))
    cos_rule = grads(-manager_goal_grad(deltas, goals[:steps], adv))
    agent.zero_grads()
    return {
        "max_abs_deviation": float(np.max(np.abs(tpg - cos_rule))) if tpg.size else 0.0,
        "gradient_norm": float(np.linalg.norm(cos_rule)),
        "d_cos": d_cos,
        "log_likelihood": log_p,
        "steps": steps,
    }
