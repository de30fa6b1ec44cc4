"""Feudal network: shared perception, Manager with a dilated LSTM, Worker
with multiplicative goal conditioning, and three scalar critics.

All per-step computations carry a leading batch axis (one row per
environment) so several environments can share one forward call.
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from .nn import (
    DTYPE, NORM_EPS, DimensionError, LSTMCell, Linear, relu, softmax,
)

MODES = ("full_fun", "non_feudal", "absolute_goals", "no_dilation")


@dataclass
class AgentConfig:
    obs_dim: int
    num_actions: int
    d: int = 32
    k: int = 16
    c: int = 10
    r: int = 10
    percept_hidden: int = 64
    worker_hidden: int = 64
    manager_hidden: int = 64
    alpha: float = 0.8
    epsilon_goal: float = 0.05
    gamma_worker: float = 0.95
    gamma_manager: float = 0.99
    mode: str = "full_fun"
    clip_rewards: bool = True
    critic_trunk_grad: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "no_dilation":
            self.r = 1
        for name in ("obs_dim", "num_actions", "d", "k", "c", "r",
                     "percept_hidden", "worker_hidden", "manager_hidden"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.k < self.d:
            raise ValueError(f"goal embedding k={self.k} must be smaller than d={self.d}")
        for name in ("alpha", "epsilon_goal", "gamma_worker", "gamma_manager"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    @property
    def feudal(self):
        """True when goals are trained by the transition policy gradient."""
        return self.mode != "non_feudal"

    @property
    def directional(self):
        return self.mode != "absolute_goals"

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# dilated LSTM

@dataclass
class DilatedLSTMState:
    """``h`` doubles as the output ring: slot ``j`` holds the latest output
    of core ``j``. Unwritten slots are zero, so pooling divides by
    ``min(tau+1, r)``."""
    h: np.ndarray
    c: np.ndarray
    tau: np.ndarray

    @property
    def radius(self):
        return self.h.shape[1]

    @property
    def output_ring(self):
        return self.h

    def ring_size(self):
        return np.minimum(self.tau, self.radius)

    def copy(self):
        return DilatedLSTMState(self.h.copy(), self.c.copy(), self.tau.copy())

    def reset(self, mask):
        self.h[mask] = 0.0
        self.c[mask] = 0.0
        self.tau[mask] = 0


class DilatedLSTM:
    """``r`` cores sharing one LSTM cell; step ``t`` updates core ``t % r``
    and the output is the mean of the last ``min(t+1, r)`` core outputs.
    With ``r == 1`` this is a plain LSTM."""

    def __init__(self, n_in, hidden, radius, rng=None):
        self.cell = LSTMCell(n_in, hidden, rng)
        self.hidden = hidden
        self.radius = radius

    def initial_state(self, batch):
        shape = (batch, self.radius, self.hidden)
        return DilatedLSTMState(np.zeros(shape), np.zeros(shape), np.zeros(batch, dtype=np.int64))

    def step(self, x, state):
        """Advance ``state`` in place; return (pooled output, cache)."""
        B = x.shape[0]
        if state.h.shape[0] != B:
            raise DimensionError("batch size of input and state differ")
        rows = np.arange(B)
        tau = state.tau.copy()
        j = tau % self.radius
        h_new, c_new, cell_cache = self.cell.forward(x, state.h[rows, j], state.c[rows, j])
        state.h[rows, j] = h_new
        state.c[rows, j] = c_new
        n = np.minimum(tau + 1, self.radius).astype(DTYPE)
        if self.radius == 1:
            y = h_new
        else:
            y = state.h.sum(axis=1) / n[:, None]
        state.tau += 1
        return y, (j, n, tau, cell_cache)

    def backward(self, caches, dys):
        """Truncated BPTT over a list of step caches; returns input grads.

        Carries are cut at episode starts (``tau == 0``) and at the first
        cache, whose incoming state is treated as constant.
        """
        T = len(caches)
        B = dys[0].shape[0]
        rows = np.arange(B)
        dh_cores = np.zeros((B, self.radius, self.hidden))
        dc_cores = np.zeros_like(dh_cores)
        dxs = [None] * T
        das = [None] * T
        cell = self.cell
        for t in range(T - 1, -1, -1):
            j, n, tau, cell_cache = caches[t]
            if self.radius == 1:
                dh_cores[:, 0] += dys[t]
            else:
                dh_cores += (dys[t] / n[:, None])[:, None, :]
            dh = dh_cores[rows, j]
            dc = dc_cores[rows, j]
            da, dx, dh_prev, dc_prev = cell.gate_backward(cell_cache, dh, dc)
            dh_cores[rows, j] = dh_prev
            dc_cores[rows, j] = dc_prev
            fresh = tau == 0
            if fresh.any():
                dh_cores[fresh] = 0.0
                dc_cores[fresh] = 0.0
            dxs[t] = dx
            das[t] = da
        cell.accumulate(np.stack([ch[3][2] for ch in caches]),
                        np.stack([ch[3][3] for ch in caches]),
                        np.stack(das))
        return dxs


# --------------------------------------------------------------------------
# goal history

class GoalHistory:
    """Per-environment rings of the last ``c+1`` goals and latent states.

    Slot ``tau % (c+1)`` is written at episode step ``tau``; entries before
    the first emission are zero.
    """

    def __init__(self, batch, c, d):
        self.c = c
        self.goals = np.zeros((batch, c + 1, d))
        self.latents = np.zeros((batch, c + 1, d))
        self.count = np.zeros(batch, dtype=np.int64)

    def copy(self):
        other = GoalHistory.__new__(GoalHistory)
        other.c = self.c
        other.goals = self.goals.copy()
        other.latents = self.latents.copy()
        other.count = self.count.copy()
        return other

    def reset(self, mask):
        self.goals[mask] = 0.0
        self.latents[mask] = 0.0
        self.count[mask] = 0

    def push(self, g, s):
        rows = np.arange(g.shape[0])
        slot = self.count % (self.c + 1)
        self.goals[rows, slot] = g
        self.latents[rows, slot] = s
        self.count += 1
        return slot

    def pooled(self):
        """Sum of the stored goals, i.e. g_{t-c} + ... + g_t."""
        return self.goals.sum(axis=1)

    def lookback(self):
        """Return (latents, goals, valid) ordered most recent first, i = 1..c,
        as seen from the *next* latent state."""
        c = self.c
        i = np.arange(c)
        slot = (self.count[:, None] - 1 - i[None, :]) % (c + 1)
        rows = np.arange(self.count.shape[0])[:, None]
        valid = i[None, :] < np.minimum(self.count, c)[:, None]
        return self.latents[rows, slot], self.goals[rows, slot], valid


# --------------------------------------------------------------------------
# network

@dataclass
class FeudalState:
    manager: DilatedLSTMState
    worker: DilatedLSTMState
    history: GoalHistory
    last_goal: np.ndarray
    degenerate: int = 0

    def copy(self):
        return FeudalState(self.manager.copy(), self.worker.copy(), self.history.copy(),
                           self.last_goal.copy(), self.degenerate)

    def reset(self, mask):
        self.manager.reset(mask)
        self.worker.reset(mask)
        self.history.reset(mask)
        self.last_goal[mask] = 0.0

    @property
    def tau(self):
        return self.manager.tau


@dataclass
class StepOutput:
    pi: np.ndarray
    goal: np.ndarray
    latent: np.ndarray
    v_manager: np.ndarray
    v_ext: np.ndarray
    v_int: np.ndarray
    explored: np.ndarray
    cache: dict = field(repr=False, default=None)


class FeudalNet:
    """Parameters and forward/backward passes of the hierarchical agent."""

    def __init__(self, config, seed=0):
        cfg = config
        self.config = cfg
        rng = np.random.default_rng(seed)
        A, k, d = cfg.num_actions, cfg.k, cfg.d
        self.percept = Linear(cfg.obs_dim, cfg.percept_hidden, rng=rng)
        self.mspace = Linear(cfg.percept_hidden, d, rng=rng)
        self.manager_rnn = DilatedLSTM(d, cfg.manager_hidden, cfg.r, rng=rng)
        self.goal_head = Linear(cfg.manager_hidden, d, rng=rng)
        self.phi = Linear(d, k, bias=False, rng=rng)
        self.worker_rnn = DilatedLSTM(cfg.percept_hidden, cfg.worker_hidden, 1, rng=rng)
        self.u_head = Linear(cfg.worker_hidden, A * k, rng=rng)
        self.value_manager = Linear(cfg.manager_hidden, 1, rng=rng)
        self.value_ext = Linear(cfg.worker_hidden, 1, rng=rng)
        self.value_int = Linear(cfg.worker_hidden, 1, rng=rng)

    # -- parameter plumbing ------------------------------------------------
    def modules(self):
        return {
            "percept": self.percept,
            "mspace": self.mspace,
            "manager_rnn": self.manager_rnn.cell,
            "goal_head": self.goal_head,
            "phi": self.phi,
            "worker_rnn": self.worker_rnn.cell,
            "u_head": self.u_head,
            "value_manager": self.value_manager,
            "value_ext": self.value_ext,
            "value_int": self.value_int,
        }

    def named_parameters(self):
        for mname, m in self.modules().items():
            yield from m.named_parameters(mname + ".")

    def zero_grads(self):
        for m in self.modules().values():
            m.zero_grads()

    def num_parameters(self):
        return sum(p.size for _, p, _ in self.named_parameters())

    # -- forward ---------------------------------------------------------
    def initial_state(self, batch=1):
        cfg = self.config
        return FeudalState(
            self.manager_rnn.initial_state(batch),
            self.worker_rnn.initial_state(batch),
            GoalHistory(batch, cfg.c, cfg.d),
            np.zeros((batch, cfg.d)),
        )

    def latent(self, x):
        """Return (z, s) for observations ``x``."""
        z = relu(self.percept.forward(x))
        s = relu(self.mspace.forward(z))
        return z, s

    def manager_step(self, s, state, rng=None, explore=None):
        """Dilated-LSTM step followed by goal normalisation and exploration.

        ``explore`` (bool per row) overrides the epsilon draw when given;
        without an ``rng`` the flags are recorded but no goal is replaced.
        """
        cfg = self.config
        B = s.shape[0]
        y, mcache = self.manager_rnn.step(s, state.manager)
        ghat = self.goal_head.forward(y)
        norm = np.linalg.norm(ghat, axis=-1)
        degenerate = norm < NORM_EPS
        if cfg.directional:
            g = ghat / np.where(degenerate, 1.0, norm)[:, None]
        else:
            g = ghat.copy()
        if degenerate.any():
            fallback = state.last_goal[degenerate].copy()
            empty = np.linalg.norm(fallback, axis=-1) < NORM_EPS
            fallback[empty] = 0.0
            fallback[empty, 0] = 1.0
            g[degenerate] = fallback
            state.degenerate += int(degenerate.sum())
        if explore is None:
            if cfg.epsilon_goal > 0.0 and rng is not None:
                explore = rng.random(B) < cfg.epsilon_goal
            else:
                explore = np.zeros(B, dtype=bool)
        if explore.any() and rng is not None:
            n_exp = int(explore.sum())
            sample = rng.standard_normal((n_exp, cfg.d))
            sample /= np.linalg.norm(sample, axis=-1, keepdims=True)
            g[explore] = sample
        state.last_goal[...] = g
        cache = {"mcache": mcache, "y_m": y, "ghat": ghat, "norm": norm,
                 "g": g, "explore": explore, "degenerate": degenerate}
        return g, cache

    def pool_and_embed(self, history):
        gsum = history.pooled()
        return gsum, self.phi.forward(gsum)

    def worker_step(self, z, state, w):
        A, k = self.config.num_actions, self.config.k
        y, wcache = self.worker_rnn.step(z, state.worker)
        U = self.u_head.forward(y).reshape(-1, A, k)
        logits = np.einsum("bak,bk->ba", U, w)
        return softmax(logits), U, y, wcache

    def value_heads(self, y_m, y_w):
        return (self.value_manager.forward(y_m)[:, 0],
                self.value_ext.forward(y_w)[:, 0],
                self.value_int.forward(y_w)[:, 0])

    def step(self, x, state, rng=None, explore=None, goal=None):
        """One environment step for every row of ``x``; mutates ``state``.

        ``goal`` replaces the Manager's emitted goal (and blocks gradient to
        it); used to hold goals fixed in gradient checks and probes."""
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != self.config.obs_dim:
            raise DimensionError(f"expected observations (B, {self.config.obs_dim}), got {x.shape}")
        z, s = self.latent(x)
        g, mc = self.manager_step(s, state, rng, explore)
        if goal is not None:
            g = np.array(goal, dtype=DTYPE)
            mc["g"] = g
            mc["explore"] = np.ones(x.shape[0], dtype=bool)
            state.last_goal[...] = g
        tau = mc["mcache"][2]
        slot = state.history.push(g, s)
        gsum, w = self.pool_and_embed(state.history)
        pi, U, y_w, wcache = self.worker_step(z, state, w)
        vm, ve, vi = self.value_heads(mc["y_m"], y_w)
        mc.update(x=x, z=z, s=s, tau=tau, slot=slot, gsum=gsum, w=w, U=U,
                  y_w=y_w, wcache=wcache, pi=pi, v_m=vm, v_e=ve, v_i=vi)
        return StepOutput(pi, g, s, vm, ve, vi, mc["explore"], mc)

    def peek_values(self, x, state):
        """Critic values for ``x`` without advancing ``state``."""
        x = np.asarray(x, dtype=DTYPE)
        z, s = self.latent(x)
        y_m, _ = self.manager_rnn.step(s, state.manager.copy())
        y_w, _ = self.worker_rnn.step(z, state.worker.copy())
        return self.value_heads(y_m, y_w)

    # -- backward --------------------------------------------------------
    def goal_backward(self, caches, d_goals):
        """Map dL/dg_t to dL/d(raw goal) through normalisation; rows whose
        goal was sampled or degenerate get zero."""
        out = []
        directional = self.config.directional
        for mc, dg in zip(caches, d_goals):
            if dg is None:
                out.append(None)
                continue
            blocked = mc["explore"] | mc["degenerate"]
            if directional:
                g = mc["g"]
                norm = np.where(mc["degenerate"], 1.0, mc["norm"])[:, None]
                dghat = (dg - g * (g * dg).sum(axis=-1, keepdims=True)) / norm
            else:
                dghat = dg.copy()
            dghat[blocked] = 0.0
            out.append(dghat)
        return out

    def manager_backward(self, caches, d_ghat, d_vm):
        """Backprop raw-goal and manager-critic gradients to latent inputs.

        Returns dL/ds_t per step (list of (B, d) arrays).
        """
        dys = []
        for t, mc in enumerate(caches):
            dy = np.zeros_like(mc["y_m"])
            if d_ghat[t] is not None:
                dy += self.goal_head.backward(mc["y_m"], d_ghat[t])
            if d_vm is not None:
                dy_v = self.value_manager.backward(mc["y_m"], d_vm[t][:, None])
                if self.config.critic_trunk_grad:
                    dy += dy_v
            dys.append(dy)
        return self.manager_rnn.backward([mc["mcache"] for mc in caches], dys)

    def latent_backward(self, xs, zs, ss, ds, dz_extra=None):
        """Backprop through mspace and percept for stacked steps.

        ``xs, zs, ss`` are (N, .) arrays, ``ds`` dL/ds and ``dz_extra``
        additional dL/dz (from the Worker)."""
        dz = np.zeros_like(zs)
        if ds is not None:
            ds_pre = ds * (ss > 0.0)
            dz += self.mspace.backward(zs, ds_pre)
        if dz_extra is not None:
            dz += dz_extra
        self.percept.backward(xs, dz * (zs > 0.0))

    def backward(self, caches, d_logits, d_goals=None, d_vm=None, d_ve=None, d_vi=None):
        """Accumulate parameter gradients for a contiguous run of steps.

        ``d_logits``: (T, B, A) loss gradient w.r.t. policy logits.
        ``d_goals``: optional list of (B, d) gradients w.r.t. emitted goals
        (transition policy gradient); ``d_v*``: (T, B) critic gradients.
        In ``non_feudal`` mode the Worker's gradient also reaches the goals.
        """
        cfg = self.config
        T = len(caches)
        A, k = cfg.num_actions, cfg.k
        d_logits = np.asarray(d_logits)
        U = np.stack([mc["U"] for mc in caches])
        w = np.stack([mc["w"] for mc in caches])
        y_w = np.stack([mc["y_w"] for mc in caches])
        gsum = np.stack([mc["gsum"] for mc in caches])
        dU = d_logits[..., :, None] * w[..., None, :]
        dw = np.einsum("tbak,tba->tbk", U, d_logits)
        d_gsum = self.phi.backward(gsum, dw)
        dy_w = self.u_head.backward(y_w, dU.reshape(T, -1, A * k))
        if d_ve is not None:
            dy_v = self.value_ext.backward(y_w, np.asarray(d_ve)[..., None])
            dy_v = dy_v + self.value_int.backward(y_w, np.asarray(d_vi)[..., None])
            if cfg.critic_trunk_grad:
                dy_w = dy_w + dy_v
        dz_w = self.worker_rnn.backward([mc["wcache"] for mc in caches], list(dy_w))

        goal_grads = [None] * T if d_goals is None else list(d_goals)
        if not cfg.feudal:
            goal_grads = _goal_ring_backward(caches, d_gsum, goal_grads, cfg.c)
        d_ghat = self.goal_backward(caches, goal_grads)
        ds = self.manager_backward(caches, d_ghat, d_vm)

        xs = np.concatenate([mc["x"] for mc in caches])
        zs = np.concatenate([mc["z"] for mc in caches])
        ss = np.concatenate([mc["s"] for mc in caches])
        self.latent_backward(xs, zs, ss, np.concatenate(ds), np.concatenate(dz_w))

    def manager_only_backward(self, caches, d_goals):
        """Transition-policy-gradient backward for recomputed Manager steps."""
        d_ghat = self.goal_backward(caches, d_goals)
        ds = self.manager_backward(caches, d_ghat, None)
        xs = np.concatenate([mc["x"] for mc in caches])
        zs = np.concatenate([mc["z"] for mc in caches])
        ss = np.concatenate([mc["s"] for mc in caches])
        self.latent_backward(xs, zs, ss, np.concatenate(ds))

    def manager_recompute(self, xs, state, explore, taus):
        """Re-run percept, mspace and the Manager from ``state`` over stored
        observations; returns per-step caches. ``taus`` are the episode step
        counters seen during the rollout, so episode restarts are replayed."""
        caches = []
        for t, x in enumerate(xs):
            fresh = taus[t] == 0
            if fresh.any():
                state.reset(fresh)
            z, s = self.latent(x)
            _, mc = self.manager_step(s, state, None, explore[t])
            mc.update(x=x, z=z, s=s)
            caches.append(mc)
        return caches


def _goal_ring_backward(caches, d_gsum, goal_grads, c):
    """Route d(pooled goal sum) back to the goals written in this run.

    Each pooled sum covers the ring of the last ``c+1`` goals; goals from
    before the first cache are constants.
    """
    T = len(caches)
    B = d_gsum.shape[1]
    rows = np.arange(B)
    acc = np.zeros((B, c + 1, d_gsum.shape[-1]))
    out = list(goal_grads)
    for t in range(T - 1, -1, -1):
        mc = caches[t]
        acc += d_gsum[t][:, None, :]
        slot = mc["slot"]
        dg = acc[rows, slot].copy()
        acc[rows, slot] = 0.0
        out[t] = dg if out[t] is None else out[t] + dg
        fresh = mc["tau"] == 0
        if fresh.any():
            acc[fresh] = 0.0
    return out
