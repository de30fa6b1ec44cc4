"""Central finite-difference checks for every analytic backward pass.

Each suite draws randomised cases, perturbs all parameters (and inputs
where relevant) along random directions plus a handful of single
coordinates, and records the worst relative error between the finite
difference and the analytic gradient.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .agent import AgentConfig, FeudalNet
from .baseline import BaselineConfig, BaselineNet
from .training import (
    manager_goal_grads, transition_pg_equivalence_check,
)

STEP = 1e-5
TOLERANCE = 1e-5
FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    cases: int
    worst: float
    tolerance: float = TOLERANCE
    seconds: float = 0.0

    @property
    def passed(self):
        return bool(np.isfinite(self.worst) and self.worst < self.tolerance)


def rel_error(a, b, floor=FLOOR):
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_compare(loss, arrays, grads, rng, n_dirs=2, n_coords=4, h=STEP, pattern=None):
    """Worst relative error between analytic ``grads`` and central
    differences of ``loss()`` w.r.t. the (in-place perturbed) ``arrays``.

    ``pattern`` (optional) returns the on/off state of every rectifier; a
    stencil whose endpoints change that state straddles a kink, where the
    central difference is meaningless, so the probe is redrawn (directions)
    or skipped (coordinates).
    """
    base = pattern() if pattern is not None else None

    def straddles():
        return pattern is not None and not np.array_equal(pattern(), base)

    worst = 0.0
    done, tries = 0, 0
    while done < n_dirs and tries < 10 * n_dirs:
        tries += 1
        dirs = [rng.standard_normal(a.shape) for a in arrays]
        for a, v in zip(arrays, dirs):
            a += h * v
        lp, kink = loss(), straddles()
        for a, v in zip(arrays, dirs):
            a -= 2 * h * v
        lm, kink = loss(), kink or straddles()
        for a, v in zip(arrays, dirs):
            a += h * v
        if kink:
            continue
        fd = (lp - lm) / (2 * h)
        an = sum(float((g * v).sum()) for g, v in zip(grads, dirs))
        worst = max(worst, rel_error(fd, an))
        done += 1
    if done < n_dirs:
        raise RuntimeError("every finite-difference probe straddled a rectifier kink")
    candidates = [(i, j) for i, g in enumerate(grads) for j in np.flatnonzero(np.abs(g) > 1e-4)]
    if candidates:
        picks = rng.choice(len(candidates), size=min(n_coords, len(candidates)), replace=False)
        for pick in picks:
            i, j = candidates[pick]
            flat = arrays[i].reshape(-1)
            old = flat[j]
            flat[j] = old + h
            lp, kink = loss(), straddles()
            flat[j] = old - h
            lm, kink = loss(), kink or straddles()
            flat[j] = old
            if not kink:
                worst = max(worst, rel_error((lp - lm) / (2 * h), grads[i].reshape(-1)[j]))
    return worst


def relu_pattern(agent, xs):
    """Closure giving the rectifier on/off pattern of the latent path."""
    def pattern():
        pre_z = xs @ agent.percept.weight.T + agent.percept.bias
        z = np.maximum(pre_z, 0.0)
        pre_s = z @ agent.mspace.weight.T + agent.mspace.bias
        return np.concatenate([(pre_z > 0).ravel(), (pre_s > 0).ravel()])
    return pattern


def _timed(name, cases, fn):
    t0 = time.perf_counter()
    worst = max(fn(i) for i in range(cases))
    return CheckResult(name, cases, worst, seconds=time.perf_counter() - t0)


# --------------------------------------------------------------------------
# nn_core suites

def check_linear(rng, cases=100):
    def case(_):
        n_in, n_out = rng.integers(1, 7, size=2)
        layer = nn.Linear(int(n_in), int(n_out), bias=bool(rng.integers(2)), rng=rng)
        x = rng.standard_normal((int(rng.integers(1, 4)), n_in))
        probe = rng.standard_normal((x.shape[0], n_out))
        loss = lambda: float((layer.forward(x) * probe).sum())
        layer.zero_grads()
        dx = layer.backward(x, probe)
        params = list(layer.params.values())
        grads = [layer.grads[k] for k in layer.params]
        return fd_compare(loss, params + [x], grads + [dx], rng)
    return _timed("linear", cases, case)


def check_lstm(rng, cases=100, steps=3):
    def case(_):
        n_in, H, B = (int(v) for v in rng.integers(1, 6, size=3))
        cell = nn.LSTMCell(n_in, H, rng=rng)
        xs = rng.standard_normal((steps, B, n_in))
        h0 = rng.standard_normal((B, H)) * 0.5
        c0 = rng.standard_normal((B, H)) * 0.5
        ph = rng.standard_normal((steps, B, H))
        pc = rng.standard_normal((B, H))

        def run():
            h, c = h0, c0
            caches, total = [], 0.0
            for t in range(steps):
                h, c, cache = cell.forward(xs[t], h, c)
                caches.append(cache)
                total += float((ph[t] * h).sum())
            return total + float((pc * c).sum()), caches

        _, caches = run()
        cell.zero_grads()
        dh, dc = np.zeros((B, H)), pc.copy()
        dxs = np.zeros_like(xs)
        for t in range(steps - 1, -1, -1):
            dx, dh, dc = cell.backward(caches[t], dh + ph[t], dc)
            dxs[t] = dx
        params = list(cell.params.values())
        grads = [cell.grads[k] for k in cell.params]
        return fd_compare(lambda: run()[0], params + [xs, h0, c0], grads + [dxs, dh, dc], rng)
    return _timed("lstm_cell", cases, case)


def check_policy_logprob(rng, cases=100):
    def case(_):
        A = int(rng.integers(2, 6))
        logits = rng.standard_normal((3, A)) * 2
        actions = rng.integers(A, size=3)
        adv = rng.standard_normal(3)
        beta = float(rng.uniform(0, 0.5))

        def loss():
            logp = nn.log_softmax(logits)
            pi = np.exp(logp)
            ent = -(pi * logp).sum(axis=-1)
            return float((-adv * logp[np.arange(3), actions] - beta * ent).sum())

        grad = nn.policy_loss_grad(nn.softmax(logits), actions, adv, beta)
        return fd_compare(loss, [logits], [grad], rng)
    return _timed("softmax_logprob", cases, case)


def check_cosine(rng, cases=100):
    def case(_):
        n = int(rng.integers(2, 8))
        a, b = rng.standard_normal((2, 4, n))
        up = rng.standard_normal(4)
        loss = lambda: float((up * nn.cosine_similarity(a, b)).sum())
        da, db = nn.cosine_similarity_backward(a, b, up)
        return fd_compare(loss, [a, b], [da, db], rng)
    return _timed("cosine_similarity", cases, case)


# --------------------------------------------------------------------------
# agent / training suites

def small_config(rng, **overrides):
    kw = dict(
        obs_dim=int(rng.integers(3, 6)), num_actions=int(rng.integers(2, 4)),
        d=4, k=3, c=int(rng.integers(1, 4)), r=int(rng.integers(1, 4)),
        percept_hidden=5, worker_hidden=4, manager_hidden=5, epsilon_goal=0.0,
    )
    kw.update(overrides)
    return AgentConfig(**kw)


def _episode_inputs(rng, cfg, T, B):
    xs = rng.standard_normal((T, B, cfg.obs_dim))
    return xs


def _run(agent, xs, goals=None):
    state = agent.initial_state(xs.shape[1])
    outs = []
    for t, x in enumerate(xs):
        outs.append(agent.step(x, state, None, goal=None if goals is None else goals[t]))
    return outs


def _params(agent):
    named = list(agent.named_parameters())
    return [p for _, p, _ in named], [g for _, _, g in named]


def check_value_heads(rng, cases=100):
    def case(_):
        cfg = small_config(rng)
        agent = FeudalNet(cfg, seed=int(rng.integers(1 << 30)))
        B = 3
        y_m = rng.standard_normal((B, cfg.manager_hidden))
        y_w = rng.standard_normal((B, cfg.worker_hidden))
        w = rng.standard_normal((3, B))

        def loss():
            vm, ve, vi = agent.value_heads(y_m, y_w)
            return float((w[0] * vm + w[1] * ve + w[2] * vi).sum())

        agent.zero_grads()
        dym = agent.value_manager.backward(y_m, w[0][:, None])
        dyw = agent.value_ext.backward(y_w, w[1][:, None]) + agent.value_int.backward(y_w, w[2][:, None])
        heads = [agent.value_manager, agent.value_ext, agent.value_int]
        params = [p for m in heads for p in m.params.values()]
        grads = [m.grads[k] for m in heads for k in m.params]
        return fd_compare(loss, params + [y_m, y_w], grads + [dym, dyw], rng)
    return _timed("value_heads", cases, case)


def check_manager_path(rng, cases=100, T=9, B=2, mode="full_fun"):
    """Loss ``-sum_t A_t cos(s_{t+c} - s_t, g_t(theta))`` with latents held
    at their unperturbed values inside the cosine."""
    def case(_):
        cfg = small_config(rng, mode=mode)
        agent = FeudalNet(cfg, seed=int(rng.integers(1 << 30)))
        xs = _episode_inputs(rng, cfg, T, B)
        outs = _run(agent, xs)
        latents = np.stack([o.latent for o in outs])
        steps = T - cfg.c
        targets = np.zeros_like(latents)
        targets[:steps] = latents[cfg.c:]
        mask = np.zeros((T, B), dtype=bool)
        mask[:steps] = True
        adv = rng.standard_normal((T, B))
        direction = targets - latents if cfg.directional else targets

        def loss():
            goals = np.stack([o.goal for o in _run(agent, xs)])
            return float(-(adv[:steps] * nn.cosine_similarity(direction[:steps], goals[:steps])).sum())

        agent.zero_grads()
        goals = np.stack([o.goal for o in outs])
        d_goals = manager_goal_grads(latents, goals, targets, adv, mask, cfg.directional)
        zeros = np.zeros((T, B, cfg.num_actions))
        agent.backward([o.cache for o in outs], zeros, d_goals)
        params, grads = _params(agent)
        return fd_compare(loss, params, grads, rng, pattern=relu_pattern(agent, xs))
    return _timed("manager_path" + ("" if mode == "full_fun" else f"[{mode}]"), cases, case)


def check_worker_path(rng, cases=100, T=7, B=2, mode="full_fun"):
    """Loss ``-sum_t A_t log pi(a_t) - beta H(pi_t)``; goals are held fixed
    unless the mode routes Worker gradients into the Manager."""
    def case(_):
        cfg = small_config(rng, mode=mode)
        agent = FeudalNet(cfg, seed=int(rng.integers(1 << 30)))
        xs = _episode_inputs(rng, cfg, T, B)
        outs = _run(agent, xs)
        fixed = np.stack([o.goal for o in outs]) if cfg.feudal else None
        actions = rng.integers(cfg.num_actions, size=(T, B))
        adv = rng.standard_normal((T, B))
        beta = float(rng.uniform(0, 0.1))

        def loss():
            pi = np.stack([o.pi for o in _run(agent, xs, fixed)])
            logp = np.log(np.take_along_axis(pi, actions[..., None], -1)[..., 0])
            ent = nn.entropy(pi)
            return float((-adv * logp - beta * ent).sum())

        if fixed is not None:
            outs = _run(agent, xs, fixed)
        agent.zero_grads()
        pi = np.stack([o.pi for o in outs])
        agent.backward([o.cache for o in outs], nn.policy_loss_grad(pi, actions, adv, beta))
        params, grads = _params(agent)
        return fd_compare(loss, params, grads, rng, pattern=relu_pattern(agent, xs))
    return _timed("worker_path" + ("" if mode == "full_fun" else f"[{mode}]"), cases, case)


def check_critics(rng, cases=100, T=6, B=2):
    def case(_):
        cfg = small_config(rng)
        agent = FeudalNet(cfg, seed=int(rng.integers(1 << 30)))
        xs = _episode_inputs(rng, cfg, T, B)
        outs = _run(agent, xs)
        R = rng.standard_normal((3, T, B))

        def loss():
            o = _run(agent, xs)
            V = [np.stack([s.v_manager for s in o]), np.stack([s.v_ext for s in o]),
                 np.stack([s.v_int for s in o])]
            return float(sum(0.5 * ((v - r) ** 2).sum() for v, r in zip(V, R)))

        agent.zero_grads()
        V = [np.stack([s.v_manager for s in outs]), np.stack([s.v_ext for s in outs]),
             np.stack([s.v_int for s in outs])]
        zeros = np.zeros((T, B, cfg.num_actions))
        agent.backward([o.cache for o in outs], zeros, None, V[0] - R[0], V[1] - R[1], V[2] - R[2])
        params, grads = _params(agent)
        return fd_compare(loss, params, grads, rng, pattern=relu_pattern(agent, xs))
    return _timed("critics", cases, case)


def check_baseline(rng, cases=100, T=6, B=2):
    """Policy-gradient plus value loss through a baseline unroll."""
    def case(_):
        kind = ("lstm", "dlstm")[int(rng.integers(2))]
        cfg = BaselineConfig(int(rng.integers(3, 6)), int(rng.integers(2, 4)), hidden=4,
                             percept_hidden=5, recurrent_kind=kind, r=int(rng.integers(1, 4)))
        net = BaselineNet(cfg, seed=int(rng.integers(1 << 30)))
        xs = rng.standard_normal((T, B, cfg.obs_dim))
        prev = np.eye(cfg.num_actions)[rng.integers(cfg.num_actions, size=(T, B))]
        actions = rng.integers(cfg.num_actions, size=(T, B))
        adv, R = rng.standard_normal((2, T, B))
        beta = float(rng.uniform(0, 0.1))

        def run():
            state = net.initial_state(B)
            return [net.step(x, p, state) for x, p in zip(xs, prev)]

        def loss():
            outs = run()
            pi = np.stack([o[0] for o in outs])
            v = np.stack([o[1] for o in outs])
            logp = np.log(np.take_along_axis(pi, actions[..., None], -1)[..., 0])
            return float((-adv * logp - beta * nn.entropy(pi) + 0.5 * (v - R) ** 2).sum())

        outs = run()
        pi = np.stack([o[0] for o in outs])
        v = np.stack([o[1] for o in outs])
        net.zero_grads()
        net.backward([o[2] for o in outs], nn.policy_loss_grad(pi, actions, adv, beta), v - R)
        named = list(net.named_parameters())

        def pattern():
            return (xs @ net.percept.weight.T + net.percept.bias > 0).ravel()

        return fd_compare(loss, [p for _, p, _ in named], [g for _, _, g in named], rng,
                          pattern=pattern)
    return _timed("baseline", cases, case)


def check_tpg_equivalence(rng, cases=1000, T=8, B=2):
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(cases):
        cfg = small_config(rng, c=int(rng.integers(1, 4)))
        agent = FeudalNet(cfg, seed=int(rng.integers(1 << 30)))
        xs = rng.standard_normal((T, B, cfg.obs_dim))
        adv = rng.standard_normal((T, B))
        report = transition_pg_equivalence_check(agent, xs, adv)
        worst = max(worst, report["max_abs_deviation"])
    return CheckResult("tpg_equivalence", cases, worst, tolerance=1e-10,
                       seconds=time.perf_counter() - t0)


def run_all(seed=0, cases=100, tpg_cases=1000, extra=()):
    """Run every suite; ``extra`` adds (name, callable(rng, cases)) pairs."""
    rng = np.random.default_rng(seed)
    suites = [
        check_linear, check_lstm, check_policy_logprob, check_cosine,
        check_value_heads, check_manager_path, check_worker_path, check_critics, check_baseline,
        lambda r, n: check_manager_path(r, n, mode="absolute_goals"),
        lambda r, n: check_worker_path(r, n, mode="non_feudal"),
    ]
    results = [suite(rng, cases) for suite in suites]
    for _, fn in extra:
        results.append(fn(rng, cases))
    results.append(check_tpg_equivalence(rng, tpg_cases))
    return results
