"""Small dense numeric kernel with hand-derived backward passes.

Arrays are plain float64 numpy arrays. Every layer accepts an optional
leading batch axis; backward calls *accumulate* into ``grads`` so that
several losses can be composed before a single optimizer step.
"""

import numpy as np

DTYPE = np.float64
NORM_EPS = 1e-8


class DimensionError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    """Raised when a backward call receives a cache from another layer or
    from before a parameter update."""


class Module:
    """Base for parameterised layers: ``params`` and ``grads`` share keys."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.version = 0

    def _register(self, name, value):
        value = np.ascontiguousarray(value, dtype=DTYPE)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def zero_grads(self):
        for g in self.grads.values():
            g.fill(0.0)

    def named_parameters(self, prefix=""):
        for name, p in self.params.items():
            yield prefix + name, p, self.grads[name]

    def bump(self):
        self.version += 1


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Affine map ``x @ W.T + b`` with an optional bias."""

    def __init__(self, n_in, n_out, bias=True, rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_in = n_in
        self.n_out = n_out
        self.has_bias = bias
        self._register("weight", uniform_init(rng, (n_out, n_in), n_in))
        if bias:
            self._register("bias", uniform_init(rng, (n_out,), n_in))

    @property
    def weight(self):
        return self.params["weight"]

    @property
    def bias(self):
        return self.params.get("bias")

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"linear expects last dim {self.n_in}, got {x.shape}")
        out = x @ self.weight.T
        if self.has_bias:
            out = out + self.bias
        return out

    def backward(self, x, grad_out):
        x = np.asarray(x, dtype=DTYPE)
        grad_out = np.asarray(grad_out, dtype=DTYPE)
        if x.shape[-1] != self.n_in or grad_out.shape[-1] != self.n_out:
            raise DimensionError(
                f"linear backward shapes {x.shape} / {grad_out.shape} do not match "
                f"({self.n_out} x {self.n_in})"
            )
        if x.shape[:-1] != grad_out.shape[:-1]:
            raise DimensionError("input and upstream batch shapes differ")
        x2 = x.reshape(-1, self.n_in)
        g2 = grad_out.reshape(-1, self.n_out)
        self.grads["weight"] += g2.T @ x2
        if self.has_bias:
            self.grads["bias"] += g2.sum(axis=0)
        return grad_out @ self.weight


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class LSTMCell(Module):
    """Standard LSTM cell without peepholes.

    Gate layout along the 4H axis is (input, forget, output, candidate).
    The forget-gate bias starts at 1.0.
    """

    def __init__(self, n_in, hidden, rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_in = n_in
        self.hidden = hidden
        fan_in = n_in + hidden
        self._register("w_ih", uniform_init(rng, (4 * hidden, n_in), fan_in))
        self._register("w_hh", uniform_init(rng, (4 * hidden, hidden), fan_in))
        b = uniform_init(rng, (4 * hidden,), fan_in)
        b[hidden:2 * hidden] = 1.0
        self._register("bias", b)

    def forward(self, x, h, c):
        H = self.hidden
        if x.shape[-1] != self.n_in or h.shape[-1] != H or c.shape[-1] != H:
            raise DimensionError(
                f"lstm expects input {self.n_in}, state {H}; got {x.shape}, {h.shape}, {c.shape}"
            )
        p = self.params
        a = x @ p["w_ih"].T
        a += h @ p["w_hh"].T
        a += p["bias"]
        gates = sigmoid(a[..., :3 * H])
        i = gates[..., :H]
        f = gates[..., H:2 * H]
        o = gates[..., 2 * H:]
        u = np.tanh(a[..., 3 * H:])
        c_new = f * c + i * u
        tc = np.tanh(c_new)
        h_new = o * tc
        cache = (id(self), self.version, x, h, c, i, f, o, u, tc)
        return h_new, c_new, cache

    def gate_backward(self, cache, dh, dc):
        """Backward without touching parameter grads.

        Returns (d_preactivation, dx, dh_prev, dc_prev); pair with
        ``accumulate`` to fold many steps into one matmul.
        """
        owner, version, x, h, c, i, f, o, u, tc = cache
        if owner != id(self) or version != self.version:
            raise StaleCacheError("LSTM cache does not belong to this cell state")
        if dh.shape != h.shape or dc.shape != c.shape:
            raise DimensionError("upstream gradient shape does not match cached state")
        dc_total = dc + dh * o * (1.0 - tc * tc)
        da = np.concatenate(
            [dc_total * u * i * (1.0 - i),
             dc_total * c * f * (1.0 - f),
             dh * tc * o * (1.0 - o),
             dc_total * i * (1.0 - u * u)],
            axis=-1,
        )
        p = self.params
        return da, da @ p["w_ih"], da @ p["w_hh"], dc_total * f

    def accumulate(self, xs, hs, das):
        """Add parameter grads for stacked inputs, previous states and gate
        gradients (leading axes are flattened)."""
        da2 = das.reshape(-1, 4 * self.hidden)
        self.grads["w_ih"] += da2.T @ xs.reshape(-1, self.n_in)
        self.grads["w_hh"] += da2.T @ hs.reshape(-1, self.hidden)
        self.grads["bias"] += da2.sum(axis=0)

    def backward(self, cache, dh, dc):
        da, dx, dh_prev, dc_prev = self.gate_backward(cache, dh, dc)
        self.accumulate(cache[2], cache[3], da)
        return dx, dh_prev, dc_prev


def softmax(logits):
    logits = np.asarray(logits, dtype=DTYPE)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    logits = np.asarray(logits, dtype=DTYPE)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def entropy(pi):
    return -(pi * np.log(np.clip(pi, 1e-300, None))).sum(axis=-1)


def policy_loss_grad(pi, actions, advantages, entropy_weight=0.0):
    """Gradient w.r.t. logits of ``-adv * log pi[a] - entropy_weight * H(pi)``.

    Leading axes of ``pi`` are batch axes; ``actions`` and ``advantages``
    share them.
    """
    pi = np.asarray(pi, dtype=DTYPE)
    grad = pi * np.asarray(advantages, dtype=DTYPE)[..., None]
    onehot = np.zeros_like(pi)
    np.put_along_axis(onehot, np.asarray(actions)[..., None], 1.0, axis=-1)
    grad -= onehot * np.asarray(advantages, dtype=DTYPE)[..., None]
    if entropy_weight:
        logp = np.log(np.clip(pi, 1e-300, None))
        h = -(pi * logp).sum(axis=-1, keepdims=True)
        grad += entropy_weight * pi * (logp + h)
    return grad


def cosine_similarity(a, b):
    """Cosine similarity along the last axis; 0 where either norm < 1e-8."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na >= NORM_EPS) & (nb >= NORM_EPS)
    denom = np.where(ok, na * nb, 1.0)
    out = np.where(ok, (a * b).sum(axis=-1) / denom, 0.0)
    return np.clip(out, -1.0, 1.0) if out.ndim else float(np.clip(out, -1.0, 1.0))


def cosine_similarity_backward(a, b, upstream=1.0):
    """Return (d/da, d/db) of ``upstream * cos(a, b)``; zero on degenerate norms."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    up = np.asarray(upstream, dtype=DTYPE)
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    ok = (na >= NORM_EPS) & (nb >= NORM_EPS)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    cos = (a * b).sum(axis=-1, keepdims=True) / (na_s * nb_s)
    up = up[..., None] if up.ndim == a.ndim - 1 else up
    da = np.where(ok, up * (b / (na_s * nb_s) - cos * a / (na_s * na_s)), 0.0)
    db = np.where(ok, up * (a / (na_s * nb_s) - cos * b / (nb_s * nb_s)), 0.0)
    return da, db


class RMSProp:
    """Non-centred RMSProp over a list of (param, grad) array pairs.

    ``acc <- decay*acc + (1-decay)*g**2``;  ``p <- p - lr*g/sqrt(acc+eps)``.
    """

    def __init__(self, pairs, learning_rate=1e-3, decay=0.99, eps=1e-8, modules=()):
        self.pairs = list(pairs)
        self.learning_rate = learning_rate
        self.decay = decay
        self.eps = eps
        self.acc = [np.zeros_like(p) for p, _ in self.pairs]
        self.modules = list(modules)

    def step(self):
        lr = self.learning_rate
        d = self.decay
        for (p, g), acc in zip(self.pairs, self.acc):
            acc *= d
            acc += (1.0 - d) * g * g
            p -= lr * g / np.sqrt(acc + self.eps)
        for m in self.modules:
            m.bump()


def zero_grads(modules):
    for m in modules:
        m.zero_grads()
