"""Deterministic, seedable toy environments.

Every environment returns feature-vector observations that end with a
previous-reward channel. Rewards are always in {-1, 0, +1}.

Spec files are ``key = value`` lines (``#`` starts a comment)::

    kind = tmaze          # chain | tmaze | watermaze
    corridor_len = 4
    trials = 6
"""

from collections import deque
from dataclasses import dataclass, fields

import numpy as np


class ConfigError(ValueError):
    pass


class InvalidActionError(ValueError):
    pass


@dataclass
class EnvStep:
    observation: np.ndarray
    reward: float
    terminal: bool
    trial_boundary: bool


@dataclass
class ChainSpec:
    """Corridor of ``length`` cells; stepping forward off the last cell pays +1."""
    length: int = 12
    cap: int = 0

    kind = "chain"

    def validate(self):
        if self.length < 1:
            raise ConfigError("chain length must be >= 1")
        if self.cap < 0:
            raise ConfigError("cap must be >= 0")

    @property
    def step_cap(self):
        return self.cap or 4 * self.length


@dataclass
class TMazeSpec:
    """Stem of ``corridor_len`` cells topped by a junction with two arms.

    The rewarded arm is fixed per episode. The cue is visible only in the
    observation returned by the first step of a trial (the respawn and
    reset observations are cue-free); with ``cue_every_trial = false``
    only the first trial of the episode shows it.
    """
    corridor_len: int = 4
    variable_len: bool = False
    trials: int = 6
    cap: int = 0
    cue_every_trial: bool = True

    kind = "tmaze"

    def validate(self):
        if self.corridor_len < 1 or self.trials < 1:
            raise ConfigError("corridor_len and trials must be >= 1")
        if self.cap < 0:
            raise ConfigError("cap must be >= 0")

    @property
    def step_cap(self):
        return self.cap or 4 * (self.corridor_len + 1)


@dataclass
class WaterMazeSpec:
    """``size`` x ``size`` open grid with a hidden platform fixed per episode."""
    size: int = 5
    trials: int = 4
    cap: int = 0

    kind = "watermaze"

    def validate(self):
        if self.size < 2 or self.trials < 1:
            raise ConfigError("watermaze needs size >= 2 and trials >= 1")
        if self.cap < 0:
            raise ConfigError("cap must be >= 0")

    @property
    def step_cap(self):
        return self.cap or 4 * 2 * (self.size - 1)


SPECS = {cls.kind: cls for cls in (ChainSpec, TMazeSpec, WaterMazeSpec)}


def _coerce(value, typ, key):
    try:
        if typ is bool or typ == "bool":
            low = str(value).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int or typ == "int":
            return int(value)
        if typ is float or typ == "float":
            return float(value)
        return str(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot read {value!r} as {getattr(typ, '__name__', typ)}")


def spec_from_dict(values):
    values = dict(values)
    kind = values.pop("kind", None)
    if kind not in SPECS:
        raise ConfigError(f"env kind must be one of {sorted(SPECS)}, got {kind!r}")
    cls = SPECS[kind]
    known = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} for env kind {kind!r}")
        kwargs[key] = _coerce(value, known[key], key)
    spec = cls(**kwargs)
    spec.validate()
    return spec


def parse_spec(text):
    """Parse a ``key = value`` environment spec."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return spec_from_dict(values)


def spec_to_text(spec):
    lines = [f"kind = {spec.kind}"]
    for f in fields(spec):
        v = getattr(spec, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------

class Env:
    num_actions = 4
    obs_dim = 0

    def __init__(self, spec):
        spec.validate()
        self.spec = spec
        self.rng = np.random.default_rng(0)
        self._done = True

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self._done = False
        self.prev_reward = 0.0
        self.trial = 0
        self.trial_steps = 0
        self._new_episode()
        return self.observe()

    def step(self, action):
        if self._done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        if not (isinstance(action, (int, np.integer)) and 0 <= action < self.num_actions):
            raise InvalidActionError(f"action {action!r} outside [0, {self.num_actions})")
        self.trial_steps += 1
        reward, trial_over = self._move(int(action))
        if not trial_over and self.trial_steps >= self.spec.step_cap:
            reward, trial_over = 0.0, True
        terminal = False
        if trial_over:
            self.trial += 1
            self.trial_steps = 0
            terminal = self.trial >= self._trials()
            if not terminal:
                self._new_trial()
        self.prev_reward = reward
        self._done = terminal
        return EnvStep(self.observe(), reward, terminal, trial_over)

    def _trials(self):
        return self.spec.trials


class ChainEnv(Env):
    """Actions: 0 = back, 1 = forward. One trial per episode."""
    num_actions = 2

    def __init__(self, spec):
        super().__init__(spec)
        self.obs_dim = spec.length + 1

    def _trials(self):
        return 1

    def _new_episode(self):
        self.pos = 0

    def _new_trial(self):
        self.pos = 0

    def _move(self, action):
        if action == 1:
            if self.pos == self.spec.length - 1:
                return 1.0, True
            self.pos += 1
        else:
            self.pos = max(self.pos - 1, 0)
        return 0.0, False

    def observe(self):
        obs = np.zeros(self.obs_dim)
        obs[self.pos] = 1.0
        obs[-1] = self.prev_reward
        return obs


class TMazeEnv(Env):
    """Cells 0..L-1 form the stem (0 = base), L is the junction, L+1 and L+2
    are the left and right arms. Actions: 0 up, 1 down, 2 left, 3 right.

    Observation: one-hot cell (L+3) + cue (left, right) + previous reward.
    """
    UP, DOWN, LEFT, RIGHT = range(4)

    def __init__(self, spec):
        super().__init__(spec)
        L = spec.corridor_len
        self.n_cells = L + 3
        self.obs_dim = self.n_cells + 3

    def _new_episode(self):
        self.rewarded = int(self.rng.integers(2))  # 0 left, 1 right
        self._new_trial()

    def _new_trial(self):
        if self.spec.variable_len:
            self.length = int(self.rng.integers(1, self.spec.corridor_len + 1))
        else:
            self.length = self.spec.corridor_len
        self.pos = 0
        self.cue_on = False

    def _cell_index(self):
        L = self.spec.corridor_len
        if self.pos == "left":
            return L + 1
        if self.pos == "right":
            return L + 2
        # variable-length corridors are aligned so the junction keeps index L
        return L - self.length + self.pos

    def _move(self, action):
        self.cue_on = self.trial_steps == 1 and (self.spec.cue_every_trial or self.trial == 0)
        if self.pos == self.length:
            if action == self.LEFT:
                self.pos = "left"
            elif action == self.RIGHT:
                self.pos = "right"
            elif action == self.DOWN:
                self.pos -= 1
            if self.pos in ("left", "right"):
                hit = 0 if self.pos == "left" else 1
                return (1.0 if hit == self.rewarded else -1.0), True
        elif action == self.UP:
            self.pos += 1
        elif action == self.DOWN:
            self.pos = max(self.pos - 1, 0)
        return 0.0, False

    def observe(self):
        obs = np.zeros(self.obs_dim)
        obs[self._cell_index()] = 1.0
        if self.cue_on:
            obs[self.n_cells + self.rewarded] = 1.0
        obs[-1] = self.prev_reward
        return obs

class WaterMazeEnv(Env):
    """Actions: 0 up, 1 down, 2 left, 3 right. Walls block moves.

    Observation: one-hot cell (size**2) + four wall-contact cues + previous
    reward.
    """
    MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))

    def __init__(self, spec):
        super().__init__(spec)
        n = spec.size
        self.obs_dim = n * n + 5

    def _new_episode(self):
        n = self.spec.size
        self.platform = int(self.rng.integers(n * n))
        self._new_trial()

    def _new_trial(self):
        n = self.spec.size
        cell = int(self.rng.integers(n * n - 1))
        if cell >= self.platform:
            cell += 1
        self.pos = divmod(cell, n)

    def _move(self, action):
        n = self.spec.size
        dr, dc = self.MOVES[action]
        r, c = self.pos
        r2, c2 = r + dr, c + dc
        if 0 <= r2 < n and 0 <= c2 < n:
            self.pos = (r2, c2)
        if self.pos[0] * n + self.pos[1] == self.platform:
            return 1.0, True
        return 0.0, False

    def observe(self):
        n = self.spec.size
        obs = np.zeros(self.obs_dim)
        r, c = self.pos
        obs[r * n + c] = 1.0
        obs[n * n:n * n + 4] = (r == 0, r == n - 1, c == 0, c == n - 1)
        obs[-1] = self.prev_reward
        return obs


ENV_CLASSES = {"chain": ChainEnv, "tmaze": TMazeEnv, "watermaze": WaterMazeEnv}


def make_env(spec):
    return ENV_CLASSES[spec.kind](spec)


def _grid_distances(n, target):
    dist = np.full(n * n, -1)
    dist[target] = 0
    queue = deque([target])
    while queue:
        cell = queue.popleft()
        r, c = divmod(cell, n)
        for dr, dc in WaterMazeEnv.MOVES:
            r2, c2 = r + dr, c + dc
            if 0 <= r2 < n and 0 <= c2 < n and dist[r2 * n + c2] < 0:
                dist[r2 * n + c2] = dist[cell] + 1
                queue.append(r2 * n + c2)
    return dist


def optimal_return(spec):
    """Best achievable expected episodic (undiscounted) return."""
    spec.validate()
    if spec.kind == "chain":
        return 1.0 if spec.length <= spec.step_cap else 0.0
    if spec.kind == "tmaze":
        return float(spec.trials) if spec.corridor_len + 1 <= spec.step_cap else 0.0
    # water maze: an agent that knows the platform succeeds on every trial
    # whose breadth-first distance fits inside the step cap
    n = spec.size
    total = 0.0
    for platform in range(n * n):
        dist = np.delete(_grid_distances(n, platform), platform)
        total += spec.trials * np.mean(dist <= spec.step_cap)
    return total / (n * n)


def cue_blind_return(spec):
    """Expected return of the best policy that ignores the T-maze cue:
    guess on the first trial, then exploit the revealed arm."""
    if spec.kind != "tmaze":
        raise ValueError("cue-blind yardstick only defined for the T-maze")
    M = spec.trials
    return 0.5 * M + 0.5 * (-1.0 + (M - 1))


def expected_trial_length(spec):
    """Mean breadth-first shortest-path length per water-maze trial."""
    n = spec.size
    lengths = [np.delete(_grid_distances(n, p), p).mean() for p in range(n * n)]
    return float(np.mean(lengths))
