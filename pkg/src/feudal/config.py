"""INI-style run configuration.

::

    [run]
    model = fun            # fun | lstm | dlstm
    seeds = 0,1,2
    out = runs/chain

    [env]
    kind = chain
    length = 12
    cap = 48

    [agent]                # AgentConfig fields (or BaselineConfig fields)
    c = 10

    [train]                # TrainConfig fields
    total_steps = 300000

Observation and action sizes are taken from the environment.
"""

import configparser
import re
from dataclasses import dataclass, field, fields

from .agent import AgentConfig
from .baseline import BaselineConfig, match_hidden
from .envs import ConfigError, make_env, spec_from_dict
from .training import TrainConfig

MODELS = ("fun", "lstm", "dlstm")


@dataclass
class RunConfig:
    model: str
    env: object
    agent: object
    train: TrainConfig
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs"


def _line_index(text):
    """Map (section, key) -> line number for diagnostics."""
    index, section = {}, None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        m = re.match(r"\[(.+)\]$", line)
        if m:
            section = m.group(1).strip()
        elif "=" in line and section is not None:
            index[(section, line.split("=", 1)[0].strip().lower())] = lineno
    return index


def _where(index, section, key):
    line = index.get((section, key))
    return f"line {line}, [{section}] {key}" if line else f"[{section}] {key}"


def _typed(cls, values, section, index, fixed=None):
    known = {f.name: f.type for f in fields(cls)}
    kwargs = dict(fixed or {})
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"{_where(index, section, key)}: unknown key")
        typ = known[key]
        typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
        try:
            if typ == "bool":
                low = raw.strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ValueError(raw)
                kwargs[key] = low in ("1", "true", "yes", "on")
            elif typ == "int":
                kwargs[key] = int(raw)
            elif typ == "float":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw.strip()
        except ValueError:
            raise ConfigError(f"{_where(index, section, key)}: cannot read {raw!r} as {typ}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}")


def parse_seeds(text):
    try:
        seeds = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"seed list {text!r} is not comma-separated integers")
    if not seeds:
        raise ConfigError("at least one seed is required")
    return seeds


def _strip_comments(values):
    return {k: v.split("#", 1)[0].strip() for k, v in values.items()}


def parse_config(text, source="<config>"):
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}")
    index = _line_index(text)
    unknown = set(parser.sections()) - {"run", "env", "agent", "train"}
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")
    if not parser.has_section("env"):
        raise ConfigError(f"{source}: missing [env] section")

    run = _strip_comments(parser["run"]) if parser.has_section("run") else {}
    model = run.pop("model", "fun")
    if model not in MODELS:
        raise ConfigError(f"{_where(index, 'run', 'model')}: model must be one of {MODELS}")
    seeds = parse_seeds(run.pop("seeds", "0"))
    out = run.pop("out", "runs")
    if run:
        raise ConfigError(f"{_where(index, 'run', sorted(run)[0])}: unknown key")

    env_values = _strip_comments(parser["env"])
    try:
        spec = spec_from_dict(env_values)
    except ConfigError as exc:
        raise ConfigError(f"{source} [env]: {exc}")
    env = make_env(spec)
    dims = {"obs_dim": env.obs_dim, "num_actions": env.num_actions}

    agent_values = _strip_comments(parser["agent"]) if parser.has_section("agent") else {}
    for key in dims:
        if key in agent_values:
            raise ConfigError(f"{_where(index, 'agent', key)}: set by the environment")
    if model == "fun":
        agent = _typed(AgentConfig, agent_values, "agent", index, dims)
    else:
        agent_values.setdefault("recurrent_kind", model)
        if "hidden" not in agent_values:
            # parameter-matched to a default FuN agent on the same environment
            matched = match_hidden(AgentConfig(**dims), model)
            agent_values["hidden"] = str(matched.hidden)
        agent = _typed(BaselineConfig, agent_values, "agent", index, dims)

    train_values = _strip_comments(parser["train"]) if parser.has_section("train") else {}
    train = _typed(TrainConfig, train_values, "train", index)
    return RunConfig(model, spec, agent, train, seeds, out)


def load_config(path):
    with open(path) as f:
        return parse_config(f.read(), source=path)
