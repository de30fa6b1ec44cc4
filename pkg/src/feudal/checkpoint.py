"""Parameter checkpoints: a plain-text header followed by raw float64 data.

Layout::

    fun-checkpoint/1
    model fun
    config {"obs_dim": 10, ...}
    param percept.weight 64 10
    ...
    end
    <little-endian float64 values of every parameter, in header order>
"""

import json

import numpy as np

MAGIC = "fun-checkpoint/1"
_LE = np.dtype("<f8")


class IncompatibleCheckpointError(ValueError):
    pass


def _model_kind(model):
    from .baseline import BaselineNet

    return "baseline" if isinstance(model, BaselineNet) else "fun"


def save(model, path):
    lines = [MAGIC, f"model {_model_kind(model)}",
             "config " + json.dumps(model.config.to_dict(), sort_keys=True)]
    arrays = []
    for name, p, _ in model.named_parameters():
        lines.append("param " + " ".join([name] + [str(n) for n in p.shape]))
        arrays.append(p)
    lines.append("end")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for p in arrays:
            f.write(np.ascontiguousarray(p, dtype=_LE).tobytes())


def read(path):
    """Return (kind, config dict, [(name, array)])."""
    with open(path, "rb") as f:
        if f.readline().decode("ascii", "replace").strip() != MAGIC:
            raise IncompatibleCheckpointError(f"{path}: not a {MAGIC} file")
        kind = config = None
        manifest = []
        while True:
            line = f.readline()
            if not line:
                raise IncompatibleCheckpointError(f"{path}: truncated header")
            line = line.decode("ascii").rstrip("\n")
            if line == "end":
                break
            key, _, rest = line.partition(" ")
            if key == "model":
                kind = rest
            elif key == "config":
                config = json.loads(rest)
            elif key == "param":
                name, *dims = rest.split()
                manifest.append((name, tuple(int(d) for d in dims)))
            else:
                raise IncompatibleCheckpointError(f"{path}: unexpected header line {line!r}")
        params = []
        for name, shape in manifest:
            n = int(np.prod(shape, dtype=np.int64))
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise IncompatibleCheckpointError(f"{path}: data ends inside {name}")
            params.append((name, np.frombuffer(buf, dtype=_LE).astype(np.float64).reshape(shape)))
        if f.read(1):
            raise IncompatibleCheckpointError(f"{path}: trailing bytes after parameter data")
    return kind, config, params


def load_into(model, path):
    """Copy checkpoint values into ``model``'s parameters in place."""
    kind, _, params = read(path)
    if kind != _model_kind(model):
        raise IncompatibleCheckpointError(f"checkpoint holds a {kind} model, not {_model_kind(model)}")
    target = {name: p for name, p, _ in model.named_parameters()}
    names = [name for name, _ in params]
    if sorted(names) != sorted(target):
        missing = sorted(set(target) - set(names))
        extra = sorted(set(names) - set(target))
        raise IncompatibleCheckpointError(f"parameter names differ: missing {missing}, unexpected {extra}")
    for name, value in params:
        if target[name].shape != value.shape:
            raise IncompatibleCheckpointError(
                f"{name}: checkpoint shape {value.shape} vs model shape {target[name].shape}")
    for name, value in params:
        target[name][...] = value
    for m in model.modules().values():
        m.bump()
    return model


def load(path, seed=0):
    """Rebuild the model described by the checkpoint header."""
    from .agent import AgentConfig, FeudalNet
    from .baseline import BaselineConfig, BaselineNet

    kind, config, _ = read(path)
    if kind == "fun":
        model = FeudalNet(AgentConfig(**config), seed=seed)
    elif kind == "baseline":
        model = BaselineNet(BaselineConfig(**config), seed=seed)
    else:
        raise IncompatibleCheckpointError(f"unknown model kind {kind!r}")
    return load_into(model, path)
