"""Metric CSV files, cross-seed aggregation and learning-curve figures.

Every CSV starts with a schema line, e.g.::

    #schema=fun-metrics/1,epoch_steps=10000
    step,episodes,return,...

Floats are written with 17 significant digits so a reread is bit-exact.
"""

import csv
import io
import math
import os

import numpy as np

SCHEMA = "fun-metrics/1"
AGG_SCHEMA = "fun-aggregate/1"
EPOCH_STEPS = 10_000

METRIC_COLUMNS = [
    "step", "episodes", "return", "intrinsic_return_mean", "entropy",
    "value_loss_manager", "value_loss_ext", "value_loss_int", "skipped_manager_updates",
]
AGG_COLUMNS = ["step", "epoch", "seeds", "return_q25", "return_median", "return_q75"]
INT_COLUMNS = {"step", "episodes", "skipped_manager_updates", "epoch", "seeds"}


class SchemaError(ValueError):
    pass


def fmt(value):
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return "nan"
    return format(value, ".17g")


def _schema_line(schema, epoch_steps):
    return f"#schema={schema},epoch_steps={epoch_steps}\n"


def render_csv(rows, columns=METRIC_COLUMNS, schema=SCHEMA, epoch_steps=EPOCH_STEPS):
    out = io.StringIO()
    out.write(_schema_line(schema, epoch_steps))
    out.write(",".join(columns) + "\n")
    for row in rows:
        out.write(",".join(fmt(row[c]) for c in columns) + "\n")
    return out.getvalue()


def write_csv(path, rows, columns=METRIC_COLUMNS, schema=SCHEMA, epoch_steps=EPOCH_STEPS):
    with open(path, "w", newline="\n") as f:
        f.write(render_csv(rows, columns, schema, epoch_steps))


def read_csv(path, schema=SCHEMA):
    """Return (meta, rows); rejects files whose schema is not ``schema``."""
    with open(path, newline="") as f:
        first = f.readline().strip()
        if not first.startswith("#"):
            raise SchemaError(f"{path}: missing schema line")
        meta = dict(item.split("=", 1) for item in first[1:].split(",") if "=" in item)
        if meta.get("schema") != schema:
            raise SchemaError(f"{path}: schema {meta.get('schema')!r} is not {schema!r}")
        meta["epoch_steps"] = int(meta.get("epoch_steps", EPOCH_STEPS))
        rows = []
        for rec in csv.DictReader(f):
            rows.append({k: int(v) if k in INT_COLUMNS else float(v) for k, v in rec.items()})
    return meta, rows


class MetricsLog:
    """Folds per-segment metrics into one row per ``interval`` steps."""

    def __init__(self, interval):
        self.interval = interval
        self.rows = []
        self.steps = 0
        self.episodes = 0
        self.skipped = 0
        self._reset()

    def _reset(self):
        self._returns = []
        self._acc = {k: [] for k in ("intrinsic_mean", "entropy", "value_loss_manager",
                                     "value_loss_ext", "value_loss_int")}
        self._next = (self.steps // self.interval + 1) * self.interval

    def add(self, metrics):
        """Add one segment's metrics; returns the new row if one was closed."""
        self.steps += metrics["steps"]
        self.episodes += len(metrics["episode_returns"])
        self.skipped += metrics["skipped_manager_updates"]
        self._returns.extend(metrics["episode_returns"])
        for k, v in self._acc.items():
            v.append(metrics[k])
        if self.steps < self._next:
            return None
        row = {
            "step": self.steps,
            "episodes": self.episodes,
            "return": float(np.mean(self._returns)) if self._returns else float("nan"),
            "intrinsic_return_mean": float(np.mean(self._acc["intrinsic_mean"])),
            "entropy": float(np.mean(self._acc["entropy"])),
            "value_loss_manager": float(np.mean(self._acc["value_loss_manager"])),
            "value_loss_ext": float(np.mean(self._acc["value_loss_ext"])),
            "value_loss_int": float(np.mean(self._acc["value_loss_int"])),
            "skipped_manager_updates": self.skipped,
        }
        self.rows.append(row)
        self._reset()
        return row


def aggregate(per_seed_rows, epoch_steps=EPOCH_STEPS):
    """Per-epoch quartiles of the mean episode return across seeds.

    A seed's value for an epoch is the mean of its row returns whose step
    falls inside that epoch; epochs with no finished episode are skipped
    for that seed.
    """
    by_epoch = {}
    for rows in per_seed_rows:
        per = {}
        for row in rows:
            epoch = (row["step"] - 1) // epoch_steps
            if not math.isnan(row["return"]):
                per.setdefault(epoch, []).append(row["return"])
        for epoch, vals in per.items():
            by_epoch.setdefault(epoch, []).append(float(np.mean(vals)))
    out = []
    for epoch in sorted(by_epoch):
        vals = np.array(by_epoch[epoch])
        q25, med, q75 = np.percentile(vals, [25, 50, 75])
        out.append({"step": (epoch + 1) * epoch_steps, "epoch": epoch + 1, "seeds": len(vals),
                    "return_q25": q25, "return_median": med, "return_q75": q75})
    return out


def gnuplot_script(aggregate_csv, title, image="curve.png"):
    """A stand-alone gnuplot script that plots the aggregate file."""
    return "\n".join([
        "set datafile separator ','",
        "set datafile commentschars '#'",
        "set key autotitle columnhead",
        f"set title '{title}'",
        "set xlabel 'environment steps'",
        "set ylabel 'episode return'",
        "set terminal pngcairo size 800,500",
        f"set output '{image}'",
        f"plot '{aggregate_csv}' using 1:4:6 with filledcurves title 'quartiles', \\",
        "     '' using 1:5 with lines lw 2 title 'median'",
        "",
    ])


def plot_curves(series, path, title="", optimal=None):
    """Render median and quartile bands for each entry of ``series``
    (label -> aggregate rows) to an image file."""
    import matplotlib
    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, rows in series.items():
        if not rows:
            continue
        x = [r["step"] for r in rows]
        line, = ax.plot(x, [r["return_median"] for r in rows], label=label)
        ax.fill_between(x, [r["return_q25"] for r in rows], [r["return_q75"] for r in rows],
                        color=line.get_color(), alpha=0.2, linewidth=0)
    if optimal is not None:
        ax.axhline(optimal, color="0.5", linestyle="--", linewidth=1, label="optimal")
    ax.set_xlabel("environment steps")
    ax.set_ylabel("episode return (median over seeds)")
    if title:
        ax.set_title(title)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.legend(loc="best", frameon=False)
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
