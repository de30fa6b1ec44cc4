import csv
import math
import statistics

import numpy as np
import pytest

from feudal import report
from feudal.agent import AgentConfig
from feudal.baseline import BaselineConfig
from feudal.config import parse_config, parse_seeds
from feudal.envs import ChainSpec, ConfigError


def _rows(rng, n, interval=5000):
    return [{"step": interval * (i + 1), "episodes": 3 * i, "return": float(rng.standard_normal()),
             "intrinsic_return_mean": float(rng.random()) / 3, "entropy": math.pi * i,
             "value_loss_manager": 1e-300, "value_loss_ext": 0.1, "value_loss_int": float("nan"),
             "skipped_manager_updates": i} for i in range(n)]


# -- CSV ---------------------------------------------------------------------

def test_csv_round_trip_is_bit_exact(tmp_path):
    rows = _rows(np.random.default_rng(0), 7)
    path = tmp_path / "m.csv"
    report.write_csv(path, rows)
    meta, back = report.read_csv(path)
    assert meta == {"schema": report.SCHEMA, "epoch_steps": report.EPOCH_STEPS}
    for a, b in zip(rows, back):
        for k in report.METRIC_COLUMNS:
            if isinstance(a[k], float) and math.isnan(a[k]):
                assert math.isnan(b[k])
            else:
                assert a[k] == b[k] and type(a[k]) is type(b[k])
    raw = path.read_bytes()
    assert b"\r" not in raw and raw.splitlines()[1].decode() == ",".join(report.METRIC_COLUMNS)


def test_csv_rejects_other_schema(tmp_path):
    path = tmp_path / "m.csv"
    report.write_csv(path, _rows(np.random.default_rng(1), 2), schema="fun-metrics/2")
    with pytest.raises(report.SchemaError):
        report.read_csv(path)
    path.write_text("step,return\n1,2\n")
    with pytest.raises(report.SchemaError):
        report.read_csv(path)


def test_metrics_log_closes_rows_on_interval():
    log = report.MetricsLog(100)
    seg = dict(steps=40, episode_returns=[1.0], intrinsic_mean=0.5, entropy=1.0,
               value_loss_manager=0.0, value_loss_ext=0.0, value_loss_int=0.0,
               skipped_manager_updates=1)
    closed = [log.add(seg) for _ in range(6)]
    assert [r is not None for r in closed] == [False, False, True, False, True, False]
    assert [r["step"] for r in log.rows] == [120, 200]
    assert log.rows[1]["episodes"] == 5 and log.rows[1]["skipped_manager_updates"] == 5
    empty = dict(seg, episode_returns=[], steps=100)
    assert math.isnan(report.MetricsLog(100).add(empty)["return"])


# -- aggregation ---------------------------------------------------------------

def _oracle_aggregate(paths, epoch_steps):
    per_epoch = {}
    for path in paths:
        with open(path) as f:
            lines = [line for line in f if not line.startswith("#")]
        per_seed = {}
        for rec in csv.DictReader(lines):
            value = float(rec["return"])
            if value == value:
                per_seed.setdefault((int(rec["step"]) - 1) // epoch_steps, []).append(value)
        for epoch, values in per_seed.items():
            per_epoch.setdefault(epoch, []).append(statistics.fmean(values))
    out = {}
    for epoch, values in per_epoch.items():
        if len(values) == 1:
            q = (values[0],) * 3
        else:
            q = statistics.quantiles(values, n=4, method="inclusive")
        out[epoch + 1] = (q[0], statistics.median(values), q[2])
    return out


def test_aggregate_matches_independent_recomputation(tmp_path):
    rng = np.random.default_rng(2)
    paths = []
    for seed in range(5):
        rows = _rows(rng, 9, interval=3000 + 1000 * (seed % 2))
        if seed == 3:
            rows[2]["return"] = float("nan")
        path = tmp_path / f"seed{seed}.csv"
        report.write_csv(path, rows)
        paths.append(path)
    agg = report.aggregate([report.read_csv(p)[1] for p in paths])
    oracle = _oracle_aggregate(paths, report.EPOCH_STEPS)
    assert [r["epoch"] for r in agg] == sorted(oracle)
    for r in agg:
        q25, med, q75 = oracle[r["epoch"]]
        assert r["return_median"] == pytest.approx(med, abs=1e-12)
        assert r["return_q25"] == pytest.approx(q25, abs=1e-12)
        assert r["return_q75"] == pytest.approx(q75, abs=1e-12)
        assert r["step"] == r["epoch"] * report.EPOCH_STEPS


def test_aggregate_file_and_plot_outputs(tmp_path):
    agg = report.aggregate([_rows(np.random.default_rng(3), 6)])
    report.write_csv(tmp_path / "agg.csv", agg, report.AGG_COLUMNS, report.AGG_SCHEMA)
    _, back = report.read_csv(tmp_path / "agg.csv", report.AGG_SCHEMA)
    assert back == agg
    script = report.gnuplot_script("agg.csv", "demo")
    assert "'agg.csv'" in script and "using 1:5" in script
    png = report.plot_curves({"fun": agg}, str(tmp_path / "fig" / "c.png"), "demo", optimal=1.0)
    assert open(png, "rb").read(8) == b"\x89PNG\r\n\x1a\n"


# -- config ------------------------------------------------------------------

GOOD = """
[run]
model = fun
seeds = 0, 1,2
out = somewhere

[env]
kind = chain      # delayed reward
length = 7
cap = 30

[agent]
c = 4
alpha = 0.5

[train]
total_steps = 2000
anneal_lr = yes
"""


def test_parse_good_config():
    run = parse_config(GOOD)
    assert run.model == "fun" and run.seeds == [0, 1, 2] and run.out == "somewhere"
    assert run.env == ChainSpec(length=7, cap=30)
    assert isinstance(run.agent, AgentConfig)
    assert (run.agent.obs_dim, run.agent.num_actions, run.agent.c, run.agent.alpha) == (8, 2, 4, 0.5)
    assert run.train.total_steps == 2000 and run.train.anneal_lr is True


def test_baseline_config_is_parameter_matched():
    run = parse_config("[run]\nmodel = dlstm\n[env]\nkind = tmaze\n[agent]\nr = 10\n")
    assert isinstance(run.agent, BaselineConfig)
    assert run.agent.recurrent_kind == "dlstm" and run.agent.r == 10 and run.agent.hidden > 1
    fixed = parse_config("[run]\nmodel = lstm\n[env]\nkind = tmaze\n[agent]\nhidden = 12\n")
    assert fixed.agent.hidden == 12


@pytest.mark.parametrize("text,fragment", [
    ("[env]\nkind = chain\n[agent]\nc = ten\n", "line 4, \\[agent\\] c"),
    ("[env]\nkind = chain\n[train]\nlearning_rat = 0.1\n", "line 4, \\[train\\] learning_rat: unknown"),
    ("[run]\nmodel = gru\n[env]\nkind = chain\n", "line 2, \\[run\\] model"),
    ("[run]\nseeds = a,b\n[env]\nkind = chain\n", "seed"),
    ("[agent]\nc = 3\n", "missing \\[env\\]"),
    ("[env]\nkind = chain\n[extra]\nx = 1\n", "unknown section"),
    ("[env]\nkind = chain\n[agent]\nobs_dim = 4\n", "set by the environment"),
    ("[env]\nkind = chain\nlength = -1\n", "length"),
    ("[env]\nkind = chain\n[agent]\nalpha = 2\n", "alpha"),
    ("[env]\nkind = chain\n[train]\nanneal_lr = maybe\n", "anneal_lr"),
    ("no section header\n", "config"),
])
def test_config_diagnostics(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_parse_seeds():
    assert parse_seeds("3") == [3] and parse_seeds("1, 2,5") == [1, 2, 5]
    for bad in ("", "x", "1;2"):
        with pytest.raises(ConfigError):
            parse_seeds(bad)


def test_shipped_configs_parse():
    from pathlib import Path
    from feudal.config import load_config

    paths = sorted((Path(__file__).parent.parent / "configs").glob("*.ini"))
    assert paths
    for path in paths:
        run = load_config(str(path))
        assert run.seeds and run.train.total_steps > 0
