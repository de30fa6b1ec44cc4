"""Command line entry point: ``fun {train,eval,gradcheck,ablate}``.

Results go to stdout as comma-separated lines; per-seed metric CSVs,
aggregates, checkpoints, a gnuplot script and PNG figures go under
``--out``. Set FUN_LOG_LEVEL to error, info or debug for progress logs on
stderr.
"""

import argparse
import logging
import os
import sys

from . import checkpoint, gradcheck, report
from .agent import MODES, AgentConfig
from .config import load_config, parse_seeds
from .envs import ConfigError, optimal_return, parse_spec
from .experiment import ABLATIONS, ablation_variants, evaluate, policy_for, train_run, with_mode

log = logging.getLogger("feudal")


def _setup_logging():
    level = os.environ.get("FUN_LOG_LEVEL", "error").lower()
    if level not in ("error", "info", "debug"):
        level = "error"
    logging.basicConfig(level=getattr(logging, level.upper()), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _emit(fields):
    print(",".join(report.fmt(f) if not isinstance(f, str) else f for f in fields))


def _train_variant(run, agent_config, seeds, out, tag, plot=True):
    """Train every seed of one variant; returns the aggregate rows."""
    os.makedirs(out, exist_ok=True)
    per_seed = []
    for seed in seeds:
        model, rows = train_run(agent_config, run.env, run.train, seed)
        stem = os.path.join(out, f"{tag}seed{seed}")
        report.write_csv(stem + ".csv", rows, epoch_steps=report.EPOCH_STEPS)
        checkpoint.save(model, stem + ".ckpt")
        per_seed.append(rows)
        last = rows[-1] if rows else {"step": 0, "return": float("nan")}
        _emit(["seed", tag or "main", seed, last["step"], last["return"], stem + ".csv"])
    agg = report.aggregate(per_seed)
    agg_path = os.path.join(out, f"{tag}aggregate.csv")
    report.write_csv(agg_path, agg, report.AGG_COLUMNS, report.AGG_SCHEMA)
    with open(os.path.join(out, f"{tag}plot.gp"), "w") as f:
        f.write(report.gnuplot_script(os.path.basename(agg_path), tag or "learning curve",
                                      f"{tag}curve_gnuplot.png"))
    if plot:
        report.plot_curves({tag or "median": agg}, os.path.join(out, f"{tag}curve.png"),
                           title=f"{run.env.kind} {tag}".strip(), optimal=optimal_return(run.env))
    final = agg[-1]["return_median"] if agg else float("nan")
    _emit(["aggregate", tag or "main", len(seeds), final, agg_path])
    log.info("variant %s done: final median %s", tag or "main", final)
    return agg


def cmd_train(args):
    run = load_config(args.config)
    seeds = parse_seeds(args.seed) if args.seed else run.seeds
    out = args.out or run.out
    agent = run.agent
    tag = ""
    if args.mode:
        agent = with_mode(agent, args.mode)
        tag = args.mode + "_"
    _emit(["kind", "variant", "seed_or_count", "step_or_median", "return", "path"])
    _train_variant(run, agent, seeds, out, tag, plot=not args.no_plot)
    return 0


def cmd_ablate(args):
    run = load_config(args.config)
    seeds = parse_seeds(args.seed) if args.seed else run.seeds
    out = args.out or run.out
    if not isinstance(run.agent, AgentConfig):
        raise ConfigError("ablations need model = fun")
    variants = [("full_fun", run.agent)] + ablation_variants(run.agent, args.mode)
    _emit(["kind", "variant", "seed_or_count", "step_or_median", "return", "path"])
    series = {}
    for tag, agent in variants:
        series[tag] = _train_variant(run, agent, seeds, os.path.join(out, args.mode), tag + "_",
                                     plot=False)
    if not args.no_plot:
        path = os.path.join(out, args.mode, "comparison.png")
        report.plot_curves(series, path, title=f"{run.env.kind}: {args.mode}",
                           optimal=optimal_return(run.env))
    return 0


def cmd_eval(args):
    model = checkpoint.load(args.checkpoint)
    if args.env:
        with open(args.env) as f:
            spec = parse_spec(f.read())
    elif args.config:
        spec = load_config(args.config).env
    else:
        raise ConfigError("eval needs --env SPEC or --config PATH")
    seed = parse_seeds(args.seed)[0] if args.seed else 0
    try:
        summary = evaluate(policy_for(model), spec, args.episodes, seed=seed, greedy=args.greedy)
    except ValueError as exc:
        raise checkpoint.IncompatibleCheckpointError(f"checkpoint does not fit environment: {exc}")
    keys = ["episodes", "mean_return", "std_return", "optimal_return", "ratio_to_optimal"]
    _emit(keys)
    _emit([summary[k] for k in keys])
    return 0


def cmd_gradcheck(args):
    results = gradcheck.run_all(seed=args.seed_int, cases=args.cases, tpg_cases=args.tpg_cases)
    _emit(["component", "cases", "worst_error", "tolerance", "status"])
    for r in results:
        _emit([r.name, r.cases, r.worst, r.tolerance, "pass" if r.passed else "FAIL"])
    return 0 if all(r.passed for r in results) else 1


def build_parser():
    p = argparse.ArgumentParser(prog="fun", description="Feudal hierarchical agent toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one config over one or more seeds")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", help="comma-separated seeds (overrides the config)")
    t.add_argument("--out", help="output directory (overrides the config)")
    t.add_argument("--mode", choices=MODES, help="FuN mode override")
    t.add_argument("--no-plot", action="store_true", help="skip the PNG figure")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="train full FuN alongside an ablated variant")
    a.add_argument("--config", required=True)
    a.add_argument("--mode", required=True, choices=ABLATIONS)
    a.add_argument("--seed")
    a.add_argument("--out")
    a.add_argument("--no-plot", action="store_true")
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("eval", help="roll out a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="run config whose [env] section is used")
    e.add_argument("--env", help="key = value environment spec file")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed")
    e.add_argument("--greedy", action="store_true", help="argmax actions instead of sampling")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference checks of every backward pass")
    g.add_argument("--seed", dest="seed_int", type=int, default=0)
    g.add_argument("--cases", type=int, default=100)
    g.add_argument("--tpg-cases", type=int, default=1000)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, checkpoint.IncompatibleCheckpointError, OSError) as exc:
        print(f"fun {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
