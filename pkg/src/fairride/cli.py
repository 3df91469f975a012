"""Command-line entry point: ``fairride <command> [--config FILE] [--key=value ...]``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from .base import ConfigError
from .baselines import POLICY_NAMES, policy_spec
from .dispatch import QTables, train
from .experiment import (ExperimentConfig, dump_config, load_config, prepare_seed, run_arm, run_experiment,
                         summary_table, training_streams, write_results)
from .forecast import (TrainSettings, demand_series, fit_and_forecast, mse, save_models)
from .ingest import (BBox, MANHATTAN, ColumnMap, Timeline, build_graph, build_request_timeline,
                     filter_time_window, parse_trip_records, stratified_sample)
from .synthetic import generate_synthetic_city

TABLE1 = ("greedy", "matching", "momaql")
TABLE2 = ("momaql", "momaql_no_pred", "momaql_no_fair")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    for tok in extra:
        if not tok.startswith("--") or "=" not in tok:
            raise ConfigError(f"unrecognised argument {tok!r} (config overrides take the form --key=value)")
        key, value = tok[2:].split("=", 1)
        out[key] = value
    return out


def _config(args, extra) -> ExperimentConfig:
    overrides = _overrides(extra)
    if getattr(args, "out", None):
        overrides.setdefault("out_dir", args.out)
    return load_config(args.config, overrides)


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, extra) -> int:
    cfg = _config(args, extra)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_days = math.ceil((cfg.history_steps + cfg.future_steps + 1) / cfg.steps_per_day)
    city = generate_synthetic_city(
        n_nodes=cfg.nodes, edge_density=cfg.edge_density, pattern=cfg.pattern, n_days=n_days, seed=cfg.seed,
        n_pairs=cfg.n_pairs, mean_rate=cfg.mean_rate, amplitude=cfg.amplitude,
        steps_per_hour=cfg.steps_per_hour, n_hotspots=cfg.hotspots, shift_day=cfg.shift_day)
    city.graph.save(out / "graph.txt")
    city.timeline.save(out / "requests.csv")
    _say(f"wrote {out / 'graph.txt'} ({city.graph.n_nodes} nodes, {len(city.graph.edges)} edges) and "
         f"{out / 'requests.csv'} ({len(city.timeline)} requests over {city.timeline.n_steps} steps)")
    return 0


def cmd_ingest(args, extra) -> int:
    if extra:
        raise ConfigError(f"unrecognised arguments {extra}")
    bbox = BBox.parse(args.bbox) if args.bbox else MANHATTAN
    columns = ColumnMap(travel_time=args.travel_time_column)
    trips, report = parse_trip_records(args.trips, bbox, columns)
    if args.time_filter:
        trips = filter_time_window(trips, args.time_filter, report)
    graph, node_map = build_graph(trips, args.merge_radius)
    timeline = build_request_timeline(trips, node_map, args.batch_seconds, report=report)
    if args.sample_rate < 1:
        timeline = stratified_sample(timeline, args.sample_rate, args.seed, report)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    graph.save(out / "graph.txt")
    timeline.save(out / "requests.csv")
    _say(f"rows {report.rows}, malformed {report.malformed}, out of box {report.out_of_bbox}, "
         f"time filtered {report.time_filtered}, same node {report.same_node}, sampled out {report.sampled_out}")
    _say(f"wrote {graph.n_nodes} nodes, {len(graph.edges)} edges, {len(timeline)} requests to {out}")
    return 0


def cmd_forecast(args, extra) -> int:
    if extra:
        raise ConfigError(f"unrecognised arguments {extra}")
    timeline = Timeline.load(args.requests)
    sph = args.steps_per_hour
    cut = args.train_before if args.train_before is not None else timeline.n_steps
    hours = cut // sph
    if hours <= args.lag:
        raise ConfigError(f"{hours} h of training history is too short for lag {args.lag}")
    past = timeline.between(0, hours * sph)
    pairs = sorted({(r.s, r.d) for r in past})
    series = demand_series(past, 0, hours * sph, sph, pairs)
    settings = TrainSettings(lag=args.lag, hidden=args.hidden, epochs=args.epochs, lr=args.lr, seed=args.seed)
    horizon = args.horizon or max(0, (timeline.n_steps - hours * sph) // sph)
    fc = fit_and_forecast(series, max(horizon, 1), settings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_models(out / "models.json", fc.pairs, fc.models)
    lines = ["s_r,d_r,hour,predicted"]
    for p in fc.pairs:
        lines += [f"{p[0]},{p[1]},{hours + h},{v:.6f}" for h, v in enumerate(fc.predictions[p][:horizon])]
    (out / "predictions.csv").write_text("\n".join(lines) + "\n")
    _say(f"trained {len(fc.pairs)} models, final training loss {fc.report.final_mse:.4f}")
    if horizon:
        truth = demand_series(timeline.between(hours * sph, (hours + horizon) * sph), hours * sph,
                              (hours + horizon) * sph, sph, pairs)
        actual = {p: truth[p].counts for p in pairs}
        base = mse(np.concatenate([np.full(horizon, series[p].counts.mean()) for p in pairs]),
                   np.concatenate([actual[p] for p in pairs]))
        _say(f"held-out pooled MSE {fc.pooled_mse(actual):.4f} (historical mean baseline {base:.4f})")
    return 0


def _policy_arg(args, cfg: ExperimentConfig) -> str:
    name = args.policy or "momaql"
    if name not in POLICY_NAMES:
        raise ConfigError(f"unknown policy {name!r}; choose from {', '.join(POLICY_NAMES)}")
    return name


def cmd_train(args, extra) -> int:
    cfg = _config(args, extra)
    name = _policy_arg(args, cfg)
    spec = policy_spec(name, cfg.hyperparams())
    if not spec.learned:
        raise ConfigError(f"{name} has nothing to train")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        data = prepare_seed(cfg, seed, with_forecast=spec.use_prediction)
        tr = train(data.sim, training_streams(cfg, data, spec.use_prediction), spec.hyperparams, seed=seed)
        path = out / f"qtables_{name}_seed{seed}.txt"
        tr.tables.save(path)
        curve = out / f"curve_{name}_seed{seed}.csv"
        curve.write_text(f"# config={cfg.digest()}\nepisode,epsilon,scalarised_return\n"
                         + "".join(f"{i},{e:.6f},{r:.6f}\n" for i, (e, r) in enumerate(zip(tr.epsilons, tr.returns))))
        _say(f"seed {seed}: {len(tr.returns)} episodes, final return {tr.returns[-1] if tr.returns else 0:.2f} -> {path}")
    (out / "config.txt").write_text(dump_config(cfg))
    return 0


def cmd_eval(args, extra) -> int:
    cfg = _config(args, extra)
    name = _policy_arg(args, cfg)
    spec = policy_spec(name, cfg.hyperparams())
    arms = []
    for seed in cfg.seeds:
        data = prepare_seed(cfg, seed, with_forecast=spec.learned and spec.use_prediction and not args.qtables)
        tables = None
        if spec.learned and args.qtables:
            tables = QTables.load(str(args.qtables).format(seed=seed), data.graph)
            if tables.n_drivers != data.sim.n_drivers or tables.n_nodes != data.graph.n_nodes:
                raise ConfigError("checkpoint does not match the fleet size or graph")
        arm = run_arm(cfg, data, name, tables=tables)
        arms.append(arm)
    _report(cfg, arms, [name])
    return 0


def _report(cfg: ExperimentConfig, arms, methods, title: str = "") -> None:
    files = write_results(cfg, arms)
    bad = sum(len(a.violations) for a in arms)
    if title:
        _say(title)
    _say(summary_table(arms, methods))
    _say(f"results in {Path(cfg.out_dir)} (config {cfg.digest()}); {bad} accounting violations")
    if bad:
        raise RuntimeError(f"{bad} exclusivity/accounting violations; see {files['metrics']}")


def _run(cfg, methods, title):
    arms = run_experiment(cfg, methods, log=_say)
    _report(cfg, arms, methods, title)
    return arms


def cmd_table(args, extra) -> int:
    cfg = _config(args, extra)
    arms = _run(cfg, TABLE1, "Dispatch methods, mean over seeds")
    (Path(cfg.out_dir) / "table1.txt").write_text(summary_table(arms, TABLE1) + "\n")
    return 0


def cmd_ablation(args, extra) -> int:
    cfg = _config(args, extra)
    arms = _run(cfg, TABLE2, "Ablations, mean over seeds")
    (Path(cfg.out_dir) / "table2.txt").write_text(summary_table(arms, TABLE2) + "\n")
    return 0


def cmd_horizon(args, extra) -> int:
    cfg = _config(args, extra)
    methods = cfg.policy_names
    arms = run_experiment(cfg, methods, log=_say)
    _report(cfg, arms, methods)
    _say("fairness by horizon (days), mean over seeds")
    _say("method".ljust(16) + "".join(f"{h:>12}" for h in cfg.horizon_days))
    for m in methods:
        rows = [a.metrics.per_horizon for a in arms if a.method == m]
        means = np.mean([[f for _, f in r] for r in rows], axis=0)
        _say(m.ljust(16) + "".join(f"{v:>12.2f}" for v in means))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fairride", description="Long-term fair ride-hailing dispatch experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_text, config=True):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(fn=fn)
        if config:
            p.add_argument("--config", help="flat key = value config file")
            p.add_argument("--out", help="output directory (same as --out_dir=...)")
        return p

    add("synth", cmd_synth, "Write a seeded synthetic city: graph.txt and requests.csv.")
    p = add("ingest", cmd_ingest, "Turn a trip-record CSV into graph.txt and requests.csv.", config=False)
    p.add_argument("--trips", required=True, help="trip-record CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--bbox", default="", help="min_lon,min_lat,max_lon,max_lat")
    p.add_argument("--merge-radius", type=float, default=0.005, help="grid cell size in degrees")
    p.add_argument("--batch-seconds", type=float, default=60.0)
    p.add_argument("--time-filter", default="", help="keep pickups in HH:MM-HH:MM")
    p.add_argument("--sample-rate", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--travel-time-column", default="", help="use this column instead of dropoff - pickup")
    p = add("forecast", cmd_forecast, "Fit per-pair MLP forecasters on a requests file.", config=False)
    p.add_argument("--requests", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lag", type=int, default=24)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-before", type=int, default=None, help="first step excluded from training")
    p.add_argument("--steps-per-hour", type=int, default=1)
    p.add_argument("--horizon", type=int, default=0, help="hours to forecast (default: rest of the file)")
    p = add("train", cmd_train, "Train a learned dispatcher and save its Q-tables per seed.")
    p.add_argument("--policy", default="momaql", help="momaql, momaql_no_pred or momaql_no_fair")
    p = add("eval", cmd_eval, "Evaluate one policy on the future segment of each seed.")
    p.add_argument("--policy", required=True, help=", ".join(POLICY_NAMES))
    p.add_argument("--qtables", default="", help="checkpoint path; '{seed}' is replaced by the seed")
    add("table", cmd_table, "Greedy vs matching vs the learned dispatcher.")
    add("horizon", cmd_horizon, "Fairness at each evaluation horizon for the configured policies.")
    add("ablation", cmd_ablation, "Full method vs no-prediction vs no-fairness.")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        return args.fn(args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
