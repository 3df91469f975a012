"""Experiment protocol: data preparation, per-seed arms, result files and manifest.

Time is split temporally. Steps ``[0, delta)`` are history, step ``delta``
is the current batch ``t0`` and ``t0 + 1 .. t0 + n`` is the future. Every
policy is evaluated on the real requests of ``t0 .. t0 + n``. Learned
policies train on windows of history with the same length plus a
current-horizon stream over ``t0 .. t0 + n``. That stream holds the real
current batch and, for the full method, requests sampled from the MLP
forecasts for the future hours; without prediction the future is empty.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from . import __version__
from .base import ConfigError, InputError
from .baselines import POLICY_NAMES, GreedyPolicy, MatchingPolicy, policy_spec
from .dispatch import EpisodeResult, Hyperparams, QTables, Simulator, Stream, run_episode, train, verify_episode
from .forecast import Forecast, TrainSettings, demand_series, fit_and_forecast, sample_future_requests
from .graph import CityGraph
from .ingest import Timeline
from .metrics import HORIZON_HEADER, RESULT_HEADER, EpisodeMetrics, horizon_rows
from .synthetic import generate_synthetic_city

# config keys that are not valid Python identifiers
ALIASES = {"lambda": "lam"}


@dataclass
class ExperimentConfig:
    # data
    source: str = "synthetic"
    graph_file: str = ""
    requests_file: str = ""
    nodes: int = 30
    edge_density: float = 0.15
    pattern: str = "hotspot"
    n_pairs: int = 20
    mean_rate: float = 0.5
    amplitude: float = 0.8
    hotspots: int = 3
    shift_day: int = 12
    steps_per_hour: int = 1
    hist_days: int = 14
    eval_days: int = 7
    delta: int = 0  # history length in steps; 0 derives it from hist_days
    n: int = 0  # future steps after t0; 0 derives it from eval_days
    # fleet and simulator
    drivers: int = 20
    start_locations: str = ""
    speed: float = 5.0
    ttl: int = 5
    capacity: int = 4
    # dispatcher
    lam: float = 1.0
    omega: float = 0.6
    gamma: float = 0.9
    alpha: float = 0.1
    epsilon_start: float = 1.0
    epsilon_floor: float = 0.05
    decay_fraction: float = 0.8
    episodes: int = 600
    credit: str = "equal"
    init: str = "utility"
    buckets: int = 3
    prediction_share: float = 0.5
    greedy_decline: bool = True
    # forecaster
    lag: int = 24
    hidden: int = 32
    forecast_epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 32
    activation: str = "tanh"
    # runs
    seed: int = 0
    n_seeds: int = 5
    horizons: str = "1,2,3,4,5,6,7"
    policies: str = "greedy,matching,momaql"
    out_dir: str = "results"

    @property
    def steps_per_day(self) -> int:
        return 24 * self.steps_per_hour

    @property
    def history_steps(self) -> int:
        return self.delta or self.hist_days * self.steps_per_day

    @property
    def future_steps(self) -> int:
        return self.n or self.eval_days * self.steps_per_day - 1

    @property
    def seeds(self) -> list[int]:
        return list(range(self.seed, self.seed + self.n_seeds))

    @property
    def horizon_days(self) -> list[int]:
        return [int(h) for h in self.horizons.split(",") if h.strip()]

    @property
    def policy_names(self) -> list[str]:
        return [p.strip() for p in self.policies.split(",") if p.strip()]

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(lam=self.lam, omega=self.omega, gamma=self.gamma, alpha=self.alpha,
                           epsilon_start=self.epsilon_start, epsilon_floor=self.epsilon_floor,
                           decay_fraction=self.decay_fraction, episodes=self.episodes,
                           buckets=self.buckets, credit=self.credit, init=self.init)

    def forecast_settings(self, seed: int) -> TrainSettings:
        return TrainSettings(lag=self.lag, hidden=self.hidden, epochs=self.forecast_epochs, lr=self.lr,
                             batch_size=self.batch_size, activation=self.activation, seed=seed)

    def validate(self) -> "ExperimentConfig":
        try:
            self.hyperparams().validate()
            self.forecast_settings(0).validate()
        except InputError as exc:
            raise ConfigError(str(exc)) from exc
        checks = [
            (self.source in ("synthetic", "files"), "source must be 'synthetic' or 'files'"),
            (self.source != "files" or (self.graph_file and self.requests_file),
             "source=files needs graph_file and requests_file"),
            (self.drivers >= 1, "drivers must be >= 1"),
            (self.speed > 0, "speed must be positive"),
            (self.ttl >= 1, "ttl must be >= 1"),
            (self.steps_per_hour >= 1, "steps_per_hour must be >= 1"),
            (self.history_steps >= 1 and self.future_steps >= 0, "need a nonempty history"),
            (0 <= self.prediction_share < 1, "prediction_share must be in [0, 1)"),
            (self.n_seeds >= 1, "n_seeds must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        span = (self.future_steps + 1) // self.steps_per_day
        if any(h < 1 or h > span for h in self.horizon_days):
            raise ConfigError(f"horizons must lie in 1..{span} days")
        for name in self.policy_names:
            if name not in POLICY_NAMES:
                raise ConfigError(f"unknown policy {name!r}; choose from {', '.join(POLICY_NAMES)}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_overrides(self, pairs: dict[str, str]) -> "ExperimentConfig":
        fields = {f.name: f for f in dataclasses.fields(self)}
        values = {}
        for raw_key, raw in pairs.items():
            key = ALIASES.get(raw_key, raw_key).replace("-", "_")
            if key not in fields:
                raise ConfigError(f"unknown config key {raw_key!r}")
            values[key] = _coerce(key, fields[key].type, raw)
        return dataclasses.replace(self, **values)


def _coerce(key: str, kind, raw: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {raw!r} as {kind}") from None
    return raw.strip()


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = cfg.with_overrides(parse_config_text(text))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg.validate()


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        key = next((k for k, v in ALIASES.items() if v == key), key)
        lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# per-seed data


@dataclass
class SeedData:
    seed: int
    graph: CityGraph
    timeline: Timeline
    sim: Simulator
    t0: int
    t_end: int
    eval_requests: list
    windows: list[Stream]
    current: list = field(default_factory=list)
    forecast: Forecast | None = None
    predicted: list = field(default_factory=list)
    forecast_mse: float = math.nan
    mean_baseline_mse: float = math.nan


def _start_locations(cfg: ExperimentConfig, graph: CityGraph, rng: np.random.Generator) -> list[int]:
    if cfg.start_locations:
        locs = [int(x) for x in cfg.start_locations.split(",")]
        if len(locs) != cfg.drivers:
            raise ConfigError(f"start_locations lists {len(locs)} nodes for {cfg.drivers} drivers")
        return locs
    return [int(x) for x in rng.integers(0, graph.n_nodes, cfg.drivers)]


def load_data(cfg: ExperimentConfig, seed: int) -> tuple[CityGraph, Timeline]:
    if cfg.source == "files":
        return CityGraph.load(cfg.graph_file), Timeline.load(cfg.requests_file)
    n_days = math.ceil((cfg.history_steps + cfg.future_steps + 1) / cfg.steps_per_day)
    city = generate_synthetic_city(
        n_nodes=cfg.nodes, edge_density=cfg.edge_density, pattern=cfg.pattern, n_days=n_days, seed=seed,
        n_pairs=cfg.n_pairs, mean_rate=cfg.mean_rate, amplitude=cfg.amplitude,
        steps_per_hour=cfg.steps_per_hour, n_hotspots=cfg.hotspots, shift_day=cfg.shift_day)
    return city.graph, city.timeline


def history_windows(timeline: Timeline, t0: int, n: int, steps_per_day: int) -> list[Stream]:
    """Windows of ``n + 1`` steps ending at ``t0 - 1``, then shifted back a day at a time."""
    out = []
    start = t0 - (n + 1)
    while start >= 0:
        out.append(Stream(timeline.between(start, start + n + 1), start, start + n, f"history@{start}"))
        start -= steps_per_day
    return out


def prepare_seed(cfg: ExperimentConfig, seed: int, with_forecast: bool = True) -> SeedData:
    graph, timeline = load_data(cfg, seed)
    t0, n = cfg.history_steps, cfg.future_steps
    if t0 + n >= timeline.n_steps:
        raise ConfigError(f"history {t0} + future {n} steps exceed the timeline ({timeline.n_steps} steps)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    sim = Simulator(graph, _start_locations(cfg, graph, rng), cfg.speed, cfg.ttl, cfg.capacity)
    data = SeedData(seed, graph, timeline, sim, t0, t0 + n, timeline.between(t0, t0 + n + 1),
                    history_windows(timeline, t0, n, cfg.steps_per_day), timeline.batch(t0))
    if with_forecast:
        attach_forecast(cfg, data)
    return data


def attach_forecast(cfg: ExperimentConfig, data: SeedData) -> None:
    """Fit the per-pair forecasters on history plus the current batch and sample the future requests."""
    sph = cfg.steps_per_hour
    t0, n = data.t0, data.t_end - data.t0
    hist_hours = (t0 + 1) // sph
    future_hours = math.ceil(n / sph)
    if hist_hours <= cfg.lag:
        raise ConfigError(f"history of {hist_hours} h is too short for lag {cfg.lag}")
    past = data.timeline.between(0, hist_hours * sph)
    pairs = sorted({(r.s, r.d) for r in past})
    series = demand_series(past, 0, hist_hours * sph, sph, pairs)
    fc = fit_and_forecast(series, future_hours, cfg.forecast_settings(data.seed))
    start = hist_hours * sph
    sampled = sample_future_requests(fc.predictions, start, sph, seed=data.seed,
                                     first_id=max((r.id for r in data.timeline.requests), default=-1) + 1)
    data.current = data.timeline.between(t0, start)
    data.forecast = fc
    data.predicted = [r for r in sampled if r.t <= data.t_end]
    truth = demand_series(data.timeline.between(start, start + future_hours * sph), start,
                          start + future_hours * sph, sph, pairs)
    actual = {p: truth[p].counts for p in pairs}
    data.forecast_mse = fc.pooled_mse(actual)
    means = {p: np.full(future_hours, series[p].counts.mean()) for p in pairs}
    data.mean_baseline_mse = float(np.mean(np.concatenate([(means[p] - actual[p][:future_hours]) ** 2
                                                           for p in pairs])))


def current_stream(data: SeedData, use_prediction: bool) -> Stream:
    """Real requests known at ``t0`` plus, with prediction, the forecast-sampled future requests."""
    reqs = list(data.current) + (list(data.predicted) if use_prediction else [])
    return Stream(reqs, data.t0, data.t_end, "current+forecast" if use_prediction else "current")


def training_streams(cfg: ExperimentConfig, data: SeedData, use_prediction: bool) -> list[Stream]:
    """History windows interleaved with the current-horizon stream, which makes up ``prediction_share`` of episodes.

    Both arms get the same schedule; they differ only in whether the
    current-horizon stream carries predicted requests.
    """
    wins = list(data.windows)
    cur = current_stream(data, use_prediction)
    if not wins:
        return [cur]
    if cfg.prediction_share == 0:
        return wins
    k = max(1, round(len(wins) * cfg.prediction_share / (1 - cfg.prediction_share)))
    out = []
    for i in range(max(len(wins), k)):
        if i < len(wins):
            out.append(wins[i])
        if i < k:
            out.append(cur)
    return out


# ---------------------------------------------------------------------------
# arms


@dataclass
class ArmResult:
    method: str
    seed: int
    metrics: EpisodeMetrics
    result: EpisodeResult
    violations: list[str]
    returns: list[float] = field(default_factory=list)
    epsilons: list[float] = field(default_factory=list)
    tables: QTables | None = None
    seconds: float = 0.0
    train_violations: int = 0
    forecast_mse: tuple[float, float] | None = None  # (mlp, historical mean) on the future hours


def run_arm(cfg: ExperimentConfig, data: SeedData, name: str, tables: QTables | None = None,
            check_training: bool = False) -> ArmResult:
    """Train (if learned and no tables given) and evaluate one method on one seed."""
    started = time.perf_counter()
    spec = policy_spec(name, cfg.hyperparams())
    returns, epsilons, train_bad = [], [], 0
    if spec.learned:
        if tables is None:
            streams = training_streams(cfg, data, spec.use_prediction)
            tr = train(data.sim, streams, spec.hyperparams, seed=data.seed, verify=check_training)
            tables, returns, epsilons = tr.tables, tr.returns, tr.epsilons
            train_bad = len(tr.violations)
        res = run_episode(data.sim, tables, spec.hyperparams, data.eval_requests, data.t0, data.t_end, "eval")
    else:
        cls = GreedyPolicy if name == "greedy" else MatchingPolicy
        policy = cls(data.graph, cfg.lam, cfg.greedy_decline) if name == "greedy" else cls(data.graph, cfg.lam)
        res = data.sim.run(data.eval_requests, data.t0, data.t_end, policy)
    metrics = res.metrics(cfg.horizon_days, cfg.steps_per_day)
    fc = (data.forecast_mse, data.mean_baseline_mse) if data.forecast is not None else None
    return ArmResult(name, data.seed, metrics, res, verify_episode(res, data.graph), returns, epsilons,
                     tables, time.perf_counter() - started, train_bad, fc)


def run_experiment(cfg: ExperimentConfig, policies: Sequence[str] | None = None,
                   check_training: bool = False, log=None) -> list[ArmResult]:
    cfg.validate()
    names = list(policies) if policies is not None else cfg.policy_names
    need_forecast = any(policy_spec(nm, cfg.hyperparams()).learned and policy_spec(nm, cfg.hyperparams()).use_prediction
                        for nm in names)
    out = []
    for seed in cfg.seeds:
        data = prepare_seed(cfg, seed, with_forecast=need_forecast)
        for name in names:
            arm = run_arm(cfg, data, name, check_training=check_training)
            if log:
                m = arm.metrics
                log(f"seed {seed} {name}: utility {m.total_utility:.2f} fairness {m.fairness:.2f} "
                    f"normalized {m.normalized_fairness:.4f} ({arm.seconds:.1f}s)")
            out.append(arm)
    return out


# ---------------------------------------------------------------------------
# result files


def _versions() -> dict[str, str]:
    return {"fairride": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _header(cfg_hash: str) -> str:
    return f"# config={cfg_hash}\n"


def write_results(cfg: ExperimentConfig, arms: Sequence[ArmResult], out_dir: str | Path | None = None
                  ) -> dict[str, Path]:
    """Per-seed metrics, horizon series, training curves and a manifest, all tagged with the config hash.

    Only the manifest's ``seconds`` entry varies between identical runs.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    files: dict[str, Path] = {}
    metrics = out / "metrics.csv"
    metrics.write_text(_header(digest) + RESULT_HEADER + "\n" + "".join(a.metrics.row(a.method, a.seed) + "\n"
                                                                        for a in arms))
    files["metrics"] = metrics
    horizon = out / "horizon.csv"
    rows = [r for a in arms for r in horizon_rows(a.method, a.seed, a.metrics.per_horizon)]
    horizon.write_text(_header(digest) + HORIZON_HEADER + "\n" + "".join(r + "\n" for r in rows))
    files["horizon"] = horizon
    for a in arms:
        if a.returns:
            path = out / f"curve_{a.method}_seed{a.seed}.csv"
            body = "".join(f"{i},{e:.6f},{r:.6f}\n" for i, (e, r) in enumerate(zip(a.epsilons, a.returns)))
            path.write_text(_header(digest) + "episode,epsilon,scalarised_return\n" + body)
            files[path.stem] = path
    (out / "config.txt").write_text(dump_config(cfg))
    manifest = {
        "config_hash": digest,
        "config": cfg.to_dict(),
        "seeds": sorted({a.seed for a in arms}),
        "versions": _versions(),
        "files": {k: p.name for k, p in files.items()},
        "violations": sum(len(a.violations) + a.train_violations for a in arms),
        "seconds": {f"{a.method}/{a.seed}": round(a.seconds, 3) for a in arms},
    }
    fc = {str(a.seed): {"mlp": a.forecast_mse[0], "mean_baseline": a.forecast_mse[1]}
          for a in arms if a.forecast_mse is not None}
    if fc:
        manifest["forecast_mse"] = fc
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    files["manifest"] = out / "manifest.json"
    return files


def read_table(path: str | Path) -> list[dict[str, str]]:
    """Read a result CSV, skipping ``#`` lines."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    if not lines:
        return []
    head = lines[0].split(",")
    return [dict(zip(head, ln.split(","))) for ln in lines[1:]]


def summary_table(arms: Sequence[ArmResult], methods: Sequence[str]) -> str:
    """Mean over seeds per method: total utility, fairness variance, normalized fairness."""
    lines = [f"{'method':<16}{'total_utility':>16}{'fairness':>16}{'normalized':>12}{'seeds':>7}"]
    for m in methods:
        rows = [a.metrics for a in arms if a.method == m]
        if not rows:
            continue
        u = np.mean([r.total_utility for r in rows])
        f = np.mean([r.fairness for r in rows])
        nf = np.mean([r.normalized_fairness for r in rows])
        lines.append(f"{m:<16}{u:>16.2f}{f:>16.2f}{nf:>12.4f}{len(rows):>7}")
    return "\n".join(lines)
