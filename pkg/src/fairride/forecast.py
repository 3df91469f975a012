"""Hourly per-OD-pair demand forecasting with a single-hidden-layer MLP.

One model per origin-destination pair, sharing hyperparameters. Inputs are
the last ``lag`` hourly counts, standardised with the pair's historical
mean/std; the target is the next hour's count on the same scale. Models
for many pairs are trained in lockstep as a stacked "bank" so one epoch is
a handful of batched numpy ops.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .base import InputError, Request, TrainingError

FORMAT = "mlp-forecaster"
VERSION = 1
ACTIVATIONS = ("tanh", "linear")


@dataclass
class DemandSeries:
    od_pair: tuple[int, int]
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.ndim != 1 or (self.counts < 0).any():
            raise InputError(f"demand series for {self.od_pair} must be a nonnegative 1-d sequence")


def demand_series(requests: Sequence[Request], start: int, stop: int, steps_per_hour: int = 1,
                  pairs: Sequence[tuple[int, int]] | None = None) -> dict[tuple[int, int], DemandSeries]:
    """Hourly counts per OD pair for steps ``[start, stop)``; hours are ``steps_per_hour`` steps wide."""
    n_hours = math.ceil((stop - start) / steps_per_hour)
    table: dict[tuple[int, int], np.ndarray] = {}
    if pairs is not None:
        table = {tuple(p): np.zeros(n_hours, dtype=int) for p in pairs}
    for r in requests:
        if not start <= r.t < stop:
            continue
        key = (r.s, r.d)
        if key not in table:
            if pairs is not None:
                continue
            table[key] = np.zeros(n_hours, dtype=int)
        table[key][(r.t - start) // steps_per_hour] += 1
    return {k: DemandSeries(k, table[k]) for k in sorted(table)}


def make_features(series: DemandSeries | Sequence[float], lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Sliding windows: row ``i`` holds ``counts[i:i+lag]`` and the target is ``counts[i+lag]``."""
    counts = np.asarray(series.counts if isinstance(series, DemandSeries) else series, dtype=float)
    if lag < 1 or lag >= counts.size:
        raise InputError(f"lag {lag} needs a series longer than the lag (got length {counts.size})")
    m = counts.size - lag
    idx = np.arange(lag)[None, :] + np.arange(m)[:, None]
    return counts[idx], counts[lag:]


def mse(predicted, actual) -> float:
    p = np.asarray(predicted, dtype=float)
    a = np.asarray(actual, dtype=float)
    if p.shape != a.shape:
        raise InputError(f"length mismatch: {p.shape} vs {a.shape}")
    if p.size == 0:
        raise InputError("mse of empty sequences")
    return float(np.mean((p - a) ** 2))


def _act(z: np.ndarray, kind: str) -> tuple[np.ndarray, np.ndarray]:
    if kind == "tanh":
        h = np.tanh(z)
        return h, 1.0 - h * h
    return z, np.ones_like(z)


@dataclass
class MlpModel:
    """``y = W2 . act(x W1 + b1) + b2`` on standardised inputs."""

    w1: np.ndarray  # (lag, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: float
    mean: float = 0.0
    std: float = 1.0
    activation: str = "tanh"

    @property
    def lag(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, np.array([self.b2])]

    def predict_scaled(self, x: np.ndarray) -> np.ndarray:
        h, _ = _act(x @ self.w1 + self.b1, self.activation)
        return h @ self.w2 + self.b2

    def predict_one(self, window: np.ndarray) -> float:
        z = (np.asarray(window, dtype=float) - self.mean) / self.std
        return float(self.predict_scaled(z[None, :])[0] * self.std + self.mean)

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params())


def loss_and_grads(model: MlpModel, x: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean squared error on the scaled data and its gradient for ``[w1, b1, w2, b2]``."""
    z = x @ model.w1 + model.b1
    h, dh = _act(z, model.activation)
    err = h @ model.w2 + model.b2 - y
    m = y.shape[0]
    g_out = 2.0 * err / m
    g_w2 = h.T @ g_out
    g_b2 = np.array([g_out.sum()])
    g_z = np.outer(g_out, model.w2) * dh
    return float(np.mean(err**2)), [x.T @ g_z, g_z.sum(axis=0), g_w2, g_b2]


@dataclass
class TrainReport:
    epochs: int
    final_mse: float
    curve: list[float]
    seed: int


@dataclass
class TrainSettings:
    lag: int = 24
    hidden: int = 32
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 32
    activation: str = "tanh"
    seed: int = 0

    def validate(self) -> "TrainSettings":
        if self.lag < 1 or self.hidden < 1 or self.epochs < 0 or not self.lr > 0 or self.batch_size < 1:
            raise InputError(f"invalid forecaster settings {self}")
        if self.activation not in ACTIVATIONS:
            raise InputError(f"activation must be one of {ACTIVATIONS}")
        return self


def _standardise(x: np.ndarray, y: np.ndarray, stats_source: np.ndarray) -> tuple[np.ndarray, np.ndarray, float, float]:
    mean = float(stats_source.mean())
    std = float(stats_source.std())
    if std < 1e-8:
        std = 1.0
    return (x - mean) / std, (y - mean) / std, mean, std


def train_bank(features: Sequence[tuple[np.ndarray, np.ndarray]], settings: TrainSettings,
               history: Sequence[np.ndarray] | None = None) -> tuple[list[MlpModel], TrainReport]:
    """Train one MLP per feature set in lockstep with Adam on minibatches of squared error.

    All feature sets must have the same number of windows. The report's
    MSE values are pooled over every model in original count units.
    Deterministic for a given ``settings.seed``.
    """
    settings.validate()
    if not features:
        raise InputError("no features to train on")
    P = len(features)
    m = features[0][0].shape[0]
    if m == 0:
        raise InputError("empty feature set")
    if any(f[0].shape != features[0][0].shape for f in features):
        raise InputError("all feature sets in a bank must share a shape")
    lag, H = features[0][0].shape[1], settings.hidden
    X = np.empty((P, m, lag))
    Y = np.empty((P, m))
    means, stds = np.empty(P), np.empty(P)
    for p, (x, y) in enumerate(features):
        src = history[p] if history is not None else np.concatenate([x[0], y])
        X[p], Y[p], means[p], stds[p] = _standardise(x, y, np.asarray(src, dtype=float))
    rng = np.random.default_rng(settings.seed)
    W1 = rng.normal(0, 1 / math.sqrt(lag), (P, lag, H))
    B1 = np.zeros((P, H))
    W2 = rng.normal(0, 1 / math.sqrt(H), (P, H))
    B2 = np.zeros(P)
    params = [W1, B1, W2, B2]
    m1 = [np.zeros_like(q) for q in params]
    m2 = [np.zeros_like(q) for q in params]
    b1_, b2_, eps = 0.9, 0.999, 1e-8
    step = 0
    curve = []
    scale2 = (stds**2)[:, None]

    def forward(xb):
        z = np.einsum("pml,plh->pmh", xb, W1) + B1[:, None, :]
        h, dh = _act(z, settings.activation)
        return h, dh, np.einsum("pmh,ph->pm", h, W2) + B2[:, None]

    # overflow surfaces as the non-finite loss check below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(settings.epochs):
            order = rng.permutation(m)
            for k in range(0, m, settings.batch_size):
                idx = order[k:k + settings.batch_size]
                xb, yb = X[:, idx], Y[:, idx]
                h, dh, out = forward(xb)
                g_out = 2.0 * (out - yb) / idx.size
                grads = [
                    np.einsum("pml,pmh->plh", xb, g_out[:, :, None] * W2[:, None, :] * dh),
                    (g_out[:, :, None] * W2[:, None, :] * dh).sum(axis=1),
                    np.einsum("pmh,pm->ph", h, g_out),
                    g_out.sum(axis=1),
                ]
                step += 1
                for q, g, a, b in zip(params, grads, m1, m2):
                    a *= b1_
                    a += (1 - b1_) * g
                    b *= b2_
                    b += (1 - b2_) * g * g
                    q -= settings.lr * (a / (1 - b1_**step)) / (np.sqrt(b / (1 - b2_**step)) + eps)
            _, _, out = forward(X)
            loss = float(np.mean((out - Y) ** 2 * scale2))
            if not math.isfinite(loss) or not all(np.isfinite(q).all() for q in params):
                raise TrainingError(f"non-finite training loss at epoch {epoch} (lr={settings.lr}, hidden={H})")
            curve.append(loss)
    if not curve:
        _, _, out = forward(X)
        curve_final = float(np.mean((out - Y) ** 2 * scale2))
    else:
        curve_final = curve[-1]
    models = [
        MlpModel(W1[p].copy(), B1[p].copy(), W2[p].copy(), float(B2[p]), float(means[p]), float(stds[p]),
                 settings.activation)
        for p in range(P)
    ]
    return models, TrainReport(settings.epochs, curve_final, curve, settings.seed)


def train_mlp(features: tuple[np.ndarray, np.ndarray], hidden: int = 32, epochs: int = 200, lr: float = 1e-3,
              seed: int = 0, batch_size: int = 32, activation: str = "tanh") -> tuple[MlpModel, TrainReport]:
    x, _ = features
    settings = TrainSettings(lag=x.shape[1], hidden=hidden, epochs=epochs, lr=lr, batch_size=batch_size,
                             activation=activation, seed=seed)
    models, report = train_bank([features], settings)
    return models[0], report


def predict_counts(model: MlpModel, history, horizon_hours: int) -> np.ndarray:
    """Iterated one-step forecasts; each clamped-at-zero output becomes the newest lag."""
    hist = np.asarray(history.counts if isinstance(history, DemandSeries) else history, dtype=float)
    if hist.size < model.lag:
        raise InputError(f"history of length {hist.size} is shorter than lag {model.lag}")
    window = list(hist[-model.lag:])
    out = np.empty(horizon_hours)
    for k in range(horizon_hours):
        val = max(0.0, model.predict_one(np.array(window)))
        out[k] = val
        window = window[1:] + [val]
    return out


def predict_bank(models: Sequence[MlpModel], histories: Sequence[np.ndarray], horizon_hours: int) -> np.ndarray:
    """:func:`predict_counts` for many models at once; returns ``(P, horizon_hours)``."""
    P = len(models)
    if P == 0:
        return np.zeros((0, horizon_hours))
    lag = models[0].lag
    W1 = np.stack([m.w1 for m in models])
    B1 = np.stack([m.b1 for m in models])
    W2 = np.stack([m.w2 for m in models])
    B2 = np.array([m.b2 for m in models])
    mu = np.array([m.mean for m in models])
    sd = np.array([m.std for m in models])
    act = models[0].activation
    win = np.stack([np.asarray(h, dtype=float)[-lag:] for h in histories])
    if win.shape[1] < lag:
        raise InputError("history shorter than lag")
    out = np.empty((P, horizon_hours))
    for k in range(horizon_hours):
        z = (win - mu[:, None]) / sd[:, None]
        h, _ = _act(np.einsum("pl,plh->ph", z, W1) + B1, act)
        val = np.maximum(0.0, (np.einsum("ph,ph->p", h, W2) + B2) * sd + mu)
        out[:, k] = val
        win = np.concatenate([win[:, 1:], val[:, None]], axis=1)
    return out


def sample_future_requests(forecasts: Mapping[tuple[int, int], Sequence[float]], start_step: int,
                           steps_per_hour: int = 1, seed: int = 0, first_id: int = 0) -> list[Request]:
    """Turn fractional hourly forecasts into requests.

    Each pair/hour emits ``round(forecast)`` requests (halves round up),
    each placed at a uniformly drawn step inside that hour.
    """
    rng = np.random.default_rng(seed)
    raw = []
    for (s, d) in sorted(forecasts):
        for h, f in enumerate(forecasts[(s, d)]):
            k = int(math.floor(float(f) + 0.5))
            if k <= 0:
                continue
            ts = start_step + h * steps_per_hour + rng.integers(0, steps_per_hour, size=k)
            raw.extend((int(t), s, d) for t in ts)
    raw.sort()
    return [Request(first_id + i, t, s, d) for i, (t, s, d) in enumerate(raw)]


@dataclass
class Forecast:
    """Fitted per-pair models plus their forecasts for the future hours."""

    pairs: list[tuple[int, int]]
    models: list[MlpModel]
    report: TrainReport
    predictions: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def pooled_mse(self, actual: Mapping[tuple[int, int], Sequence[float]]) -> float:
        p = np.concatenate([self.predictions[k] for k in self.pairs])
        a = np.concatenate([np.asarray(actual[k], dtype=float)[: len(self.predictions[k])] for k in self.pairs])
        return mse(p, a)


def fit_and_forecast(series: Mapping[tuple[int, int], DemandSeries], horizon_hours: int,
                     settings: TrainSettings) -> Forecast:
    """Train one model per pair on its full series, then forecast ``horizon_hours`` ahead."""
    pairs = sorted(series)
    if not pairs:
        raise InputError("no demand series to forecast")
    feats = [make_features(series[p], settings.lag) for p in pairs]
    models, report = train_bank(feats, settings, history=[series[p].counts for p in pairs])
    preds = predict_bank(models, [series[p].counts for p in pairs], horizon_hours)
    return Forecast(pairs, models, report, {p: preds[i] for i, p in enumerate(pairs)})


def save_models(path: str | Path, pairs: Sequence[tuple[int, int]], models: Sequence[MlpModel]) -> None:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "models": [
            {
                "od_pair": list(p),
                "dims": [m.lag, m.hidden, 1],
                "activation": m.activation,
                "mean": m.mean,
                "std": m.std,
                "w1": m.w1.tolist(),
                "b1": m.b1.tolist(),
                "w2": m.w2.tolist(),
                "b2": m.b2,
            }
            for p, m in zip(pairs, models)
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_models(path: str | Path) -> tuple[list[tuple[int, int]], list[MlpModel]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT or doc.get("version") != VERSION:
        raise InputError(f"{path}: not a {FORMAT} v{VERSION} checkpoint")
    pairs, models = [], []
    for e in doc["models"]:
        pairs.append(tuple(e["od_pair"]))
        models.append(MlpModel(np.array(e["w1"]), np.array(e["b1"]), np.array(e["w2"]), float(e["b2"]),
                               float(e["mean"]), float(e["std"]), e["activation"]))
    return pairs, models
