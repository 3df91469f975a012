"""Evaluation quantities: efficiency, variance fairness, normalised fairness, horizon series.

Variance and standard deviation are population statistics (divisor n):
the driver set is the whole population, not a sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .base import InputError

RESULT_HEADER = "method,seed,total_utility,fairness,normalized_fairness,min,mean,max"
HORIZON_HEADER = "method,seed,horizon_days,fairness"


def _vec(per_driver) -> np.ndarray:
    arr = np.asarray(per_driver, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise InputError("expected a nonempty vector of per-driver utilities")
    return arr


def total_utility(per_driver) -> float:
    return float(np.sum(_vec(per_driver)))


def fairness_variance(per_driver) -> float:
    arr = _vec(per_driver)
    return float(np.mean((arr - arr.mean()) ** 2))


def normalized_fairness(per_driver) -> float:
    """Population std over mean; ``nan`` when the mean is zero (undefined, never silently 0)."""
    arr = _vec(per_driver)
    mean = arr.mean()
    if mean == 0:
        return math.nan
    return float(np.sqrt(np.mean((arr - mean) ** 2)) / mean)


@dataclass
class EpisodeMetrics:
    total_utility: float
    fairness: float
    normalized_fairness: float
    min: float
    mean: float
    max: float
    per_horizon: list[tuple[int, float]] = field(default_factory=list)

    @classmethod
    def from_utilities(cls, per_driver, per_horizon: Sequence[tuple[int, float]] = ()) -> "EpisodeMetrics":
        arr = _vec(per_driver)
        return cls(
            total_utility=total_utility(arr),
            fairness=fairness_variance(arr),
            normalized_fairness=normalized_fairness(arr),
            min=float(arr.min()),
            mean=float(arr.mean()),
            max=float(arr.max()),
            per_horizon=list(per_horizon),
        )

    def row(self, method: str, seed: int) -> str:
        vals = [self.total_utility, self.fairness, self.normalized_fairness, self.min, self.mean, self.max]
        return ",".join([method, str(seed)] + [_fmt(v) for v in vals])


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def horizon_stability(cumulative: np.ndarray, horizons: Sequence[int], steps_per_day: int) -> list[tuple[int, float]]:
    """Fairness of cumulative utilities truncated at each horizon (in days).

    ``cumulative[k]`` holds every driver's cumulative utility after the
    ``k``-th simulated step of the episode.
    """
    cumulative = np.asarray(cumulative, dtype=float)
    if cumulative.ndim != 2:
        raise InputError("cumulative log must be steps x drivers")
    out = []
    for h in horizons:
        k = h * steps_per_day
        if h < 1 or k > cumulative.shape[0]:
            raise InputError(f"horizon {h} days ({k} steps) outside log span of {cumulative.shape[0]} steps")
        out.append((h, fairness_variance(cumulative[k - 1])))
    return out


def horizon_rows(method: str, seed: int, series: Sequence[tuple[int, float]]) -> list[str]:
    return [f"{method},{seed},{h},{_fmt(f)}" for h, f in series]
