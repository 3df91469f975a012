"""Seeded synthetic cities and the canned small instances used by tests and docs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import InputError, Request
from .graph import CityGraph
from .ingest import Timeline

PATTERNS = ("constant", "diurnal", "hotspot")


@dataclass
class SyntheticCity:
    graph: CityGraph
    timeline: Timeline
    pairs: list[tuple[int, int]]
    rates: np.ndarray  # expected requests per step, pairs x steps
    coords: np.ndarray
    steps_per_hour: int


def _strongly_connected_graph(n: int, density: float, rng: np.random.Generator,
                              coords: np.ndarray) -> CityGraph:
    order = rng.permutation(n)
    arcs = {(int(order[k]), int(order[(k + 1) % n])) for k in range(n)} if n > 1 else set()
    mask = rng.random((n, n)) < density
    arcs |= {(int(i), int(j)) for i, j in zip(*np.nonzero(mask)) if i != j}
    edges = {}
    for i, j in sorted(arcs):
        base = float(np.hypot(*(coords[i] - coords[j])))
        edges[(i, j)] = round(max(1.0, base * (1.0 + 0.3 * rng.random())), 3)
    return CityGraph(n, edges)


def generate_synthetic_city(
    n_nodes: int = 30,
    edge_density: float = 0.15,
    pattern: str = "diurnal",
    n_days: int = 28,
    seed: int = 0,
    n_pairs: int = 40,
    mean_rate: float = 0.5,
    amplitude: float = 0.8,
    steps_per_hour: int = 1,
    n_hotspots: int = 3,
    shift_day: int | None = None,
    city_size: float = 10.0,
) -> SyntheticCity:
    """Random strongly connected city with Poisson demand on ``n_pairs`` OD pairs.

    ``mean_rate`` is the average requests per hour per pair. Patterns:

    * ``constant`` -- flat rates;
    * ``diurnal`` -- each pair follows ``1 + amplitude * sin(2 pi (h - phase) / 24)``;
      trips into hotspots peak in the morning and trips out of them in the evening;
    * ``hotspot`` -- diurnal, but from ``shift_day`` on the hotspot set moves
      to different nodes (demand drift).
    """
    if n_nodes < 2:
        raise InputError("synthetic city needs at least 2 nodes")
    if pattern not in PATTERNS:
        raise InputError(f"pattern must be one of {PATTERNS}")
    if steps_per_hour < 1 or n_days < 1:
        raise InputError("steps_per_hour and n_days must be >= 1")
    rng = np.random.default_rng(seed)
    coords = rng.random((n_nodes, 2)) * city_size
    graph = _strongly_connected_graph(n_nodes, edge_density, rng, coords)

    n_hotspots = max(1, min(n_hotspots, n_nodes // 2))
    perm = rng.permutation(n_nodes)
    hot_a, hot_b = perm[:n_hotspots], perm[n_hotspots: 2 * n_hotspots]
    all_pairs = [(i, j) for i in range(n_nodes) for j in range(n_nodes) if i != j]
    n_pairs = min(n_pairs, len(all_pairs))

    def pick_pairs(hot: np.ndarray) -> list[tuple[int, int]]:
        w = np.array([1.0 + 4.0 * ((i in hot) + (j in hot)) for i, j in all_pairs])
        idx = rng.choice(len(all_pairs), size=n_pairs, replace=False, p=w / w.sum())
        return [all_pairs[k] for k in sorted(idx)]

    pairs_a = pick_pairs(hot_a)
    pairs = list(pairs_a)
    if pattern == "hotspot":
        pairs_b = pick_pairs(hot_b)
        pairs = sorted(set(pairs_a) | set(pairs_b))
    base = rng.lognormal(0.0, 0.5, size=len(pairs))
    base *= mean_rate / base.mean()

    n_steps = n_days * 24 * steps_per_hour
    hours = np.arange(n_steps) / steps_per_hour
    rates = np.zeros((len(pairs), n_steps))
    shift = n_days // 2 if shift_day is None else shift_day

    def profile(i: int, j: int, hot: np.ndarray) -> np.ndarray:
        if pattern == "constant":
            return np.ones(n_steps)
        into, out = j in hot, i in hot
        phase = 8.0 if into and not out else 18.0 if out and not into else 13.0
        phase += rng.normal(0, 1.0)
        return np.clip(1 + amplitude * np.sin(2 * np.pi * (hours - phase + 6) / 24), 0, None)

    for k, (i, j) in enumerate(pairs):
        if pattern == "hotspot":
            before = profile(i, j, hot_a) * ((i, j) in pairs_a)
            after = profile(i, j, hot_b) * ((i, j) in pairs_b)
            cut = shift * 24 * steps_per_hour
            rates[k] = np.concatenate([before[:cut], after[cut:]]) * base[k]
        else:
            rates[k] = profile(i, j, hot_a) * base[k]
    rates /= steps_per_hour
    counts = rng.poisson(rates)
    reqs = []
    for t in range(n_steps):
        for k in np.nonzero(counts[:, t])[0]:
            s, d = pairs[k]
            reqs.extend((t, s, d) for _ in range(counts[k, t]))
    timeline = Timeline(tuple(Request(n, t, s, d) for n, (t, s, d) in enumerate(reqs)), n_steps)
    return SyntheticCity(graph, timeline, pairs, rates, coords, steps_per_hour)


@dataclass
class Instance:
    """A fully specified small dispatch instance (graph, fleet, requests, horizon)."""

    graph: CityGraph
    start_locations: list[int]
    requests: list[Request]
    t_start: int
    t_end: int
    speed: float = 100.0
    lam: float = 1.0
    ttl: int = 5

    def simulator(self):
        from .dispatch import Simulator

        return Simulator(self.graph, self.start_locations, speed=self.speed, ttl=self.ttl)


def _star(lengths: dict[int, float], extra: dict[tuple[int, int], float] | None = None) -> CityGraph:
    """Hub 0 with a spoke of the given length to each leaf and a free return arc."""
    edges = {}
    for leaf, length in lengths.items():
        edges[(0, leaf)] = length
        edges[(leaf, 0)] = 0.0
    edges.update(extra or {})
    return CityGraph(max(max(lengths), *(max(k) for k in (extra or {(0, 0): 0}))) + 1, edges)


def fig1_scenario() -> Instance:
    """Three drivers, three timesteps; request values (2, 1), (2, 1), (3).

    Trips leave the hub and return for free, so a request's utility equals
    its spoke length wherever the driver stands. Balancing only the past
    equalises everyone after the second step ([2, 2, 2]) and then the third
    step's single request breaks it ([5, 2, 2]); planning over all three
    steps ends at [3, 3, 3].
    """
    graph = _star({1: 1.0, 2: 2.0, 3: 3.0})
    vals = [(2, 1), (2, 1), (3,)]
    reqs, rid = [], 0
    for t, step in enumerate(vals):
        for v in step:
            reqs.append(Request(rid, t, 0, v))
            rid += 1
    return Instance(graph, [0, 0, 0], reqs, 0, len(vals) - 1)


def toy_mdp() -> Instance:
    """Two drivers, three steps, one request per step, with a unique balance-optimal plan.

    Requests leave the hub for spokes of length 5, 1 and 3. Driver 1 starts
    one unit off the hub, so every pickup costs it a unit of utility. The
    optimal plan gives the long trip to driver 1 and both shorter trips to
    driver 0, ending at [4, 4]. Requests live for one batch only.
    """
    graph = _star({1: 1.0, 2: 3.0, 3: 5.0}, extra={(4, 0): 1.0})
    reqs = [Request(0, 0, 0, 3), Request(1, 1, 0, 1), Request(2, 2, 0, 2)]
    return Instance(graph, [0, 4], reqs, 0, 2, ttl=1)
