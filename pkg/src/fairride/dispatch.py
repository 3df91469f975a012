"""Batch dispatch simulator and the centralised multi-objective multi-agent Q-learning dispatcher.

Each driver is an agent with its own Q-table. The agent state is the
driver's current node plus a coarse rank bucket of its cumulative utility
among all drivers; an action is the (origin, destination) key of an open
request, or NoOp. Per-driver rewards are scalarised as
``sum(rewards) - lam * omega * Var(rewards)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .base import IN_TRANSIT, InputError, Request, TrainingError
from .graph import CityGraph
from .metrics import EpisodeMetrics, horizon_stability

NOOP = None
ActionKey = tuple[int, int] | None


CREDIT_MODES = ("equal", "assigned", "marginal")


@dataclass
class Hyperparams:
    lam: float = 1.0
    omega: float = 0.6
    gamma: float = 0.9
    alpha: float = 0.1
    epsilon_start: float = 1.0
    epsilon_floor: float = 0.05
    decay_fraction: float = 0.8
    episodes: int = 300
    buckets: int = 3
    # How the step change of the scalarised objective is credited:
    # "equal": split equally among every driver that took a decision (NoOp included);
    # "assigned": split equally among drivers that received a request;
    # "marginal": each assigned driver gets its own increment, added in driver-id order.
    credit: str = "equal"
    # value of never-written entries: "utility" (immediate trip utility) or "zero"
    init: str = "utility"

    def validate(self) -> "Hyperparams":
        checks = [
            (0 <= self.lam <= 1, "lam must be in [0, 1]"),
            (0 < self.omega <= 1, "omega must be in (0, 1]"),
            (0 <= self.gamma < 1, "gamma must be in [0, 1)"),
            (0 <= self.alpha <= 1, "alpha must be in [0, 1]"),
            (0 <= self.epsilon_floor <= self.epsilon_start <= 1, "need 0 <= epsilon_floor <= epsilon_start <= 1"),
            (0 < self.decay_fraction <= 1, "decay_fraction must be in (0, 1]"),
            (self.episodes >= 0, "episodes must be >= 0"),
            (self.buckets >= 1, "buckets must be >= 1"),
            (self.credit in CREDIT_MODES, f"credit must be one of {CREDIT_MODES}"),
            (self.init in ("utility", "zero"), "init must be 'utility' or 'zero'"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InputError(msg)
        return self

    def epsilon(self, episode: int) -> float:
        """Linear decay from ``epsilon_start`` to ``epsilon_floor`` over the first ``decay_fraction`` of episodes."""
        span = max(1, math.ceil(self.decay_fraction * self.episodes))
        frac = min(1.0, episode / span)
        return self.epsilon_start + frac * (self.epsilon_floor - self.epsilon_start)


def scalarise(rewards, lam: float, omega: float) -> float:
    """``sum(r) - lam * omega * Var(r)`` with population variance."""
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise InputError("scalarise needs at least one driver")
    return float(r.sum() - lam * omega * np.mean((r - r.mean()) ** 2))


def rank_buckets(utilities, buckets: int = 3) -> np.ndarray:
    """Bucket each driver by its rank position among all drivers (ties share the mean rank)."""
    o = np.round(np.asarray(utilities, dtype=float), 9)
    n = o.size
    if n == 1:
        return np.full(1, buckets // 2)
    srt = np.sort(o)
    less = np.searchsorted(srt, o, "left")
    equal = np.searchsorted(srt, o, "right") - less
    frac = (less + (equal - 1) / 2) / (n - 1)
    return np.minimum(buckets - 1, np.floor(frac * buckets)).astype(int)


# ---------------------------------------------------------------------------
# simulation


@dataclass
class DriverState:
    id: int
    location: int
    capacity: int = 4
    onboard: int = 0
    utility: float = 0.0
    route: list[tuple[int, int]] = field(default_factory=list)
    log: list[tuple[int, int, float]] = field(default_factory=list)

    def check(self) -> None:
        assert 0 <= self.onboard <= self.capacity, f"driver {self.id}: onboard {self.onboard} > capacity"
        assert (self.location == IN_TRANSIT) == bool(self.route), f"driver {self.id}: route/location mismatch"


@dataclass
class BatchView:
    """What a policy sees at one batch: available drivers, their nodes, all cumulative utilities, open requests."""

    t: int
    available: list[int]
    locations: np.ndarray
    utilities: np.ndarray
    requests: list[Request]


Assignment = dict[int, Request]


class Policy(Protocol):
    def decide(self, view: BatchView) -> Assignment: ...

    def observe(self, view: BatchView, assignment: Assignment, gains: dict[int, float]) -> None: ...

    def end_episode(self) -> None: ...


@dataclass
class AssignmentRecord:
    t: int
    driver: int
    request: Request
    location: int
    utility: float


@dataclass
class EpisodeResult:
    t_start: int
    t_end: int
    drivers: list[DriverState]
    records: list[AssignmentRecord]
    cumulative: np.ndarray
    expired: int
    n_requests: int

    @property
    def utilities(self) -> np.ndarray:
        return np.array([d.utility for d in self.drivers])

    def metrics(self, horizons: Sequence[int] = (), steps_per_day: int = 24) -> EpisodeMetrics:
        series = horizon_stability(self.cumulative, horizons, steps_per_day) if horizons else []
        return EpisodeMetrics.from_utilities(self.utilities, series)


def verify_episode(result: EpisodeResult, graph: CityGraph) -> list[str]:
    """Exclusivity (each request to at most one driver) and utility-accounting replay; returns violations."""
    problems = []
    seen: dict[int, int] = {}
    for rec in result.records:
        if rec.request.id in seen:
            problems.append(f"request {rec.request.id} assigned to drivers {seen[rec.request.id]} and {rec.driver}")
        seen[rec.request.id] = rec.driver
        replay = graph.trip_utility(rec.location, rec.request)
        if not math.isclose(replay, rec.utility, rel_tol=1e-12, abs_tol=1e-9):
            problems.append(f"request {rec.request.id}: logged utility {rec.utility} != replay {replay}")
    per_driver = np.zeros(len(result.drivers))
    for rec in result.records:
        per_driver[rec.driver] += rec.utility
    for d in result.drivers:
        if not math.isclose(per_driver[d.id], d.utility, rel_tol=1e-9, abs_tol=1e-9):
            problems.append(f"driver {d.id}: o_v {d.utility} != replayed sum {per_driver[d.id]}")
        if len(d.log) != sum(1 for rec in result.records if rec.driver == d.id):
            problems.append(f"driver {d.id}: log length mismatch")
    if not math.isclose(result.utilities.sum(), sum(r.utility for r in result.records), rel_tol=1e-9, abs_tol=1e-9):
        problems.append("total utility does not match the sum of assignment utilities")
    return problems


class Simulator:
    """Steps a fleet through batches of requests.

    An assigned driver drives deadhead + trip and is in transit for
    ``max(1, ceil(distance / speed))`` steps, then becomes available at the
    destination. Unassigned requests roll over for at most ``ttl`` batches.
    """

    def __init__(self, graph: CityGraph, start_locations: Sequence[int], speed: float = 10.0,
                 ttl: int = 5, capacity: int = 4):
        if not speed > 0:
            raise InputError("speed must be positive")
        if ttl < 1:
            raise InputError("ttl must be >= 1")
        for loc in start_locations:
            graph._check_node(int(loc))
        self.graph = graph
        self.start_locations = [int(x) for x in start_locations]
        self.speed = float(speed)
        self.ttl = int(ttl)
        self.capacity = capacity

    @property
    def n_drivers(self) -> int:
        return len(self.start_locations)

    def run(self, requests: Iterable[Request], t_start: int, t_end: int, policy: Policy) -> EpisodeResult:
        """Simulate steps ``t_start..t_end`` inclusive."""
        by_step: dict[int, list[Request]] = {}
        n_req = 0
        for r in sorted(requests, key=lambda r: (r.t, r.id)):
            if t_start <= r.t <= t_end:
                by_step.setdefault(r.t, []).append(r)
                n_req += 1
        drivers = [DriverState(i, loc, self.capacity) for i, loc in enumerate(self.start_locations)]
        dist = self.graph.distances
        open_reqs: list[Request] = []
        records: list[AssignmentRecord] = []
        cumulative = np.zeros((t_end - t_start + 1, len(drivers)))
        expired = 0
        for k, t in enumerate(range(t_start, t_end + 1)):
            for d in drivers:
                if d.route and d.route[-1][1] <= t:
                    d.location = d.route[-1][0]
                    d.route.clear()
                    d.onboard = 0
            open_reqs.extend(by_step.get(t, ()))
            fresh = [r for r in open_reqs if t - r.t < self.ttl]
            expired += len(open_reqs) - len(fresh)
            open_reqs = fresh
            available = [d.id for d in drivers if d.location != IN_TRANSIT]
            view = BatchView(
                t=t,
                available=available,
                locations=np.array([d.location for d in drivers]),
                utilities=np.array([d.utility for d in drivers]),
                requests=list(open_reqs),
            )
            assignment = policy.decide(view) if available and open_reqs else {}
            gains: dict[int, float] = {}
            taken: set[int] = set()
            open_ids = {r.id for r in open_reqs}
            for v in sorted(assignment):
                r = assignment[v]
                d = drivers[v]
                if d.location == IN_TRANSIT or r.id not in open_ids or r.id in taken:
                    raise RuntimeError(f"policy produced an invalid assignment: driver {v} -> request {r.id}")
                u = self.graph.trip_utility(d.location, r)
                travel = dist[d.location, r.s] + dist[r.s, r.d]
                steps = max(1, math.ceil(travel / self.speed - 1e-9))
                records.append(AssignmentRecord(t, v, r, d.location, u))
                d.log.append((t, r.id, u))
                d.utility += u
                d.route = [(r.d, t + steps)]
                d.location = IN_TRANSIT
                d.onboard = min(d.capacity, d.onboard + 1)
                gains[v] = u
                taken.add(r.id)
            if taken:
                open_reqs = [r for r in open_reqs if r.id not in taken]
            if available and view.requests:
                policy.observe(view, assignment, gains)
            cumulative[k] = [d.utility for d in drivers]
        policy.end_episode()
        for d in drivers:
            d.check()
        return EpisodeResult(t_start, t_end, drivers, records, cumulative, expired, n_req)


# ---------------------------------------------------------------------------
# Q-tables


def _fmt_action(key: ActionKey) -> str:
    return "noop" if key is None else f"{key[0]}>{key[1]}"


def _parse_action(text: str) -> ActionKey:
    if text == "noop":
        return None
    s, d = text.split(">")
    return (int(s), int(d))


class QTables:
    """Per-driver tabular action values.

    Stored densely as ``(driver, state, action column)``; the action
    columns grow as new (origin, destination) keys are encountered.
    Column 0 is NoOp. Entries never written read as a prior: 0, or with
    ``prior`` (an all-pairs distance matrix) an untried trip reads as the
    state's NoOp value plus its immediate utility ``dist(s, d) - dist(node, s)``,
    so it is preferred to waiting exactly when its utility is positive.
    """

    FORMAT = "qtables v1"

    def __init__(self, n_drivers: int, n_nodes: int, buckets: int = 3, prior: np.ndarray | None = None):
        self.n_drivers = n_drivers
        self.n_nodes = n_nodes
        self.buckets = buckets
        if prior is not None:
            prior = np.asarray(prior, dtype=float)
            if prior.shape != (n_nodes, n_nodes):
                raise InputError(f"prior distance matrix must be {n_nodes}x{n_nodes}")
        self.prior = prior
        self._cols: dict[ActionKey, int] = {NOOP: 0}
        self._keys: list[ActionKey] = [NOOP]
        self._q = np.zeros((n_drivers, n_nodes * buckets, 8))
        self._seen = np.zeros(self._q.shape, dtype=bool)

    def state(self, node: int, bucket: int) -> int:
        return node * self.buckets + bucket

    def state_key(self, state: int) -> tuple[int, int]:
        return divmod(state, self.buckets)

    def col(self, key: ActionKey, create: bool = False) -> int | None:
        c = self._cols.get(key)
        if c is None and create:
            c = len(self._keys)
            self._cols[key] = c
            self._keys.append(key)
            if c >= self._q.shape[2]:
                grow = self._q.shape[2]
                self._q = np.concatenate([self._q, np.zeros(self._q.shape[:2] + (grow,))], axis=2)
                self._seen = np.concatenate([self._seen, np.zeros(self._seen.shape[:2] + (grow,), dtype=bool)], axis=2)
        return c

    def _noop(self, driver: int, state: int) -> float:
        return float(self._q[driver, state, 0]) if self._seen[driver, state, 0] else 0.0

    def default(self, driver: int, state: int, key: ActionKey) -> float:
        """Value of an entry that was never written."""
        if self.prior is None or key is None:
            return 0.0
        node = state // self.buckets
        val = self.prior[key[0], key[1]] - self.prior[node, key[0]]
        return self._noop(driver, state) + float(val) if math.isfinite(val) else 0.0

    def get(self, driver: int, state: int, key: ActionKey) -> float:
        c = self._cols.get(key)
        if c is None or not self._seen[driver, state, c]:
            return self.default(driver, state, key)
        return float(self._q[driver, state, c])

    def set(self, driver: int, state: int, key: ActionKey, value: float) -> None:
        c = self.col(key, create=True)
        self._q[driver, state, c] = value
        self._seen[driver, state, c] = True

    def values(self, driver: int, state: int, cols: np.ndarray, defaults: np.ndarray | None = None) -> np.ndarray:
        """Values for column indices; ``-1`` marks keys unknown to the table.

        Unwritten entries take ``defaults`` (aligned with ``cols``, the
        immediate utilities under a prior) or 0; under a prior, unwritten
        trips also add the state's NoOp value.
        """
        cols = np.asarray(cols, dtype=int)
        safe = np.maximum(cols, 0)
        out = self._q[driver, state, safe].copy()
        unseen = (cols < 0) | ~self._seen[driver, state, safe]
        out[unseen] = 0.0 if defaults is None else np.asarray(defaults, dtype=float)[unseen]
        if self.prior is not None:
            out[unseen & (cols != 0)] += self._noop(driver, state)
        return out

    def max_value(self, driver: int, state: int, keys: Iterable[ActionKey] | None = None) -> float:
        """Max over ``keys``, or over written entries when ``keys`` is None (0 if none)."""
        if keys is None:
            seen = self._seen[driver, state, : len(self._keys)]
            return float(self._q[driver, state, : len(self._keys)][seen].max()) if seen.any() else 0.0
        return max(self.get(driver, state, k) for k in keys)

    def entries(self) -> Iterable[tuple[int, int, ActionKey, float]]:
        for v, s, c in zip(*np.nonzero(self._seen)):
            yield int(v), int(s), self._keys[c], float(self._q[v, s, c])

    def save(self, path: str | Path) -> None:
        prior = "utility" if self.prior is not None else "zero"
        lines = [f"# {self.FORMAT} drivers={self.n_drivers} nodes={self.n_nodes} buckets={self.buckets} prior={prior}"]
        for v, s, key, val in self.entries():
            node, b = self.state_key(s)
            lines.append(f"{v} {node}:{b} {_fmt_action(key)} {val!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path, graph: CityGraph | None = None) -> "QTables":
        """Read a checkpoint; a ``prior=utility`` table needs the graph it was trained on."""
        path = Path(path)
        if not path.exists():
            raise InputError(f"checkpoint not found: {path}")
        lines = path.read_text().splitlines()
        if not lines or not lines[0].startswith(f"# {cls.FORMAT}"):
            raise InputError(f"{path}: not a '{cls.FORMAT}' checkpoint")
        meta = dict(tok.split("=") for tok in lines[0].split()[3:])
        prior = None
        if meta.get("prior", "zero") == "utility":
            if graph is None:
                raise InputError(f"{path}: utility-prior checkpoint needs its graph")
            prior = graph.distances
        tables = cls(int(meta["drivers"]), int(meta["nodes"]), int(meta["buckets"]), prior)
        for n, ln in enumerate(lines[1:], start=2):
            if not ln.strip():
                continue
            try:
                v, sk, ak, val = ln.split()
                node, b = (int(x) for x in sk.split(":"))
                tables.set(int(v), tables.state(node, b), _parse_action(ak), float(val))
            except (ValueError, IndexError):
                raise InputError(f"{path}:{n}: expected 'driver node:bucket action value'") from None
        return tables

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QTables):
            return NotImplemented
        same_prior = (self.prior is None) == (other.prior is None)
        return same_prior and sorted(self.entries(), key=str) == sorted(other.entries(), key=str)


def q_update(tables: QTables, driver: int, state: int, action: ActionKey, reward: float,
             next_state: int | None, gamma: float, alpha: float,
             next_actions: Iterable[ActionKey] | None = None) -> float:
    """One temporal-difference step; ``next_state=None`` is terminal.

    The bootstrap maximises over ``next_actions`` when given (the actions
    actually available at the next decision), else over written entries.
    """
    nxt = 0.0 if next_state is None else tables.max_value(driver, next_state, next_actions)
    return _td(tables, driver, state, action, reward, nxt, gamma, alpha)


def _td(tables: QTables, driver: int, state: int, action: ActionKey, reward: float,
        next_value: float, gamma: float, alpha: float) -> float:
    q = tables.get(driver, state, action)
    new = q + alpha * (reward + gamma * next_value - q)
    if not math.isfinite(new):
        raise TrainingError(f"non-finite Q update for driver {driver}: q={q} reward={reward} next={next_value}")
    tables.set(driver, state, action, new)
    return new


# ---------------------------------------------------------------------------
# the dispatcher


def candidate_actions(graph: CityGraph, view: BatchView, driver: int) -> set[ActionKey]:
    """Keys of open requests the driver can reach, plus NoOp; empty while in transit."""
    loc = int(view.locations[driver])
    if loc == IN_TRANSIT:
        return set()
    dist = graph.distances
    keys: set[ActionKey] = {NOOP}
    for r in view.requests:
        if math.isfinite(dist[loc, r.s]) and math.isfinite(dist[r.s, r.d]):
            keys.add((r.s, r.d))
    return keys


def _group_requests(requests: Sequence[Request]) -> tuple[list[tuple[int, int]], list[list[Request]]]:
    keys: list[tuple[int, int]] = []
    queues: list[list[Request]] = []
    index: dict[tuple[int, int], int] = {}
    for r in sorted(requests, key=lambda r: (r.t, r.id)):
        k = (r.s, r.d)
        if k not in index:
            index[k] = len(keys)
            keys.append(k)
            queues.append([])
        queues[index[k]].append(r)
    return keys, queues


@dataclass
class BatchActions:
    """Open requests grouped by action key, with table columns and per-driver feasibility."""

    drivers: list[int]
    keys: list[tuple[int, int]]
    queues: list[list[Request]]
    cols: np.ndarray  # table column per key, NoOp (0) last; -1 for keys unknown to the table
    feasible: np.ndarray  # drivers x (keys + NoOp)
    defaults: np.ndarray  # drivers x (keys + NoOp): value of unwritten entries

    @classmethod
    def build(cls, tables: QTables, graph: CityGraph, view: BatchView, create: bool = False) -> "BatchActions":
        avail = sorted(view.available)
        keys, queues = _group_requests(view.requests)
        cols = [tables.col(k, create) for k in keys]
        cols = np.array([-1 if c is None else c for c in cols] + [0], dtype=int)
        feasible = np.ones((len(avail), len(keys) + 1), dtype=bool)
        defaults = np.zeros((len(avail), len(keys) + 1))
        if keys and avail:
            starts = np.array([k[0] for k in keys], dtype=int)
            ends = np.array([k[1] for k in keys], dtype=int)
            util = graph.utility_matrix(view.locations[avail], starts, ends)
            feasible[:, :-1] = np.isfinite(util)
            if tables.prior is not None:
                defaults[:, :-1] = np.where(feasible[:, :-1], util, 0.0)
        return cls(avail, keys, queues, cols, feasible, defaults)

    def row_values(self, tables: QTables, row: int, state: int) -> np.ndarray:
        return tables.values(self.drivers[row], state, self.cols, self.defaults[row])

    def best_value(self, tables: QTables, row: int, state: int) -> float:
        """Max table value over the feasible actions of ``drivers[row]`` (the bootstrap target)."""
        return float(self.row_values(tables, row, state)[self.feasible[row]].max())


def select_joint_assignment(tables: QTables, graph: CityGraph, view: BatchView, epsilon: float,
                            rng: np.random.Generator, buckets: np.ndarray | None = None,
                            create: bool = False,
                            actions: BatchActions | None = None) -> tuple[Assignment, dict[int, ActionKey]]:
    """Centralised epsilon-greedy joint action.

    Exploring drivers (probability ``epsilon`` each, in id order) take a
    uniformly random feasible action. The rest are resolved greedily: the
    highest remaining (driver, action) Q-value is granted first, ties to the
    lower driver id, and a driver whose preferred request is gone falls back
    to its next-best action. Each request goes to at most one driver.
    """
    if actions is None:
        actions = BatchActions.build(tables, graph, view, create)
    avail = actions.drivers
    chosen: dict[int, ActionKey] = {}
    assignment: Assignment = {}
    if not avail:
        return assignment, chosen
    if buckets is None:
        buckets = rank_buckets(view.utilities, tables.buckets)
    keys, feasible = actions.keys, actions.feasible
    queues = [list(q) for q in actions.queues]
    n_k = len(keys)
    supply = np.array([len(q) for q in queues] + [0])
    states = [tables.state(int(view.locations[v]), int(buckets[v])) for v in avail]

    def grant(i: int, k: int) -> None:
        v = avail[i]
        if k == n_k:
            chosen[v] = NOOP
            return
        chosen[v] = keys[k]
        assignment[v] = queues[k].pop(0)
        supply[k] -= 1

    greedy_rows = []
    draws = rng.random(len(avail))
    for i, v in enumerate(avail):
        if draws[i] < epsilon:
            options = [k for k in range(n_k) if supply[k] > 0 and feasible[i, k]] + [n_k]
            grant(i, options[int(rng.integers(len(options)))])
        else:
            greedy_rows.append(i)
    if greedy_rows:
        Q = np.vstack([actions.row_values(tables, i, states[i]) for i in greedy_rows])
        Q[~feasible[greedy_rows]] = -np.inf
        Q[:, :n_k][:, supply[:n_k] <= 0] = -np.inf
        width = n_k + 1
        for _ in range(len(greedy_rows)):
            flat = int(np.argmax(Q))
            r, k = divmod(flat, width)
            grant(greedy_rows[r], k)
            Q[r, :] = -np.inf
            if k < n_k and supply[k] <= 0:
                Q[:, k] = -np.inf
    return assignment, chosen


@dataclass
class _Pending:
    state: int
    action: ActionKey
    reward: float


class MomaqlPolicy:
    """Q-table dispatcher. In train mode it learns from every joint step; in eval mode it acts greedily."""

    def __init__(self, graph: CityGraph, tables: QTables, hp: Hyperparams, train: bool = False,
                 epsilon: float = 0.0, rng: np.random.Generator | None = None):
        self.graph = graph
        self.tables = tables
        self.hp = hp
        self.train = train
        self.epsilon = epsilon if train else 0.0
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._pending: dict[int, _Pending] = {}
        self._states: dict[int, int] = {}
        self._chosen: dict[int, ActionKey] = {}
        self.step_signal: list[float] = []

    def decide(self, view: BatchView) -> Assignment:
        buckets = rank_buckets(view.utilities, self.tables.buckets)
        self._states = {v: self.tables.state(int(view.locations[v]), int(buckets[v])) for v in view.available}
        actions = BatchActions.build(self.tables, self.graph, view, create=self.train)
        if self.train:
            for row, v in enumerate(actions.drivers):
                p = self._pending.pop(v, None)
                if p is not None:
                    nxt = actions.best_value(self.tables, row, self._states[v])
                    _td(self.tables, v, p.state, p.action, p.reward, nxt, self.hp.gamma, self.hp.alpha)
        assignment, self._chosen = select_joint_assignment(
            self.tables, self.graph, view, self.epsilon, self.rng, buckets, actions=actions)
        return assignment

    def credit(self, utilities: np.ndarray, gains: dict[int, float],
               deciders: Iterable[int] = ()) -> dict[int, float]:
        """Per-driver reward signals for one joint step."""
        lam, omega = self.hp.lam, self.hp.omega
        before = scalarise(utilities, lam, omega)
        o = utilities.astype(float).copy()
        if self.hp.credit in ("equal", "assigned"):
            for v, u in gains.items():
                o[v] += u
            group = sorted(set(deciders) | set(gains)) if self.hp.credit == "equal" else sorted(gains)
            share = (scalarise(o, lam, omega) - before) / len(group) if group else 0.0
            return {v: share for v in group}
        out = {}
        prev = before
        for v in sorted(gains):
            o[v] += gains[v]
            cur = scalarise(o, lam, omega)
            out[v] = cur - prev
            prev = cur
        return out

    def observe(self, view: BatchView, assignment: Assignment, gains: dict[int, float]) -> None:
        if not self.train:
            return
        rewards = self.credit(view.utilities, gains, self._chosen)
        self.step_signal.append(sum(rewards.values()))
        for v, key in self._chosen.items():
            self._pending[v] = _Pending(self._states[v], key, rewards.get(v, 0.0))

    def end_episode(self) -> None:
        if self.train:
            for v, p in sorted(self._pending.items()):
                q_update(self.tables, v, p.state, p.action, p.reward, None, self.hp.gamma, self.hp.alpha)
        self._pending.clear()


def run_episode(sim: Simulator, tables: QTables, hp: Hyperparams, requests: Iterable[Request],
                t_start: int, t_end: int, mode: str = "eval", seed: int = 0,
                epsilon: float | None = None) -> EpisodeResult:
    if mode not in ("train", "eval"):
        raise InputError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    eps = (hp.epsilon_start if epsilon is None else epsilon) if train else 0.0
    policy = MomaqlPolicy(sim.graph, tables, hp, train=train, epsilon=eps, rng=np.random.default_rng(seed))
    return sim.run(requests, t_start, t_end, policy)


@dataclass
class Stream:
    """One training episode's request stream over steps ``t_start..t_end``."""

    requests: list[Request]
    t_start: int
    t_end: int
    label: str = ""


@dataclass
class TrainResult:
    tables: QTables
    returns: list[float]
    epsilons: list[float]
    episodes: list[EpisodeResult] = field(default_factory=list, repr=False)
    violations: list[str] = field(default_factory=list)


def train(sim: Simulator, streams: Sequence[Stream], hp: Hyperparams, seed: int = 0,
          tables: QTables | None = None, keep_episodes: bool = False, verify: bool = False) -> TrainResult:
    """Repeat training episodes, cycling through ``streams``; returns tables and the scalarised-return curve.

    With ``verify`` every episode is checked by :func:`verify_episode` as it
    finishes and the violations are collected.
    """
    hp.validate()
    if not streams:
        raise InputError("train needs at least one stream")
    if tables is None:
        tables = QTables(sim.n_drivers, sim.graph.n_nodes, hp.buckets,
                         sim.graph.distances if hp.init == "utility" else None)
    seeds = np.random.SeedSequence(seed).generate_state(max(1, hp.episodes))
    returns, epsilons, kept, bad = [], [], [], []
    for ep in range(hp.episodes):
        st = streams[ep % len(streams)]
        eps = hp.epsilon(ep)
        res = run_episode(sim, tables, hp, st.requests, st.t_start, st.t_end, "train", int(seeds[ep]), eps)
        returns.append(scalarise(res.utilities, hp.lam, hp.omega))
        epsilons.append(eps)
        if keep_episodes:
            kept.append(res)
        if verify:
            bad += [f"episode {ep}: {msg}" for msg in verify_episode(res, sim.graph)]
    return TrainResult(tables, returns, epsilons, kept, bad)
