"""Comparison policies: balance-objective Greedy and per-batch max-weight matching.

Both optimise ``pi(M) - lam * F(M)`` over one batch, where ``F`` is the
population variance of all drivers' cumulative utilities. Each driver takes
at most one request per batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .base import InputError, Request
from .dispatch import Assignment, BatchView, Hyperparams
from .graph import CityGraph


@dataclass
class BatchAssignmentProblem:
    drivers: list[int]
    locations: np.ndarray  # node per driver id (all drivers)
    utilities: np.ndarray  # cumulative o_v per driver id (all drivers)
    requests: list[Request]
    lam: float = 1.0

    @classmethod
    def from_view(cls, view: BatchView, lam: float) -> "BatchAssignmentProblem":
        return cls(list(view.available), view.locations, view.utilities, list(view.requests), lam)

    def utility_matrix(self, graph: CityGraph) -> np.ndarray:
        """Trip utilities, available drivers x requests, ``-inf`` where infeasible."""
        if not self.drivers or not self.requests:
            return np.zeros((len(self.drivers), len(self.requests)))
        s = np.array([r.s for r in self.requests])
        d = np.array([r.d for r in self.requests])
        return graph.utility_matrix(self.locations[self.drivers], s, d)


def _var(o: np.ndarray) -> float:
    return float(np.mean((o - o.mean()) ** 2))


def marginal_variance(utilities: np.ndarray, driver: int, gain) -> np.ndarray:
    """Change in population variance when ``gain`` is added to one driver, others fixed.

    ``(2 u (o_v - mean) + u^2 (1 - 1/n)) / n``; vectorised over ``gain``.
    """
    o = np.asarray(utilities, dtype=float)
    n = o.size
    u = np.asarray(gain, dtype=float)
    return (2 * u * (o[driver] - o.mean()) + u * u * (1 - 1 / n)) / n


def batch_objective(problem: BatchAssignmentProblem, graph: CityGraph, assignment: Assignment) -> float:
    """Exact balance objective of the cumulative utilities after the batch: ``sum(o') - lam * Var(o')``."""
    o = problem.utilities.astype(float).copy()
    for v, r in assignment.items():
        o[v] += graph.trip_utility(int(problem.locations[v]), r)
    return float(o.sum() - problem.lam * _var(o))


def weight_matrix(problem: BatchAssignmentProblem, graph: CityGraph) -> np.ndarray:
    """Linearised edge weights ``u - lam * dVar_v(u)`` holding the other drivers fixed; ``-inf`` if infeasible."""
    U = problem.utility_matrix(graph)
    W = np.full(U.shape, -np.inf)
    for i, v in enumerate(problem.drivers):
        ok = np.isfinite(U[i])
        W[i, ok] = U[i, ok] - problem.lam * marginal_variance(problem.utilities, v, U[i, ok])
    return W


def linearized_objective(problem: BatchAssignmentProblem, graph: CityGraph, assignment: Assignment) -> float:
    """Sum of :func:`weight_matrix` entries over assigned pairs."""
    W = weight_matrix(problem, graph)
    row = {v: i for i, v in enumerate(problem.drivers)}
    col = {r.id: j for j, r in enumerate(problem.requests)}
    return float(sum(W[row[v], col[r.id]] for v, r in assignment.items()))


def greedy_assign(problem: BatchAssignmentProblem, graph: CityGraph, allow_decline: bool = True) -> Assignment:
    """Requests in arrival order; each goes to the free driver with the largest exact objective gain.

    A request is left unassigned when every gain is negative and
    ``allow_decline`` is set. Ties go to the lower driver id.
    """
    if not problem.drivers or not problem.requests:
        return {}
    U = problem.utility_matrix(graph)
    o = problem.utilities.astype(float).copy()
    lam = problem.lam
    free = np.ones(len(problem.drivers), dtype=bool)
    order = sorted(range(len(problem.requests)), key=lambda j: (problem.requests[j].t, problem.requests[j].id))
    ids = np.array(problem.drivers)
    out: Assignment = {}
    for j in order:
        cand = np.nonzero(free & np.isfinite(U[:, j]))[0]
        if cand.size == 0:
            continue
        u = U[cand, j]
        gains = np.array([u[k] - lam * marginal_variance(o, ids[i], u[k]) for k, i in enumerate(cand)])
        # lowest driver id among ties
        best = max(range(cand.size), key=lambda k: (gains[k], -ids[cand[k]]))
        if gains[best] < 0 and allow_decline:
            continue
        i = cand[best]
        out[int(ids[i])] = problem.requests[j]
        o[ids[i]] += u[best]
        free[i] = False
        if not free.any():
            break
    return out


def matching_assign(problem: BatchAssignmentProblem, graph: CityGraph) -> Assignment:
    """Exact maximum-weight bipartite matching on the linearised weights.

    Each driver also has a private NoOp column of weight 0, so pairs with
    negative weight stay unmatched.
    """
    if not problem.drivers or not problem.requests:
        return {}
    W = weight_matrix(problem, graph)
    n_d, n_r = W.shape
    finite = np.isfinite(W)
    floor = (np.abs(W[finite]).sum() + 1.0) if finite.any() else 1.0
    big = np.full((n_d, n_r + n_d), -floor * 10)
    big[:, :n_r] = np.where(finite, W, -floor * 10)
    big[np.arange(n_d), n_r + np.arange(n_d)] = 0.0
    rows, cols = linear_sum_assignment(big, maximize=True)
    out: Assignment = {}
    for i, j in zip(rows, cols):
        if j < n_r and finite[i, j] and W[i, j] >= 0:
            out[problem.drivers[i]] = problem.requests[j]
    return out


class GreedyPolicy:
    def __init__(self, graph: CityGraph, lam: float = 1.0, allow_decline: bool = True):
        self.graph, self.lam, self.allow_decline = graph, lam, allow_decline

    def decide(self, view: BatchView) -> Assignment:
        return greedy_assign(BatchAssignmentProblem.from_view(view, self.lam), self.graph, self.allow_decline)

    def observe(self, view, assignment, gains) -> None:
        pass

    def end_episode(self) -> None:
        pass


class MatchingPolicy(GreedyPolicy):
    def decide(self, view: BatchView) -> Assignment:
        return matching_assign(BatchAssignmentProblem.from_view(view, self.lam), self.graph)


POLICY_NAMES = ("greedy", "matching", "momaql", "momaql_no_pred", "momaql_no_fair")


@dataclass
class PolicySpec:
    """How to build and train a named policy."""

    name: str
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    use_prediction: bool = True

    @property
    def learned(self) -> bool:
        return self.name.startswith("momaql")


def ablation_no_prediction(hp: Hyperparams) -> PolicySpec:
    """Full dispatcher trained without forecast-derived requests."""
    return PolicySpec("momaql_no_pred", Hyperparams(**vars(hp)), use_prediction=False)


def ablation_no_fairness(hp: Hyperparams) -> PolicySpec:
    """Full dispatcher with the fairness weight forced to zero."""
    hp = Hyperparams(**vars(hp))
    hp.lam = 0.0
    return PolicySpec("momaql_no_fair", hp, use_prediction=True)


def policy_spec(name: str, hp: Hyperparams) -> PolicySpec:
    if name == "momaql_no_pred":
        return ablation_no_prediction(hp)
    if name == "momaql_no_fair":
        return ablation_no_fairness(hp)
    if name in POLICY_NAMES:
        return PolicySpec(name, Hyperparams(**vars(hp)))
    raise InputError(f"unknown policy {name!r}; choose from {', '.join(POLICY_NAMES)}")
