"""Acceptance criteria 1-10. Each test records one PASS/FAIL line; see the terminal summary."""

import time

import numpy as np
import pytest

from fairride.baselines import batch_objective, greedy_assign, linearized_objective, matching_assign
from fairride.dispatch import Hyperparams, Stream, run_episode, scalarise, train, verify_episode
from fairride.experiment import ExperimentConfig, prepare_seed, run_arm
from fairride.forecast import DemandSeries, TrainSettings, fit_and_forecast, loss_and_grads, MlpModel, mse
from fairride.metrics import fairness_variance, normalized_fairness
from fairride.synthetic import fig1_scenario, toy_mdp

from oracles import myopic_fair_plan, numeric_grad, optimal_plans, pop_var
from test_baselines import brute, random_instance

VIOLATIONS = []  # criterion 10: every checked episode appends its violations here
DESK = ExperimentConfig()
TABLE1 = ("greedy", "matching", "momaql")
TABLE2 = ("momaql", "momaql_no_pred", "momaql_no_fair")


def _instances():
    rng = np.random.default_rng(2024)
    return [random_instance(rng) for _ in range(200)]


def test_criterion_1_matching_oracle(acceptance):
    start = time.perf_counter()
    worst = 0.0
    for g, p in _instances():
        a = matching_assign(p, g)
        worst = max(worst, abs(linearized_objective(p, g, a) - brute(g, p, True)))
    secs = time.perf_counter() - start
    ok = worst <= 1e-9 and secs < 10
    acceptance(1, ok, f"max |matching - optimum| = {worst:.1e} over 200 instances ({secs:.1f}s)")
    assert ok


def test_criterion_2_greedy_bound(acceptance):
    start = time.perf_counter()
    over, single, single_bad = 0, 0, 0
    for g, p in _instances():
        got = batch_objective(p, g, greedy_assign(p, g))
        best = brute(g, p, False)
        over += got > best + 1e-9
        if len(p.requests) == 1:
            single += 1
            single_bad += got < best - 1e-9
    secs = time.perf_counter() - start
    ok = over == 0 and single_bad == 0 and single > 0 and secs < 10
    acceptance(2, ok, f"greedy above optimum on {over}/200, below on {single_bad}/{single} single-request ({secs:.1f}s)")
    assert ok


def test_criterion_3_toy_convergence(acceptance):
    start = time.perf_counter()
    inst = toy_mdp()
    reqs = [(r.id, r.t, r.s, r.d) for r in inst.requests]
    best, plans = optimal_plans(inst.graph.distances.tolist(), inst.start_locations, reqs, inst.t_start,
                                inst.t_end, inst.speed, inst.lam, ttl=inst.ttl)
    assert len(plans) == 1
    hp = Hyperparams(episodes=10_000, gamma=0.9, alpha=0.1)
    sim = inst.simulator()
    tr = train(sim, [Stream(inst.requests, inst.t_start, inst.t_end)], hp, seed=0, verify=True)
    res = run_episode(sim, tr.tables, hp, inst.requests, inst.t_start, inst.t_end, "eval")
    VIOLATIONS.extend(tr.violations + verify_episode(res, inst.graph))
    plan = tuple((r.t, r.driver, r.request.id) for r in res.records)
    secs = time.perf_counter() - start
    ok = plan == plans[0][2] and secs < 60
    acceptance(3, ok, f"learned plan {plan} vs optimum {plans[0][2]}, return "
                      f"{scalarise(res.utilities, inst.lam, 1.0):.1f} vs {best:.1f} ({secs:.1f}s)")
    assert ok


def test_criterion_4_fig1(acceptance):
    start = time.perf_counter()
    inst = fig1_scenario()
    reqs = [(r.id, r.t, r.s, r.d) for r in inst.requests]
    args = (inst.graph.distances.tolist(), inst.start_locations, reqs, inst.t_start, inst.t_end, inst.speed, inst.lam)
    _, plans = optimal_plans(*args, ttl=inst.ttl)
    myopic = myopic_fair_plan(*args, ttl=inst.ttl)
    secs = time.perf_counter() - start
    long_var = pop_var(plans[0][0])
    ok = long_var == 0 and pop_var(myopic[-1]) > 0 and secs < 1
    acceptance(4, ok, f"long-horizon final variance {long_var:g}, myopic-fair {pop_var(myopic[-1]):g} ({secs:.2f}s)")
    assert ok


# --- desk scale


@pytest.fixture(scope="module")
def desk():
    """All five arms on the desk configuration, paired by seed; training episodes verified as they run."""
    arms, prep = {}, {}
    for seed in DESK.seeds:
        start = time.perf_counter()
        data = prepare_seed(DESK, seed)
        prep[seed] = time.perf_counter() - start
        for name in TABLE1 + TABLE2[1:]:
            arm = run_arm(DESK, data, name, check_training=True)
            VIOLATIONS.extend(arm.violations)
            VIOLATIONS.extend(["training"] * arm.train_violations)
            arms[name, seed] = arm
    return arms, prep


def _secs(arms, prep, names):
    return sum(prep.values()) + sum(a.seconds for (n, _), a in arms.items() if n in names)


@pytest.mark.slow
def test_criterion_5_table1_direction(acceptance, desk):
    arms, prep = desk
    wins = []
    for seed in DESK.seeds:
        m = {n: arms[n, seed].metrics for n in TABLE1}
        wins.append(all(m["momaql"].total_utility > m[b].total_utility
                        and m["momaql"].normalized_fairness < m[b].normalized_fairness for b in ("greedy", "matching")))
    secs = _secs(arms, prep, TABLE1)
    ok = sum(wins) >= 4 and secs < 15 * 60
    acceptance(5, ok, f"learned dispatcher beats both baselines on utility and normalized fairness on "
                      f"{sum(wins)}/5 seeds {wins} ({secs:.0f}s)")
    assert ok


@pytest.mark.slow
def test_criterion_6_table2_direction(acceptance, desk):
    arms, prep = desk
    fair_ok, pred_ok = [], []
    for seed in DESK.seeds:
        full, nopred, nofair = (arms[n, seed].metrics for n in TABLE2)
        fair_ok.append(nofair.total_utility > max(full.total_utility, nopred.total_utility)
                       and nofair.fairness >= 5 * full.fairness)
        pred_ok.append(nopred.total_utility < full.total_utility and nopred.fairness > full.fairness)
    secs = _secs(arms, prep, TABLE2)
    ok = sum(fair_ok) >= 4 and sum(pred_ok) >= 4 and secs < 20 * 60
    acceptance(6, ok, f"no-fairness highest utility with >=5x variance on {sum(fair_ok)}/5 seeds; "
                      f"no-prediction lower utility and higher variance on {sum(pred_ok)}/5 ({secs:.0f}s)")
    assert ok


@pytest.mark.slow
def test_criterion_7_horizon_direction(acceptance, desk):
    arms, _ = desk

    def series(name):
        return np.mean([[f for _, f in arms[name, s].metrics.per_horizon] for s in DESK.seeds], axis=0)

    full, nopred = series("momaql"), series("momaql_no_pred")
    steps = np.abs(np.diff(full))  # steps[h-1] = |F(h+1) - F(h)|
    decreasing = all(steps[h - 1] > steps[h] for h in range(3, 6))
    ok = len(full) == 7 and decreasing and nopred[-1] > full[-1]
    acceptance(7, ok, f"seed-mean |dF| for h=1..6 {np.round(steps, 1).tolist()}; final fairness "
                      f"no-prediction {nopred[-1]:.1f} vs full {full[-1]:.1f}")
    assert ok


def test_criterion_8_forecaster(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    hours = np.arange(24 * 30)
    train_s, test_s = {}, {}
    for k in range(4):
        counts = rng.poisson(5 + 4 * np.sin(2 * np.pi * (hours - 3 * k) / 24))
        train_s[(0, k + 1)] = DemandSeries((0, k + 1), counts[: 24 * 25])
        test_s[(0, k + 1)] = counts[24 * 25:]
    fc = fit_and_forecast(train_s, 24 * 5, TrainSettings(lag=24, hidden=16, epochs=60, seed=0))
    model_mse = fc.pooled_mse(test_s)
    base = mse(np.concatenate([np.full(24 * 5, train_s[p].counts.mean()) for p in train_s]),
               np.concatenate([test_s[p] for p in train_s]))
    worst = 0.0
    for activation in ("tanh", "linear"):
        m = MlpModel(rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=4), 0.3, activation=activation)
        x, y = rng.normal(size=(6, 3)), rng.normal(size=6)
        _, grads = loss_and_grads(m, x, y)
        b2 = np.array([m.b2])

        def f():
            m.b2 = float(b2[0])
            return loss_and_grads(m, x, y)[0]

        for g, n in zip(grads, numeric_grad(f, [m.w1, m.b1, m.w2, b2])):
            worst = max(worst, float(np.max(np.abs(g - n) / np.maximum(np.abs(n), 1e-8))))
    secs = time.perf_counter() - start
    gain = 1 - model_mse / base
    ok = gain >= 0.2 and worst <= 1e-4 and secs < 60
    acceptance(8, ok, f"MLP pooled MSE {model_mse:.2f} vs mean baseline {base:.2f} ({gain:.0%} lower); "
                      f"max gradient rel. error {worst:.1e} ({secs:.1f}s)")
    assert ok


def test_criterion_9_metric_properties(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(9)
    bad = 0
    for _ in range(1000):
        x = rng.normal(10, 5, size=rng.integers(2, 20))
        c, a = rng.normal(0, 10), rng.uniform(0.1, 10)
        perm = rng.permutation(x)
        v = fairness_variance(x)
        bad += abs(fairness_variance(perm) - v) > 1e-12 * max(1, v)
        bad += abs(fairness_variance(x + c) - v) > 1e-12 * max(1, v, c * c, float(np.max(x * x)))
        bad += abs(fairness_variance(a * x) - a * a * v) > 1e-12 * max(1, a * a * v)
        nf = normalized_fairness(x)
        bad += abs(normalized_fairness(a * x) - nf) > 1e-12 * max(1, abs(nf))
        bad += abs(normalized_fairness(perm) - nf) > 1e-12 * max(1, abs(nf))
        lam, omega = rng.uniform(0, 1), rng.uniform(0.1, 1)
        s = scalarise(x, lam, omega)
        scale = max(1.0, float(np.abs(x).sum()), float(np.max(x * x)))
        bad += abs(scalarise(perm, lam, omega) - s) > 1e-12 * scale
        bad += abs(scalarise(x + c, lam, omega) - (s + x.size * c)) > 1e-12 * max(scale, x.size * abs(c), c * c)
        lo, hi = sorted(rng.uniform(0, 1, 2))
        bad += scalarise(x, hi, omega) > scalarise(x, lo, omega) + 1e-12 * scale
        flat = np.full(x.size, float(x[0]))
        bad += scalarise(flat, lo, omega) != scalarise(flat, hi, omega)
    secs = time.perf_counter() - start
    ok = bad == 0 and secs < 5
    acceptance(9, ok, f"{bad} invariant violations over 1000 random vectors ({secs:.2f}s)")
    assert ok


@pytest.mark.slow
def test_criterion_10_conservation(acceptance, desk):
    # runs last in this module: criterion 3 and the desk fixture have filled VIOLATIONS
    ok = not VIOLATIONS
    acceptance(10, ok, f"{len(VIOLATIONS)} exclusivity/accounting violations across all acceptance episodes")
    assert ok
