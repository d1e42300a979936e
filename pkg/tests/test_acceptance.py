"""Acceptance criteria, one test each; a PASS/FAIL summary line per criterion is printed at the end."""

import dataclasses
import time

import numpy as np
import pytest

from delayfl.alpha_opt import alpha_closed_form, alpha_numeric
from delayfl.bounds import HyperParams, empirical_divergence, network_from, noise_bound, psi_term, sigma
from delayfl.cli import main as cli_main
from delayfl.cost_model import CostWeights, DeviceProfile, battery_feasible
from delayfl.experiments import ExperimentConfig, run_experiment, sample_profiles, trial_seed
from delayfl.gp.solver import brute_force, solve_sp
from delayfl.numerics import (Dataset, data_variability, estimate_constants, generate_synthetic, gradient,
                              minibatch_gradient, sample_stddev)
from delayfl.simulator import SimConfig, run_training

from oracles import fedavg

DEFAULT_HP = HyperParams()
DEFAULT_NET = network_from([25] * 5, 2.0, 0.2)
SIGMAS = (0.0, 0.5 * sigma(DEFAULT_NET, [1] * 5), sigma(DEFAULT_NET, [1] * 5))


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def test_c01_closed_form_alpha_validity(record_property):
    with Timer() as tm:
        gaps = {(k, s): abs(alpha_closed_form(s, DEFAULT_HP) - alpha_numeric(k, s, DEFAULT_HP))
                for k in range(0, 16) for s in SIGMAS}
    late = max(g for (k, _), g in gaps.items() if k >= 5)
    early = {j: max(g for (k, _), g in gaps.items() if k == j) for j in (0, 1)}
    record_property("detail", f"max gap k>=5: {late:.4f}; tolerated early gaps k=0: {early[0]:.3f}, "
                              f"k=1: {early[1]:.3f}; {tm.seconds:.2f}s")
    assert late <= 0.05
    assert tm.seconds < 1.0


def test_c02_delay_free_limit(record_property):
    hp = HyperParams(delay=0)
    with Timer() as tm:
        vals = [alpha_closed_form(s, hp) for s in SIGMAS]
        vals += [alpha_numeric(k, s, hp) for k in (0, 1, 5, 15) for s in SIGMAS]
    record_property("detail", f"{len(vals)} evaluations all equal 1.0: {all(v == 1.0 for v in vals)}")
    assert all(v == 1.0 for v in vals)
    assert tm.seconds < 1.0


def _local_minima(y):
    y = np.asarray(y)
    count = int(y[0] < y[1]) + int(y[-1] < y[-2])
    return count + int(np.sum((y[1:-1] < y[:-2]) & (y[1:-1] < y[2:])))


def test_c03_psi_grid_unimodality(record_property):
    grid = np.linspace(0.01, 1.0, 100)
    with Timer() as tm:
        counts = {(k, s): _local_minima(psi_term(k, grid, s, DEFAULT_HP)) for k in range(1, 16) for s in SIGMAS}
    record_property("detail", f"local minima per (k, sigma): {sorted(set(counts.values()))}")
    assert all(c == 1 for c in counts.values())
    assert tm.seconds < 1.0


def test_c04_noise_bound_not_violated(record_property):
    rng = np.random.default_rng(2024)
    data = generate_synthetic(7, 1, 50, 5, kind="ridge")[0]
    w = rng.standard_normal(5)
    theta = data_variability(data, [w], kind="ridge")
    S = sample_stddev(data)
    full = gradient(w, data, "ridge")
    lines = []
    with Timer() as tm:
        for n in (1, 5, 10, 25, 49):
            norms = [np.linalg.norm(minibatch_gradient(w, data, n, rng, "ridge")[0] - full)
                     for _ in range(10_000)]
            lines.append((n, float(np.mean(norms)), noise_bound(theta, S, 50, n)))
        zero = np.linalg.norm(minibatch_gradient(w, data, 50, rng, "ridge")[0] - full)
    record_property("detail", "; ".join(f"n={n}: {m:.3f}<={b:.3f}" for n, m, b in lines) + f"; full={zero}")
    assert all(m <= b for _, m, b in lines)
    assert zero == 0.0
    assert tm.seconds < 10.0


def test_c05_fedavg_reduction(record_property):
    hp = HyperParams(rounds=5, tau=10, delay=0, eta=0.1)
    data = generate_synthetic(3, 3, 15, 6, heterogeneity=0.4)
    with Timer() as tm:
        trace = run_training(SimConfig(hp, data, np.tile([d.size for d in data], (5, 1)), np.ones(5)))
        ref = fedavg(data, 5, 10, hp.eta)
    err = float(np.max(np.abs(trace.global_models - ref)))
    record_property("detail", f"max deviation over {len(ref)} ticks: {err:.2e}")
    assert trace.global_models.shape == ref.shape and err <= 1e-12
    assert tm.seconds < 5.0


def test_c06_divergence_bound_statistical(record_property):
    data = generate_synthetic(11, 3, 20, 3, heterogeneity=0.5, kind="ridge")
    est = estimate_constants(data, kind="ridge", probe_count=32, probe_scale=3.0)
    K, alpha = 5, 0.5
    hp = HyperParams(eta=0.05, beta=est.smoothness, lipschitz=est.lipschitz, delta=est.delta,
                     tau=5, delay=3, rounds=K)
    net = network_from([d.size for d in data], [c.theta for c in est.devices],
                       [c.sample_stddev for c in est.devices])
    n = np.full((K, 3), 5)
    bound = np.array([psi_term(k + 1, alpha, sigma(net, n[k]), hp) for k in range(K)])
    with Timer() as tm:
        div = np.array([[empirical_divergence(
            run_training(SimConfig(hp, data, n, np.full(K, alpha), seed=s, kind="ridge",
                                   record_centralized_reference=True)), k) for k in range(K)]
            for s in range(20)])
    share = float(np.mean(div > bound))
    record_property("detail", f"mean divergence {np.round(div.mean(0), 4).tolist()} vs bound "
                              f"{np.round(bound, 3).tolist()}; violating cells {share:.1%}")
    assert np.all(div.mean(0) <= bound)
    assert share <= 0.05
    assert tm.seconds < 120


def test_c07_gp_vs_brute_force(record_property):
    hp = HyperParams(rounds=2)
    w = CostWeights()
    base = [DeviceProfile(data_size=10, capacitance=4e-12, cycles_per_datum=600),
            DeviceProfile(data_size=10, capacitance=6.5e-12, cycles_per_datum=640)]
    # batteries at 60% of the full-batch need, so the budget binds
    _, margin = battery_feasible(base, np.full((2, 2), 10), hp.tau, w.model_bits)
    devs = [dataclasses.replace(d, battery=0.6 * (d.battery - m)) for d, m in zip(base, margin)]
    with Timer() as tm:
        best, best_n, _ = brute_force(hp, devs, w, alpha_mode="numeric")
        n, _, rep = solve_sp(hp, devs, w, alpha_mode="numeric")
    rel = rep.objective / best - 1
    record_property("detail", f"GP {np.asarray(n).tolist()} vs exhaustive {np.asarray(best_n).tolist()}: "
                              f"{rel:.2e} above optimum; {tm.seconds:.0f}s")
    assert rel <= 0.05
    assert tm.seconds < 300


def test_c08_gp_internal_health(record_property):
    cfg = ExperimentConfig()
    with Timer() as tm:
        _, _, rep = solve_sp(cfg.hp, sample_profiles(cfg, trial_seed(cfg, 0)), cfg.weights)
    h = np.array(rep.penalized_history)
    worst_rise = float(np.max(np.diff(h) / h[:-1])) if h.size > 1 else 0.0
    record_property("detail", f"slack {rep.max_slack:.5f}, condensation gap {rep.max_condensation_gap:.2e}, "
                              f"worst relative rise {worst_rise:.1e}, equality residual "
                              f"{rep.equality_residual:.1e}, {rep.outer_iterations} iterations, {tm.seconds:.0f}s")
    assert rep.max_slack <= 1.01
    assert rep.max_condensation_gap <= 1e-3
    assert worst_rise <= 1e-8
    assert rep.equality_residual <= 1e-6
    assert tm.seconds < 300


@pytest.fixture(scope="module")
def growth():
    with Timer() as tm:
        res = run_experiment(ExperimentConfig(), "minibatch_over_time")
    return res, tm.seconds


@pytest.mark.slow
def test_c09_minibatch_growth(growth, record_property):
    res, seconds = growth
    s = res.tables["summary"]
    mean = {(r, d): m for r, d, m, _, _ in s.rows}
    first = np.mean([mean[(1, d)] for d in range(1, 6)])
    last = np.mean([mean[(15, d)] for d in range(1, 6)])
    rise = {d: mean[(15, d)] / mean[(1, d)] - 1 for d in (1, 5)}
    record_property("detail", f"network mean {first:.2f} -> {last:.2f}; device 1 +{rise[1]:.1%}, "
                              f"device 5 +{rise[5]:.1%}; {seconds:.0f}s")
    assert last > first
    assert rise[1] > rise[5]
    assert seconds < 1800


@pytest.mark.slow
def test_c10_c1_ramp_down(record_property):
    with Timer() as tm:
        res = run_experiment(ExperimentConfig(), "minibatch_vs_c1")
    rows = sorted(res.tables["summary"].rows)
    c1 = [r[0] for r in rows]
    mean = [r[1] for r in rows]
    steps = np.diff(mean)
    strict = any(d < 0 for d, c in zip(steps, c1[1:]) if c < 1.0)
    record_property("detail", "means " + ", ".join(f"{c:.0e}:{m:.2f}" for c, m in zip(c1, mean))
                    + f"; {tm.seconds:.0f}s")
    assert np.all(steps <= 1e-9)
    assert strict
    assert tm.seconds < 1800


@pytest.mark.slow
def test_c11_optimized_alpha_dominance(record_property):
    with Timer() as tm:
        res = run_experiment(ExperimentConfig(), "objective_opt_vs_fixed")
    t = res.tables["trials"]
    obj = {(tr, m): v for tr, m, v in zip(t.column("trial"), t.column("mode"), t.column("objective"))}
    trials = sorted({tr for tr, _ in obj})
    bad = [tr for tr in trials
           if not all(obj[(tr, "numeric")] <= obj[(tr, f)] * (1 + 1e-6) for f in ("fixed_1", "fixed_0.5"))]
    gain = np.mean([1 - obj[(tr, "numeric")] / obj[(tr, "fixed_1")] for tr in trials])
    record_property("detail", f"{len(trials)} trials, violations {bad}; mean reduction vs alpha=1 "
                              f"{gain:.1%}; {tm.seconds:.0f}s")
    assert len(trials) == 20 and not bad
    assert tm.seconds < 1800


@pytest.mark.slow
def test_c12_learning_outcome(record_property):
    with Timer() as tm:
        res = run_experiment(ExperimentConfig(), "accuracy_run")
    mean = {r[0]: r[1] for r in res.tables["summary"].rows}
    record_property("detail", f"{res.meta['dataset']} data, final test accuracy: optimized "
                              f"{mean['optimized']:.4f}, small alpha {mean['small_alpha']:.4f}, "
                              f"alpha=1 {mean['alpha_one']:.4f} (reported only); {tm.seconds:.0f}s")
    assert mean["optimized"] >= mean["small_alpha"]
    assert tm.seconds < 600


@pytest.mark.parametrize("argv", [
    ["simulate", "--seed", "5"],
    ["optimize", "--trial", "2"],
    ["experiment", "alpha_vs_delta", "--trials", "1"],
])
def test_c13_cli_determinism(argv, tmp_path, record_property, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[training]\nrounds = 4\ntau = 6\ndelay = 5\n")
    for sub in ("a", "b"):
        assert cli_main(argv + ["--config", str(cfg), "--output", str(tmp_path / sub)]) == 0
    names = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    same = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)
    record_property("detail", f"{' '.join(argv[:2])}: {len(names)} CSV file(s) byte-identical: {same}")
    assert names and same
