import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delayfl.bounds import HyperParams, capital_psi, loss_gap
from delayfl.cost_model import (CostWeights, DeviceProfile, battery_feasible, energy_compute, energy_transmit,
                                network_snapshot, objective_terms, objective_value, round_times)

from conftest import default_devices


def test_profile_validation():
    with pytest.raises(ValueError):
        DeviceProfile(clock=0.0)
    with pytest.raises(ValueError):
        DeviceProfile(battery=-1.0)
    with pytest.raises(ValueError):
        CostWeights(0.0, 0.0, 0.0)
    DeviceProfile(battery=0.0)


def test_compute_energy():
    dev = DeviceProfile(capacitance=5e-12, cycles_per_datum=620, clock=1e6)
    assert energy_compute(dev, 20, 10) == pytest.approx(3.1e5, rel=1e-14)
    assert energy_compute(dev, 20, 20) == pytest.approx(2 * energy_compute(dev, 20, 10), rel=1e-15)
    assert energy_compute(dev, 20, 1) == pytest.approx(energy_compute(dev, 20, 10) / 10, rel=1e-15)
    with pytest.raises(ValueError):
        energy_compute(dev, 20, 0)


def test_transmit_energy():
    dev = DeviceProfile()
    assert energy_transmit(dev, CostWeights()) == pytest.approx(1.6e-3, rel=1e-14)
    assert energy_transmit(dev, 0) == 0.0
    fast = DeviceProfile(rate=2e6)
    assert energy_transmit(fast, 16000) == pytest.approx(energy_transmit(dev, 16000) / 2, rel=1e-15)


def test_round_times():
    dev = DeviceProfile(cycles_per_datum=600, clock=1e6, rate=1e6)
    assert round_times([dev], 20, [5], 16000) == pytest.approx((20 * 600 * 5 / 1e6, 0.016))
    devs = default_devices()
    _, ttx = round_times(devs, 20, [10] * 5, 16000)
    assert ttx == pytest.approx(0.016, rel=1e-14)
    base = round_times(devs, 20, [10, 10, 10, 10, 20], 16000)[0]
    assert round_times(devs, 20, [12, 10, 10, 10, 20], 16000)[0] == base


def test_battery_examples():
    devs = default_devices()
    ok, margin = battery_feasible(devs, np.ones((15, 5)), 20, 16000)
    used = [15 * (energy_compute(d, 20, 1) + energy_transmit(d, 16000)) for d in devs]
    assert ok.all()
    assert np.allclose(margin, 7.5e6 - np.array(used), rtol=0, atol=1e-6)
    dead = [DeviceProfile(battery=0.0)]
    assert not battery_feasible(dead, np.ones((1, 1)), 20, 0)[0].any()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 25), min_size=15, max_size=15), st.integers(0, 14))
def test_battery_monotone(col, k):
    dev = [DeviceProfile(battery=3e6)]
    n = np.array(col, dtype=float)[:, None]
    less = n.copy()
    less[k] = max(1.0, n[k, 0] - 1)
    if battery_feasible(dev, n, 20, 16000)[0][0]:
        assert battery_feasible(dev, less, 20, 16000)[0][0]


def _hand_objective(devs, n, alpha, w, hp):
    total = 0.0
    for k in range(n.shape[0]):
        e = 0.0
        tc = 0.0
        tt = 0.0
        for i, d in enumerate(devs):
            e += d.capacitance * d.cycles_per_datum * hp.tau * n[k, i] * d.clock**2 / 2
            e += d.tx_power * w.model_bits / d.rate
            tc = max(tc, hp.tau * d.cycles_per_datum * n[k, i] / d.clock)
            tt = max(tt, w.model_bits / d.rate)
        total += w.c1 * e + w.c2 * (tc + tt)
    psi = capital_psi(alpha, n, network_snapshot(devs), hp)
    return total + w.c3 * loss_gap(psi, hp)


def test_objective_hand_sum():
    hp = HyperParams(rounds=3)
    devs = default_devices(3)[:2]
    n = np.array([[3.0, 7.0], [10.0, 2.0], [25.0, 25.0]])
    alpha = np.array([0.7, 0.8, 0.9])
    w = CostWeights()
    assert objective_value(devs, n, alpha, w, hp) == pytest.approx(_hand_objective(devs, n, alpha, w, hp), rel=1e-13)


def test_objective_special_weights(hp):
    devs = default_devices()
    n = np.full((15, 5), 9.0)
    alpha = np.full(15, 0.7)
    only_gap = CostWeights(0.0, 0.0, 2.0)
    t = objective_terms(devs, n, alpha, only_gap, hp)
    assert t["objective"] == pytest.approx(2.0 * t["loss_gap"], rel=1e-15)
    no_gap = CostWeights(1e-4, 1e-3, 0.0)
    per_round = sum(energy_compute(d, 20, 9) + energy_transmit(d, 16000) for d in devs)
    tc, tt = round_times(devs, 20, n[0], 16000)
    expect = 15 * (1e-4 * per_round + 1e-3 * (tc + tt))
    assert objective_value(devs, n, alpha, no_gap, hp) == pytest.approx(expect, rel=1e-13)


def test_partial_monotonicities(hp, weights):
    devs = default_devices()
    n = np.full((15, 5), 9.0)
    more = n.copy()
    more[4, 2] = 12.0
    alpha = np.full(15, 0.7)
    a, b = objective_terms(devs, n, alpha, weights, hp), objective_terms(devs, more, alpha, weights, hp)
    assert b["energy"] > a["energy"] and b["time"] >= a["time"]
    assert b["loss_gap"] <= a["loss_gap"]
    for v in a.values():
        assert np.isfinite(v) and v >= 0
