import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delayfl.bounds import (CombinerSchedule, HyperParams, MinibatchSchedule, NetworkSnapshot, PreconditionError,
                            capital_psi, epsilon_term, h_term, loss_gap, noise_bound, psi_term, sigma,
                            sigma_schedule)

# frozen from an independent 40-digit evaluation of the bound formulas
PSI_K5_HALF = 9.8094830174619116584
PSI_K1_A07_S01 = 7.792531814256261978
GAP_FULL_BATCH = 3792.7628474355783696
EPS_K3_A04_S03 = 24.595648
H7_S01 = 0.005211400589568


def default_network(devices=5, size=25):
    return NetworkSnapshot(np.full(devices, float(size)), 2.0, 0.2)


def test_hyperparams_validation():
    with pytest.raises(ValueError, match="delay exceeds tau"):
        HyperParams(delay=25, tau=20)
    with pytest.raises(PreconditionError):
        HyperParams(eta=2.0, beta=1.0)
    assert HyperParams().horizon == 300


def test_network_rho_sums_to_one():
    net = NetworkSnapshot(np.array([10.0, 30.0, 60.0]), 1.0, 1.0)
    assert abs(net.rho.sum() - 1.0) <= 1e-12
    assert np.allclose(net.rho, [0.1, 0.3, 0.6])


def test_schedules_validate():
    with pytest.raises(ValueError):
        MinibatchSchedule(np.array([[0.5, 2.0]]))
    with pytest.raises(ValueError):
        CombinerSchedule(np.array([0.5, 0.0]))
    with pytest.raises(ValueError):
        CombinerSchedule(np.array([1.2]))
    with pytest.raises(ValueError):
        MinibatchSchedule(np.array([[3.0, 30.0]])).check_sizes([25, 25])


def test_noise_bound_examples():
    assert noise_bound(2.0, 0.2, 50, 50) == 0.0
    assert noise_bound(2.0, 0.2, 50, 25) == pytest.approx(0.08, rel=1e-15)
    with pytest.raises(ValueError):
        noise_bound(2.0, 0.2, 50, 0)
    with pytest.raises(ValueError):
        noise_bound(2.0, 0.2, 50, 51)


def test_sigma_examples():
    net = default_network()
    assert sigma(net, np.full(5, 25.0)) == 0.0
    assert sigma(net, np.full(5, 5.0)) == pytest.approx(0.4 * math.sqrt(0.32), rel=1e-14)
    single = NetworkSnapshot(np.array([40.0]), 1.5, 0.3)
    assert sigma(single, np.array([7.0])) == pytest.approx(noise_bound(1.5, 0.3, 40, 7), rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 25), min_size=5, max_size=5), st.integers(0, 4), st.integers(1, 24))
def test_sigma_nonincreasing_in_each_batch(row, i, bump):
    net = default_network()
    row = np.array(row, dtype=float)
    more = row.copy()
    more[i] = min(25.0, row[i] + bump)
    assert sigma(net, more) <= sigma(net, row) + 1e-15


def test_h_term_examples(hp):
    assert h_term(0, 0.3, hp) == 0.0
    assert abs(h_term(1, 0.3, hp)) < 1e-16
    assert h_term(2, 0.0, hp) == pytest.approx(0.0002, rel=1e-10)
    assert h_term(7, 0.1, hp) == pytest.approx(H7_S01, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 5), st.integers(1, 60))
def test_h_nonnegative_and_nondecreasing(s, x):
    hp = HyperParams()
    assert h_term(x, s, hp) >= -1e-15
    assert h_term(x + 1, s, hp) >= h_term(x, s, hp) - 1e-15


def test_epsilon_examples(hp):
    assert epsilon_term(0, 0.4, 0.3, hp) == 0.0
    assert epsilon_term(3, 1.0, 0.0, hp) == pytest.approx(1.0, rel=1e-14)
    assert epsilon_term(3, 1.0, 0.0, hp) == epsilon_term(9, 1.0, 0.0, hp)
    assert epsilon_term(3, 0.4, 0.3, hp) == pytest.approx(EPS_K3_A04_S03, rel=1e-12)
    with pytest.raises(ValueError):
        epsilon_term(3, 0.0, 0.3, hp)


def test_psi_examples(hp):
    full_delay = HyperParams(delay=20)
    assert psi_term(4, 1.0, 0.0, full_delay) == pytest.approx(10.0, rel=1e-14)
    expect = h_term(1, 0.0, hp) + hp.eta * hp.delay * hp.lipschitz * (1 + hp.eta * hp.beta)
    assert psi_term(3, 1.0, 0.0, hp) == pytest.approx(expect, rel=1e-14)
    assert psi_term(5, 0.5, 0.0, hp) == pytest.approx(PSI_K5_HALF, rel=1e-12)
    assert psi_term(1, 0.7, 0.1, hp) == pytest.approx(PSI_K1_A07_S01, rel=1e-12)


def test_psi_vectorised_over_alpha(hp):
    grid = np.linspace(0.1, 1.0, 7)
    assert np.allclose(psi_term(6, grid, 0.2, hp), [psi_term(6, a, 0.2, hp) for a in grid], rtol=0, atol=1e-13)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 15), st.floats(1e-3, 1.0), st.floats(0.0, 2.0))
def test_psi_positive(k, a, s):
    assert psi_term(k, a, s, HyperParams()) > 0


def test_capital_psi_examples(hp):
    net = default_network()
    one = HyperParams(rounds=1)
    n1 = np.full((1, 5), 10.0)
    s1 = sigma(net, n1[0])
    assert capital_psi([0.6], n1, net, one) == pytest.approx(psi_term(1, 0.6, s1, one), rel=1e-15)
    # alpha = 1 makes psi independent of k, so doubling K doubles the sum
    n = np.full((15, 5), 7.0)
    doubled = HyperParams(rounds=30)
    assert capital_psi(np.ones(30), np.vstack([n, n]), net, doubled) == pytest.approx(
        2 * capital_psi(np.ones(15), n, net, hp), rel=1e-14)
    full = np.full((15, 5), 25.0)
    collapse = 15 * (h_term(1, 0.0, hp) + hp.eta * 19 * hp.lipschitz * (1 + hp.eta * hp.beta))
    assert capital_psi(np.ones(15), full, net, hp) == pytest.approx(collapse, rel=1e-14)
    assert collapse == pytest.approx(145.35, rel=1e-14)
    with pytest.raises(ValueError):
        capital_psi(np.ones(14), full, net, hp)


def test_loss_gap_examples(hp):
    assert loss_gap(0.0, hp) == 1.0 / (hp.eta * hp.phi * hp.horizon)
    assert loss_gap(145.35, hp) == pytest.approx(GAP_FULL_BATCH, rel=1e-13)
    long = HyperParams(rounds=10**9 // 20)
    assert loss_gap(3.0, long) == pytest.approx(hp.lipschitz * 3.0, rel=1e-3)
    assert loss_gap(2.0, hp) > loss_gap(1.0, hp)
    with pytest.raises(ValueError):
        loss_gap(-1.0, hp)


def test_sigma_schedule_rows(hp):
    net = default_network()
    n = np.vstack([np.full(5, 5.0), np.full(5, 25.0)])
    assert np.allclose(sigma_schedule(n, net), [sigma(net, n[0]), 0.0])


def test_psi_grid_unimodal_for_every_round(hp):
    grid = np.round(np.arange(1, 101) * 0.01, 2)
    for k in range(1, 16):
        v = psi_term(k, grid, 0.0, hp)
        interior = [j for j in range(1, 99) if v[j] < v[j - 1] and v[j] < v[j + 1]]
        edge = [j for j in (0, 99) if (j == 0 and v[0] < v[1]) or (j == 99 and v[99] < v[98])]
        assert len(interior) + len(edge) == 1
