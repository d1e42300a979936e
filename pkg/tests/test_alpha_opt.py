import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delayfl.alpha_opt import (AlphaSolverConfig, alpha_closed_form, alpha_numeric, build_schedule,
                               closed_form_denominator)
from delayfl.bounds import HyperParams, psi_term

# frozen from an independent 40-digit evaluation of the closed form
CLOSED_FORM_S0 = 0.71747756233904889717
CLOSED_FORM_S02 = 0.72071070749248315845


def test_config_validation():
    with pytest.raises(ValueError):
        AlphaSolverConfig(grid_floor=0.0)
    with pytest.raises(ValueError):
        AlphaSolverConfig(grid_points=5)


def test_no_delay_gives_one():
    hp = HyperParams(delay=0)
    for k in (1, 5, 15):
        assert alpha_numeric(k, 0.3, hp) == 1.0
    assert alpha_closed_form(0.3, hp) == 1.0
    assert closed_form_denominator(0.3, hp) == 0.0
    assert alpha_closed_form(0.3, hp, full_output=True) == (1.0, True)


def test_numeric_matches_dense_grid(hp):
    grid = np.linspace(1e-3, 1.0, 100_001)
    best = grid[np.argmin(psi_term(10, grid, 0.0, hp))]
    assert abs(alpha_numeric(10, 0.0, hp) - best) <= 1e-3


def test_flat_psi_breaks_ties_upward():
    hp = HyperParams(delay=0, lipschitz=1e-300, delta=0.0)
    assert alpha_numeric(3, 0.0, hp) == 1.0


def test_closed_form_values(hp):
    assert alpha_closed_form(0.0, hp) == pytest.approx(CLOSED_FORM_S0, rel=1e-13)
    assert alpha_closed_form(0.2, hp) == pytest.approx(CLOSED_FORM_S02, rel=1e-13)


def test_closed_form_close_to_numeric_for_later_rounds(hp):
    for k in range(5, 16):
        assert abs(alpha_closed_form(0.0, hp) - alpha_numeric(k, 0.0, hp)) <= 0.05


def test_build_schedule_modes(hp):
    sig = np.full(15, 0.2)
    assert np.array_equal(build_schedule(sig, hp, mode="fixed", alpha=1.0).alpha, np.ones(15))
    cf = build_schedule(sig, hp, mode="closed_form").alpha
    assert np.all(cf == cf[0])
    varied = np.linspace(0.0, 0.5, 15)
    num = build_schedule(varied, hp, mode="numeric").alpha
    assert np.array_equal(num, [alpha_numeric(j + 1, s, hp) for j, s in enumerate(varied)])
    with pytest.raises(ValueError):
        build_schedule(sig, hp, mode="fixed", alpha=0.0)
    with pytest.raises(ValueError):
        build_schedule(sig, hp, mode="bogus")


def test_closed_form_mean_nonincreasing_in_delay():
    means = [alpha_closed_form(0.0, HyperParams(delay=d)) for d in range(20)]
    assert all(b <= a + 1e-15 for a, b in zip(means, means[1:]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 15), st.floats(0.0, 1.0), st.integers(0, 20))
def test_numeric_is_grid_optimal_and_in_range(k, s, delay):
    hp = HyperParams(delay=delay)
    a = alpha_numeric(k, s, hp)
    assert 0.0 < a <= 1.0
    grid = np.linspace(1e-3, 1.0, 1000)
    assert psi_term(k, a, s, hp) <= psi_term(k, grid, s, hp).min() + 1e-9
    assert 0.0 < alpha_closed_form(s, hp) <= 1.0
