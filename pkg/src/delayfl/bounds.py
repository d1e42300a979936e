"""Closed-form convergence bound of delayed federated averaging with minibatch SGD.

Schedule convention: minibatch and combiner schedules are arrays over ``K``
aggregation rounds. Row ``j`` (0-based) of a schedule enters the summed
divergence bound as round ``k = j + 1``, so that the sum runs over
``k = 1..K`` and never touches the degenerate ``k = 0`` term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class PreconditionError(ValueError):
    """Raised when a bound is evaluated outside its validity region."""


@dataclass(frozen=True)
class HyperParams:
    eta: float = 0.02
    beta: float = 1.0
    lipschitz: float = 25.0
    delta: float = 0.5
    phi: float = 0.025
    tau: int = 20
    delay: int = 19
    rounds: int = 15

    def __post_init__(self):
        for name in ("eta", "beta", "lipschitz", "phi"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        if not (math.isfinite(self.delta) and self.delta >= 0):
            raise ValueError(f"delta must be nonnegative, got {self.delta}")
        if int(self.tau) != self.tau or self.tau < 1:
            raise ValueError(f"tau must be a positive integer, got {self.tau}")
        if int(self.rounds) != self.rounds or self.rounds < 1:
            raise ValueError(f"rounds must be a positive integer, got {self.rounds}")
        if int(self.delay) != self.delay or self.delay < 0:
            raise ValueError(f"delay must be a nonnegative integer, got {self.delay}")
        if self.delay > self.tau:
            raise ValueError(f"delay exceeds tau ({self.delay} > {self.tau})")
        if self.eta >= 2.0 / self.beta:
            raise PreconditionError(f"learning rate {self.eta} must be below 2/beta = {2.0 / self.beta}")
        object.__setattr__(self, "tau", int(self.tau))
        object.__setattr__(self, "delay", int(self.delay))
        object.__setattr__(self, "rounds", int(self.rounds))

    @property
    def horizon(self) -> int:
        """T = K * tau."""
        return self.rounds * self.tau

    def growth(self, x) -> np.ndarray | float:
        """(1 + eta*beta)**x - 1, computed as expm1(x * log1p(eta*beta))."""
        return np.expm1(np.multiply(x, math.log1p(self.eta * self.beta)))


@dataclass(frozen=True)
class NetworkSnapshot:
    """Per-device quantities the bound consumes; ``rho`` is derived from ``data_sizes``."""

    data_sizes: np.ndarray
    variability: np.ndarray
    stddev: np.ndarray

    def __post_init__(self):
        sizes = np.asarray(self.data_sizes, dtype=float).reshape(-1)
        theta = np.broadcast_to(np.asarray(self.variability, dtype=float), sizes.shape).copy()
        stddev = np.broadcast_to(np.asarray(self.stddev, dtype=float), sizes.shape).copy()
        if sizes.size == 0 or np.any(sizes < 1):
            raise ValueError("every device needs N_i >= 1")
        if np.any(theta < 0) or np.any(stddev < 0):
            raise ValueError("variability and stddev must be nonnegative")
        object.__setattr__(self, "data_sizes", sizes)
        object.__setattr__(self, "variability", theta)
        object.__setattr__(self, "stddev", stddev)

    @property
    def rho(self) -> np.ndarray:
        return self.data_sizes / self.data_sizes.sum()

    @property
    def devices(self) -> int:
        return self.data_sizes.size


@dataclass(frozen=True)
class MinibatchSchedule:
    """Minibatch sizes ``n[k, i]`` over K rounds and I devices."""

    n: np.ndarray

    def __post_init__(self):
        n = np.atleast_2d(np.asarray(self.n, dtype=float))
        if n.ndim != 2 or n.size == 0:
            raise ValueError("minibatch schedule must be a non-empty K x I array")
        if np.any(n < 1) or np.any(~np.isfinite(n)):
            raise ValueError("minibatch sizes must be finite and at least 1")
        object.__setattr__(self, "n", n)

    def __array__(self, dtype=None, copy=None):
        return self.n if dtype is None else self.n.astype(dtype)

    @property
    def rounds(self) -> int:
        return self.n.shape[0]

    def check_sizes(self, data_sizes) -> None:
        if np.any(self.n > np.asarray(data_sizes, dtype=float)[None, :]):
            raise ValueError("minibatch size exceeds the local dataset size")


@dataclass(frozen=True)
class CombinerSchedule:
    """Combiner weights, one per aggregation round, each in (0, 1]."""

    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float).reshape(-1)
        if a.size == 0:
            raise ValueError("combiner schedule is empty")
        _check_alpha(a)
        object.__setattr__(self, "alpha", a)

    def __array__(self, dtype=None, copy=None):
        return self.alpha if dtype is None else self.alpha.astype(dtype)

    @property
    def rounds(self) -> int:
        return self.alpha.size


def noise_bound(theta, stddev, data_size, batch):
    """Upper bound on the expected SGD-noise norm of one device at minibatch size ``batch``.

    theta * S * sqrt(2 (N - n) / (N n)); vectorises over array arguments.
    """
    n = np.asarray(batch, dtype=float)
    N = np.asarray(data_size, dtype=float)
    if np.any(n < 1) or np.any(n > N):
        raise ValueError(f"minibatch size outside [1, N]: n={batch}, N={data_size}")
    out = np.asarray(theta, dtype=float) * np.asarray(stddev, dtype=float) * np.sqrt(2.0 * (N - n) / (N * n))
    return float(out) if out.ndim == 0 else out


def sigma(network: NetworkSnapshot, batches) -> float:
    """Network-weighted noise bound sigma(k) for one round's batch row."""
    row = np.asarray(batches, dtype=float).reshape(-1)
    if row.size != network.devices:
        raise ValueError(f"batch row has {row.size} entries for {network.devices} devices")
    per = noise_bound(network.variability, network.stddev, network.data_sizes, row)
    return float(network.rho @ per)


def h_term(x, sigma_k, hp: HyperParams):
    """h(x) = ((delta + sigma)/beta) ((1+eta*beta)^x - 1) - eta (delta + sigma) x."""
    if np.any(np.asarray(x) < 0):
        raise ValueError("h is only defined for x >= 0")
    s = hp.delta + np.asarray(sigma_k, dtype=float)
    return s / hp.beta * hp.growth(x) - hp.eta * s * np.asarray(x, dtype=float)


def _check_alpha(alpha) -> None:
    a = np.asarray(alpha, dtype=float)
    if np.any(a <= 0) or np.any(a > 1) or np.any(~np.isfinite(a)):
        raise ValueError(f"combiner weight must lie in (0, 1], got {alpha}")


def epsilon_term(k, alpha_k, sigma_k, hp: HyperParams):
    """Expected device-to-global model gap at the start of round ``k``."""
    _check_alpha(alpha_k)
    if np.any(np.asarray(k) < 0):
        raise ValueError("round index must be nonnegative")
    a = np.asarray(alpha_k, dtype=float)
    reach = 1.0 - (1.0 - a) ** np.asarray(k, dtype=float)
    return reach * 2.0 * hp.eta * (hp.lipschitz + np.asarray(sigma_k, dtype=float)) * (hp.tau / a - hp.delay)


def psi_term(k, alpha_k, sigma_k, hp: HyperParams):
    """Per-round bound on the distance between the global model and centralised GD.

    Vectorises over ``alpha_k`` (and broadcasts with ``k`` and ``sigma_k``).
    """
    _check_alpha(alpha_k)
    a = np.asarray(alpha_k, dtype=float)
    s = np.asarray(sigma_k, dtype=float)
    tau, delay = hp.tau, hp.delay
    eps = epsilon_term(k, a, s, hp)
    out = ((1.0 - a) * eps * hp.growth(tau)
           + (1.0 - a) * h_term(tau, s, hp)
           + a * h_term(tau - delay, s, hp)
           + a * hp.eta * delay * hp.lipschitz * (1.0 + hp.growth(tau - delay))
           + hp.eta * s * (tau - a * delay))
    return float(out) if np.ndim(out) == 0 else out


def capital_psi(alpha, batches, network: NetworkSnapshot, hp: HyperParams) -> float:
    """Sum over rounds of psi, with round ``j`` of the schedules evaluated at k = j + 1."""
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    n = np.atleast_2d(np.asarray(batches, dtype=float))
    if alpha.size != n.shape[0]:
        raise ValueError(f"combiner schedule has {alpha.size} rounds, minibatch schedule {n.shape[0]}")
    sig = [sigma(network, row) for row in n]
    return float(sum(psi_term(j + 1, a, s, hp) for j, (a, s) in enumerate(zip(alpha, sig))))


def loss_gap(psi_total: float, hp: HyperParams) -> float:
    """Upper bound on F(w^K) - F(w*) given the summed divergence bound."""
    if hp.eta >= 2.0 / hp.beta:
        raise PreconditionError("loss-gap bound requires eta < 2/beta")
    if psi_total < 0:
        raise ValueError("summed divergence bound must be nonnegative")
    c = hp.eta * hp.phi * hp.horizon
    half = 1.0 / (2.0 * c)
    return half + math.sqrt(half * half + hp.lipschitz * psi_total / c) + hp.lipschitz * psi_total


def sigma_schedule(batches, network: NetworkSnapshot) -> np.ndarray:
    return np.array([sigma(network, row) for row in np.atleast_2d(np.asarray(batches, dtype=float))])


def empirical_divergence(trace, k: int) -> float:
    """||w((k+1)tau - delay) - c_k((k+1)tau - delay)|| read from a simulation trace."""
    if trace.reference_end is None:
        raise ValueError("trace was recorded without the centralised reference")
    if not 0 <= k < len(trace.reference_end):
        raise IndexError(f"round {k} outside the recorded range 0..{len(trace.reference_end) - 1}")
    return float(np.linalg.norm(trace.global_at_round_end[k] - trace.reference_end[k]))


def network_from(sizes: Sequence[float], theta, stddev) -> NetworkSnapshot:
    return NetworkSnapshot(np.asarray(sizes, dtype=float), theta, stddev)
