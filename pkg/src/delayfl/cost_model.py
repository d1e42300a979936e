"""Per-round energy and latency accounting and the joint training objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .bounds import HyperParams, NetworkSnapshot, capital_psi, loss_gap


@dataclass(frozen=True)
class DeviceProfile:
    """Compute, radio and data constants of one edge device (SI units)."""

    capacitance: float = 5e-12
    cycles_per_datum: float = 620.0
    clock: float = 1e6
    tx_power: float = 0.1
    rate: float = 1e6
    battery: float = 7.5e6
    data_size: int = 25
    variability: float = 2.0
    stddev: float = 0.2

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ValueError(f"{f.name} must be finite")
        for name in ("capacitance", "cycles_per_datum", "clock", "tx_power", "rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        # a zero battery is representable; it is simply infeasible
        if self.battery < 0:
            raise ValueError("battery must be nonnegative")
        if self.data_size < 1 or int(self.data_size) != self.data_size:
            raise ValueError("data_size must be a positive integer")
        if self.variability < 0 or self.stddev < 0:
            raise ValueError("variability and stddev must be nonnegative")

    @property
    def energy_per_datum(self) -> float:
        """Computation energy of one datapoint for one local step."""
        return self.capacitance * self.cycles_per_datum * self.clock**2 / 2.0


@dataclass(frozen=True)
class CostWeights:
    c1: float = 1e-4
    c2: float = 1e-3
    c3: float = 2.5e6
    model_bits: int = 16000

    def __post_init__(self):
        if min(self.c1, self.c2, self.c3) < 0:
            raise ValueError("objective weights must be nonnegative")
        if self.c1 == self.c2 == self.c3 == 0:
            raise ValueError("at least one objective weight must be positive")
        if self.model_bits < 0:
            raise ValueError("model_bits must be nonnegative")


def network_snapshot(devices: Sequence[DeviceProfile]) -> NetworkSnapshot:
    return NetworkSnapshot(np.array([d.data_size for d in devices], dtype=float),
                           np.array([d.variability for d in devices]),
                           np.array([d.stddev for d in devices]))


def energy_compute(dev: DeviceProfile, tau: int, n):
    """Energy of tau local steps on minibatches of size n."""
    if np.any(np.asarray(n) < 1):
        raise ValueError("minibatch size must be at least 1")
    return dev.energy_per_datum * tau * n


def energy_transmit(dev: DeviceProfile, weights: CostWeights | int, round_index: int | None = None) -> float:
    """Energy of one model upload. ``weights`` may be a CostWeights or the bit count Q.

    ``round_index`` is accepted for symmetry with time-varying radios; power and
    rate are constant per device here.
    """
    bits = weights.model_bits if isinstance(weights, CostWeights) else weights
    return dev.tx_power * bits / dev.rate


def round_times(devices: Sequence[DeviceProfile], tau: int, batch_row, model_bits: int) -> tuple[float, float]:
    """(T_cmp, T_tx) of one round: the slowest device sets each."""
    row = np.asarray(batch_row, dtype=float).reshape(-1)
    if row.size != len(devices):
        raise ValueError("batch row length does not match the device count")
    t_cmp = max(tau * d.cycles_per_datum * n / d.clock for d, n in zip(devices, row))
    t_tx = max(model_bits / d.rate for d in devices)
    return float(t_cmp), float(t_tx)


def device_energy(devices: Sequence[DeviceProfile], batches, tau: int, model_bits: int) -> np.ndarray:
    """(K, I) array of per-round, per-device energy (computation plus upload)."""
    n = np.atleast_2d(np.asarray(batches, dtype=float))
    per_datum = np.array([d.energy_per_datum for d in devices])
    tx = np.array([energy_transmit(d, model_bits) for d in devices])
    return per_datum[None, :] * tau * n + tx[None, :]


def battery_feasible(devices: Sequence[DeviceProfile], batches, tau: int,
                     model_bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-device battery feasibility over the whole schedule and the remaining joules."""
    used = device_energy(devices, batches, tau, model_bits).sum(axis=0)
    margin = np.array([d.battery for d in devices]) - used
    ok = margin >= 0
    # an empty battery cannot run anything
    ok &= np.array([d.battery > 0 for d in devices])
    return ok, margin


def objective_terms(devices: Sequence[DeviceProfile], batches, alpha, weights: CostWeights,
                    hp: HyperParams, network: NetworkSnapshot | None = None) -> dict[str, float]:
    n = np.atleast_2d(np.asarray(batches, dtype=float))
    network = network or network_snapshot(devices)
    energy = float(device_energy(devices, n, hp.tau, weights.model_bits).sum())
    time = float(sum(sum(round_times(devices, hp.tau, row, weights.model_bits)) for row in n))
    psi_total = capital_psi(alpha, n, network, hp)
    gap = loss_gap(psi_total, hp)
    return {"energy": energy, "time": time, "psi_total": psi_total, "loss_gap": gap,
            "objective": weights.c1 * energy + weights.c2 * time + weights.c3 * gap}


def objective_value(devices: Sequence[DeviceProfile], batches, alpha, weights: CostWeights,
                    hp: HyperParams, network: NetworkSnapshot | None = None) -> float:
    """Weighted energy + latency + loss-gap bound of a (minibatch, combiner) schedule pair."""
    return objective_terms(devices, batches, alpha, weights, hp, network)["objective"]
