"""Tick-level simulation of delayed federated averaging with minibatch SGD.

One tick is one local SGD step. Rounds span the ticks
``k*tau - delay + 1 .. (k+1)*tau - delay``. At the last tick of a round every
device uploads its model; the uplink takes ``ceil(delay/2)`` ticks, the server
averages the payloads on arrival and sends the average back over a downlink
taking ``floor(delay/2)`` ticks, so it reaches the devices exactly at the
synchronisation tick ``k*tau``. There each device mixes the stale average into
its freshly stepped local model with the round's combiner weight.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bounds import CombinerSchedule, HyperParams, MinibatchSchedule
from .cost_model import CostWeights, DeviceProfile, energy_compute, energy_transmit, round_times
from .io import Table, emit_csv
from .numerics import Dataset, accuracy, minibatch_gradient, weighted_gradient, weighted_loss


@dataclass
class SimConfig:
    hp: HyperParams
    datasets: Sequence[Dataset]
    batches: MinibatchSchedule
    combiner: CombinerSchedule
    seed: int = 0
    record_centralized_reference: bool = False
    devices: Sequence[DeviceProfile] | None = None
    weights: CostWeights | None = None
    kind: str = "logistic"
    l2: float = 0.0
    w0: np.ndarray | None = None
    eval_data: Dataset | None = None
    record_locals: bool = False

    def validate(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.datasets:
            raise ValueError("need at least one device dataset")
        dims = {d.dim for d in self.datasets}
        if len(dims) != 1:
            raise ValueError(f"device datasets disagree on the feature dimension: {sorted(dims)}")
        n = np.asarray(MinibatchSchedule(np.asarray(self.batches, dtype=float)).n)
        alpha = np.asarray(CombinerSchedule(np.asarray(self.combiner, dtype=float)).alpha)
        K, I = self.hp.rounds, len(self.datasets)
        if n.shape != (K, I):
            raise ValueError(f"minibatch schedule has shape {n.shape}, expected ({K}, {I})")
        if alpha.size != K:
            raise ValueError(f"combiner schedule has {alpha.size} rounds, expected {K}")
        if np.any(n != np.rint(n)):
            raise ValueError("simulated minibatch sizes must be integers")
        sizes = np.array([d.size for d in self.datasets])
        if np.any(n > sizes[None, :]):
            raise ValueError("minibatch size exceeds the local dataset size")
        if self.devices is not None and len(self.devices) != I:
            raise ValueError("device profiles and datasets differ in count")
        if self.w0 is not None and np.asarray(self.w0).reshape(-1).size != self.datasets[0].dim:
            raise ValueError("initial model dimension does not match the features")
        if self.eval_data is not None and self.eval_data.dim != self.datasets[0].dim:
            raise ValueError("evaluation data dimension does not match the features")
        return n.astype(int), alpha


@dataclass
class SimTrace:
    ticks: np.ndarray
    rounds: np.ndarray
    global_models: np.ndarray
    global_loss: np.ndarray
    accuracy: np.ndarray | None
    energy_to_date: np.ndarray
    alpha_used: np.ndarray
    candidates: list
    candidate_losses: np.ndarray
    selected: np.ndarray
    selected_loss: float
    selected_round: int
    global_at_round_end: list
    reference_end: list | None
    round_energy: np.ndarray | None
    round_time: np.ndarray | None
    local_models: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def table(self) -> Table:
        cols = ["round", "t", "global_loss"]
        if self.accuracy is not None:
            cols.append("accuracy")
        cols += ["energy_to_date", "alpha"]
        t = Table(cols)
        for j in range(self.ticks.size):
            row = [int(self.rounds[j]), int(self.ticks[j]), float(self.global_loss[j])]
            if self.accuracy is not None:
                row.append(float(self.accuracy[j]))
            row += [float(self.energy_to_date[j]), float(self.alpha_used[j])]
            t.append(*row)
        return t

    def to_csv(self, path) -> None:
        emit_csv(self.table(), path)


def synchronize(local, delayed_global, grad_step, alpha_k: float, eta: float = 1.0) -> np.ndarray:
    """``alpha * w(t - delay) + (1 - alpha) * (w_i(t-1) - eta * g)``.

    ``grad_step`` is the gradient ``g``; pass ``eta`` to scale it (default 1,
    i.e. ``grad_step`` already holds ``eta * g``).
    """
    if not (0.0 < alpha_k <= 1.0) or not math.isfinite(alpha_k):
        raise ValueError(f"combiner weight must lie in (0, 1], got {alpha_k}")
    local = np.asarray(local, dtype=float)
    stepped = local - eta * np.asarray(grad_step, dtype=float)
    if alpha_k == 1.0:
        return np.array(delayed_global, dtype=float)
    return alpha_k * np.asarray(delayed_global, dtype=float) + (1.0 - alpha_k) * stepped


def aggregate(locals_, rhos) -> np.ndarray:
    """Weighted average ``sum_i rho_i w_i``."""
    W = np.asarray(locals_, dtype=float)
    rho = np.asarray(rhos, dtype=float).reshape(-1)
    if W.ndim == 1:
        W = W[:, None]
    if W.shape[0] != rho.size:
        raise ValueError(f"{W.shape[0]} models but {rho.size} weights")
    if rho.size == 0 or abs(rho.sum() - 1.0) > 1e-9 or np.any(rho < 0):
        raise ValueError("aggregation weights must be nonnegative and sum to 1")
    out = rho @ W
    return out if np.ndim(locals_[0]) else out.reshape(())


def select_best(candidates, eval_data: Sequence[Dataset], kind: str = "logistic",
                l2: float = 0.0) -> tuple[np.ndarray, float]:
    """Candidate with the smallest global loss; ties go to the earliest."""
    idx, losses = _best(candidates, eval_data, kind, l2)
    return np.array(candidates[idx]), float(losses[idx])


def _best(candidates, eval_data, kind, l2):
    if len(candidates) == 0:
        raise ValueError("candidate set is empty")
    if isinstance(eval_data, Dataset):
        eval_data = [eval_data]
    losses = np.array([weighted_loss(w, eval_data, kind, l2) for w in candidates])
    return int(np.argmin(losses)), losses


def run_training(cfg: SimConfig) -> SimTrace:
    n, alpha = cfg.validate()
    hp = cfg.hp
    K, tau, D = hp.rounds, hp.tau, hp.delay
    up, down = (D + 1) // 2, D // 2
    data = list(cfg.datasets)
    I, m = len(data), data[0].dim
    sizes = np.array([d.size for d in data], dtype=float)
    rho = sizes / sizes.sum()
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(I)]

    w0 = np.zeros(m) if cfg.w0 is None else np.asarray(cfg.w0, dtype=float).reshape(-1).copy()
    W = np.tile(w0, (I, 1))
    uplink: deque = deque()
    downlink: deque = deque()
    arrived: dict[int, np.ndarray] = {}
    candidates: list[np.ndarray] = []
    # the shared initial model counts as round 0's upload; it costs no radio energy
    uplink.append((-D + up, 0, W.copy()))

    step_energy = tx_energy = None
    if cfg.devices is not None:
        bits = (cfg.weights or CostWeights()).model_bits
        step_energy = np.array([[energy_compute(dv, 1, n[k, i]) for i, dv in enumerate(cfg.devices)]
                                for k in range(K)])
        tx_energy = np.array([energy_transmit(dv, bits) for dv in cfg.devices])

    acc_data = cfg.eval_data
    if acc_data is None and cfg.kind == "logistic":
        acc_data = Dataset(np.vstack([d.features for d in data]), np.concatenate([d.labels for d in data]))

    ticks = np.arange(-D + 1, K * tau - D + 1)
    T = ticks.size
    g_models = np.empty((T, m))
    g_loss = np.empty(T)
    acc = np.empty(T) if acc_data is not None else None
    energy = np.zeros(T)
    alpha_used = np.empty(T)
    period = np.empty(T, dtype=int)
    local_hist = np.empty((T, I, m)) if cfg.record_locals else None
    round_end: list[np.ndarray] = []
    ref_end: list[np.ndarray] | None = [] if cfg.record_centralized_reference else None
    ref = w0.copy()
    spent = 0.0

    def serve(t):
        while uplink and uplink[0][0] <= t:
            _, r, payload = uplink.popleft()
            g = rho @ payload
            if r >= 1:
                candidates.append(g)
            downlink.append((t + down, r, g))
        while downlink and downlink[0][0] <= t:
            _, r, g = downlink.popleft()
            arrived[r] = g

    for j, t in enumerate(ticks):
        k = (t + D - 1) // tau
        serve(t)
        pre = np.empty_like(W)
        for i in range(I):
            g, _ = minibatch_gradient(W[i], data[i], n[k, i], rngs[i], cfg.kind, cfg.l2)
            pre[i] = W[i] - hp.eta * g
        ks = t // tau
        if t % tau == 0 and 0 <= ks < K and t > -D:
            if D == 0:
                delayed = rho @ pre
            else:
                if ks not in arrived:
                    raise RuntimeError(f"round {ks} average has not reached the devices at t={t}")
                delayed = arrived.pop(ks)
            a = float(alpha[ks])
            W = np.tile(delayed, (I, 1)) if a == 1.0 else a * delayed[None, :] + (1.0 - a) * pre
        else:
            W = pre
        if step_energy is not None:
            spent += float(step_energy[k].sum())
        if (t + D) % tau == 0:
            r = (t + D) // tau
            uplink.append((t + up, r, W.copy()))
            if tx_energy is not None:
                spent += float(tx_energy.sum())
        serve(t)

        glob = rho @ W
        if ref_end is not None:
            ref = ref - hp.eta * weighted_gradient(ref, data, cfg.kind, cfg.l2)
        if (t + D) % tau == 0:
            round_end.append(glob.copy())
            if ref_end is not None:
                ref_end.append(ref.copy())
                ref = glob.copy()
        g_models[j] = glob
        g_loss[j] = weighted_loss(glob, data, cfg.kind, cfg.l2)
        if acc is not None:
            acc[j] = accuracy(glob, acc_data)
        energy[j] = spent
        alpha_used[j] = alpha[k]
        period[j] = k
        if local_hist is not None:
            local_hist[j] = W

    # the last upload is still in flight when the devices stop; deliver it
    serve(ticks[-1] + up)
    if len(candidates) != K:
        raise RuntimeError(f"expected {K} server averages, got {len(candidates)}")
    best, losses = _best(candidates, data, cfg.kind, cfg.l2)

    r_energy = r_time = None
    if cfg.devices is not None:
        bits = (cfg.weights or CostWeights()).model_bits
        r_energy = step_energy * tau + tx_energy[None, :]
        r_time = np.array([sum(round_times(cfg.devices, tau, n[k], bits)) for k in range(K)])

    return SimTrace(
        ticks=ticks, rounds=period, global_models=g_models, global_loss=g_loss, accuracy=acc,
        energy_to_date=energy, alpha_used=alpha_used, candidates=candidates,
        candidate_losses=losses, selected=candidates[best].copy(), selected_loss=float(losses[best]),
        selected_round=best, global_at_round_end=round_end, reference_end=ref_end,
        round_energy=r_energy, round_time=r_time, local_models=local_hist,
        meta={"seed": cfg.seed, "uplink_ticks": up, "downlink_ticks": down},
    )
