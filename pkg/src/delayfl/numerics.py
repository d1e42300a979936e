"""Datasets, convex losses, gradients and data-dependent constants.

Two per-sample losses are supported:

* ``"logistic"``: ``log(1 + exp(w.x)) - y * w.x`` with labels in {0, 1}
* ``"ridge"``: ``0.5 * (w.x - y)**2``

Both accept an optional ``l2`` coefficient adding ``0.5 * l2 * ||w||^2`` to every
sample. Model vectors have the same dimension as the features; append a column of
ones to the features if an intercept is wanted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

LOSS_KINDS = ("logistic", "ridge")


@dataclass(frozen=True)
class Dataset:
    """Local dataset of one device: ``features`` is (N, m), ``labels`` is (N,)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=float).reshape(-1)
        if x.ndim != 2 or x.shape[1] < 1:
            raise ValueError(f"features must be a 2-D array with m >= 1 columns, got shape {x.shape}")
        if x.shape[0] < 1:
            raise ValueError("dataset must contain at least one datapoint")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx])


@dataclass(frozen=True)
class DataConstants:
    """Estimated data constants of one device.

    ``lipschitz`` and ``smoothness`` are network-wide and repeated on every device.
    All values are maxima over finite probe sets, i.e. lower bounds of the true
    suprema.
    """

    theta: float
    sample_stddev: float
    delta_i: float
    lipschitz: float
    smoothness: float


@dataclass(frozen=True)
class ConstantsEstimate:
    devices: tuple[DataConstants, ...]
    delta: float
    lipschitz: float
    smoothness: float
    probe_count: int
    # always True: these are maxima over probes, not certified suprema
    estimated: bool = True


def _check_kind(kind: str) -> None:
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


def _as_model(w, data: Dataset) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.shape[0] != data.dim:
        raise ValueError(f"model dimension {w.shape[0]} does not match feature dimension {data.dim}")
    return w


def per_sample_losses(w, data: Dataset, kind: str = "logistic", l2: float = 0.0) -> np.ndarray:
    _check_kind(kind)
    w = _as_model(w, data)
    z = data.features @ w
    if kind == "logistic":
        out = np.logaddexp(0.0, z) - data.labels * z
    else:
        out = 0.5 * (z - data.labels) ** 2
    if l2:
        out = out + 0.5 * l2 * float(w @ w)
    return out


def loss(w, data: Dataset, kind: str = "logistic", l2: float = 0.0) -> float:
    """Local loss F_i(w): mean of the per-sample losses."""
    return float(np.mean(per_sample_losses(w, data, kind, l2)))


def per_sample_gradients(w, data: Dataset, kind: str = "logistic", l2: float = 0.0) -> np.ndarray:
    """(N, m) array whose rows are the gradients of the per-sample losses."""
    _check_kind(kind)
    w = _as_model(w, data)
    z = data.features @ w
    if kind == "logistic":
        resid = expit(z) - data.labels
    else:
        resid = z - data.labels
    grads = resid[:, None] * data.features
    if l2:
        grads = grads + l2 * w[None, :]
    return grads


def gradient(w, data: Dataset, kind: str = "logistic", l2: float = 0.0) -> np.ndarray:
    """Exact full-batch gradient of F_i at ``w``."""
    _check_kind(kind)
    w = _as_model(w, data)
    z = data.features @ w
    resid = expit(z) - data.labels if kind == "logistic" else z - data.labels
    g = data.features.T @ resid / data.size
    if l2:
        g = g + l2 * w
    return g


def minibatch_gradient(w, data: Dataset, batch_size: int, rng: np.random.Generator,
                       kind: str = "logistic", l2: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Unbiased minibatch gradient over a uniform sample drawn without replacement.

    Returns the gradient estimate and the sorted indices of the sampled points.
    """
    batch_size = int(batch_size)
    if not 1 <= batch_size <= data.size:
        raise ValueError(f"batch size {batch_size} outside [1, {data.size}]")
    if batch_size == data.size:
        idx = np.arange(data.size)
    else:
        idx = np.sort(rng.choice(data.size, size=batch_size, replace=False))
    return gradient(w, data.subset(idx), kind, l2), idx


def weighted_gradient(w, datasets: Sequence[Dataset], kind: str = "logistic", l2: float = 0.0) -> np.ndarray:
    """Gradient of the global loss F = sum_i rho_i F_i with rho_i proportional to N_i."""
    sizes = np.array([d.size for d in datasets], dtype=float)
    rho = sizes / sizes.sum()
    return sum(r * gradient(w, d, kind, l2) for r, d in zip(rho, datasets))


def weighted_loss(w, datasets: Sequence[Dataset], kind: str = "logistic", l2: float = 0.0) -> float:
    sizes = np.array([d.size for d in datasets], dtype=float)
    rho = sizes / sizes.sum()
    return float(sum(r * loss(w, d, kind, l2) for r, d in zip(rho, datasets)))


def accuracy(w, data: Dataset) -> float:
    """Fraction of points whose 0.5-thresholded logistic prediction matches the label."""
    w = _as_model(w, data)
    pred = (data.features @ w > 0.0).astype(float)
    return float(np.mean(pred == data.labels))


def generate_synthetic(seed: int, devices: int, per_device_size: int, dim: int,
                       heterogeneity: float = 0.0, kind: str = "logistic",
                       noise: float | None = None) -> list[Dataset]:
    """Gaussian two-class data split over ``devices`` devices.

    Every device draws labels uniformly from {0, 1} and features around the class
    mean ``+/- u`` (``u`` a random unit vector) with isotropic noise of
    per-coordinate standard deviation ``noise`` (default ``1/sqrt(dim)``, i.e.
    total variance 1). Each device's class means are additionally displaced by
    ``2 * heterogeneity`` along device- and class-specific random unit
    directions, so ``heterogeneity = 0`` gives identically distributed devices.

    For ``kind="ridge"`` the labels are replaced by ``x . w_true + noise``.
    """
    if min(devices, per_device_size, dim) < 1:
        raise ValueError("devices, per_device_size and dim must all be >= 1")
    if not 0.0 <= heterogeneity <= 1.0:
        raise ValueError("heterogeneity must lie in [0, 1]")
    _check_kind(kind)
    rng = np.random.default_rng(seed)

    def unit(size):
        v = rng.standard_normal(size)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    direction = unit(dim)
    class_means = np.stack([-direction, direction])
    shifts = 2.0 * heterogeneity * unit((devices, 2, dim))
    w_true = rng.standard_normal(dim) / np.sqrt(dim)
    if noise is None:
        noise = 1.0 / np.sqrt(dim)
    elif noise < 0:
        raise ValueError("noise must be nonnegative")

    out = []
    for i in range(devices):
        y = rng.integers(0, 2, size=per_device_size)
        x = class_means[y] + shifts[i, y] + noise * rng.standard_normal((per_device_size, dim))
        if kind == "ridge":
            labels = x @ w_true + 0.1 * rng.standard_normal(per_device_size)
        else:
            labels = y.astype(float)
        out.append(Dataset(x, labels))
    return out


def sample_stddev(data: Dataset) -> float:
    """Root of the trace of the (N-1)-normalised feature covariance."""
    if data.size < 2:
        raise ValueError("sample variance needs at least two datapoints")
    centred = data.features - data.features.mean(axis=0)
    return float(np.sqrt(np.sum(centred**2) / (data.size - 1)))


def _pairs(n: int, max_pairs: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.triu_indices(n, k=1)
    if a.size > max_pairs:
        pick = rng.choice(a.size, size=max_pairs, replace=False)
        a, b = a[pick], b[pick]
    return a, b


def data_variability(data: Dataset, probes: Sequence[np.ndarray], kind: str = "logistic",
                     l2: float = 0.0, max_pairs: int | None = None,
                     rng: np.random.Generator | None = None) -> float:
    """Largest ratio ||grad f(x1) - grad f(x2)|| / ||x1 - x2|| over point pairs and probes.

    All pairs are used unless ``max_pairs`` is given, in which case a random subset
    of that many pairs is drawn with ``rng``. Pairs of coincident points are skipped.
    """
    n = data.size
    if max_pairs is None:
        a, b = np.triu_indices(n, k=1)
    else:
        a, b = _pairs(n, max_pairs, rng if rng is not None else np.random.default_rng(0))
    dx = np.linalg.norm(data.features[a] - data.features[b], axis=1)
    keep = dx > 0
    a, b, dx = a[keep], b[keep], dx[keep]
    if a.size == 0:
        return 0.0
    best = 0.0
    for w in probes:
        g = per_sample_gradients(w, data, kind, l2)
        ratio = np.linalg.norm(g[a] - g[b], axis=1) / dx
        best = max(best, float(ratio.max()))
    return best


def estimate_constants(datasets: Sequence[Dataset], kind: str = "logistic", probe_count: int = 16,
                       seed: int = 0, probe_scale: float = 1.0, max_pairs: int = 512,
                       l2: float = 0.0) -> ConstantsEstimate:
    """Estimate the variability, dissimilarity, Lipschitz and smoothness constants.

    Probe weights are ``w = 0`` plus ``probe_count - 1`` Gaussian draws with
    standard deviation ``probe_scale / sqrt(m)`` per coordinate.

    * ``theta_i``: max of the per-sample gradient-difference ratio (see
      :func:`data_variability`) over probes and up to ``max_pairs`` point pairs
    * ``S_i``: root-trace of the feature sample covariance
    * ``delta_i``: max over probes of ``||grad F_i - grad F||``
    * ``L``: max over probes and devices of ``||grad F_i||``
    * ``beta``: max over probe pairs and devices of the gradient-difference ratio

    Since ``L`` bounds every ``||grad F_j||`` on the same probes,
    ``delta_i <= 2 L`` holds by the triangle inequality.
    """
    _check_kind(kind)
    if probe_count < 2:
        raise ValueError("probe_count must be at least 2")
    if not datasets:
        raise ValueError("need at least one dataset")
    for i, d in enumerate(datasets):
        if d.size < 2:
            raise ValueError(f"device {i} has {d.size} datapoint(s); sample variance needs N_i >= 2")
    dim = datasets[0].dim
    rng = np.random.default_rng(seed)
    probes = [np.zeros(dim)] + [probe_scale / np.sqrt(dim) * rng.standard_normal(dim)
                                for _ in range(probe_count - 1)]
    sizes = np.array([d.size for d in datasets], dtype=float)
    rho = sizes / sizes.sum()

    # grads[p, i] = grad F_i(probe p)
    grads = np.array([[gradient(w, d, kind, l2) for d in datasets] for w in probes])
    global_grads = np.einsum("i,pim->pm", rho, grads)
    lipschitz = float(np.linalg.norm(grads, axis=2).max())
    delta_i = np.linalg.norm(grads - global_grads[:, None, :], axis=2).max(axis=0)

    W = np.array(probes)
    pa, pb = np.triu_indices(len(probes), k=1)
    dw = np.linalg.norm(W[pa] - W[pb], axis=1)
    dg = np.linalg.norm(grads[pa] - grads[pb], axis=2)
    smoothness = float((dg / dw[:, None]).max())

    per_device = []
    for i, d in enumerate(datasets):
        theta = data_variability(d, probes, kind, l2, max_pairs=max_pairs, rng=rng)
        per_device.append(DataConstants(theta=theta, sample_stddev=sample_stddev(d),
                                        delta_i=float(delta_i[i]), lipschitz=lipschitz,
                                        smoothness=smoothness))
    return ConstantsEstimate(devices=tuple(per_device), delta=float(rho @ delta_i),
                             lipschitz=lipschitz, smoothness=smoothness, probe_count=probe_count)
