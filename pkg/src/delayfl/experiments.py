"""Experiment configuration, randomised network sampling and the trial runners.

Configuration files are INI text (see ``write_config`` for every key and its
default). Each experiment kind writes a per-trial CSV, a summary CSV of means
and sample standard deviations, and a JSON manifest.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .alpha_opt import alpha_closed_form, alpha_numeric
from .bounds import HyperParams, noise_bound, psi_term
from .cost_model import CostWeights, DeviceProfile
from .gp.barrier import GpInfeasibleError
from .gp.solver import ALPHA_MODES, solve_sp
from .io import Table, emit_csv, read_idx
from .numerics import Dataset, accuracy, generate_synthetic
from .simulator import SimConfig, run_training

log = logging.getLogger(__name__)

KINDS = ("psi_vs_sigma", "minibatch_over_time", "minibatch_vs_c1", "objective_opt_vs_fixed",
         "alpha_vs_delta", "accuracy_run")
C1_GRID = tuple(float(v) for v in np.logspace(-6, 0, 13))
OUTPUT_ENV = "DELAYFL_OUTPUT_DIR"


class ConfigError(ValueError):
    """Invalid configuration file or value."""


@dataclass(frozen=True)
class NetworkRanges:
    devices: int = 5
    capacitance_min: float = 4e-12
    capacitance_max: float = 6.5e-12
    cycles_min: float = 600.0
    cycles_max: float = 640.0
    clock: float = 1e6
    tx_power: float = 0.1
    rate: float = 1e6
    battery: float = 7.5e6
    data_size: int = 25
    variability: float = 2.0
    stddev: float = 0.2


@dataclass(frozen=True)
class AccuracySetup:
    """Data for the learning-outcome run. Empty IDX paths select synthetic data."""

    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    classes: tuple = (0, 1)
    dim: int = 784
    test_size: int = 1000
    heterogeneity: float = 0.5
    # per-coordinate feature noise of the synthetic fallback; Phi(1/0.32) ~ 0.999
    # is roughly what logistic regression reaches on digits 0 vs 1
    noise: float = 0.32
    small_alpha: float = 0.01
    seeds: int = 5
    l2: float = 0.0

    @property
    def uses_idx(self) -> bool:
        return bool(self.train_images)


@dataclass(frozen=True)
class ExperimentConfig:
    hp: HyperParams = field(default_factory=HyperParams)
    network: NetworkRanges = field(default_factory=NetworkRanges)
    weights: CostWeights = field(default_factory=CostWeights)
    accuracy: AccuracySetup = field(default_factory=AccuracySetup)
    kind: str = "minibatch_over_time"
    trials: int = 20
    seed: int = 0
    output: str = "results"
    alpha_mode: str = "closed_form"

    def output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output)


# (section, key) -> (group attribute or None for top level, field name, parser)
def _int(s: str) -> int:
    v = float(s)
    if v != int(v):
        raise ValueError(f"{s!r} is not an integer")
    return int(v)


def _pair(s: str) -> tuple:
    parts = [p.strip() for p in s.split(",")]
    if len(parts) != 2:
        raise ValueError("expected two comma-separated integers")
    return tuple(_int(p) for p in parts)


_SCHEMA: dict[tuple[str, str], tuple] = {}
for _f, _t in [("eta", float), ("beta", float), ("lipschitz", float), ("delta", float), ("phi", float),
               ("tau", _int), ("delay", _int), ("rounds", _int)]:
    _SCHEMA[("training", _f)] = ("hp", _f, _t)
for _f in dataclasses.fields(NetworkRanges):
    _SCHEMA[("network", _f.name)] = ("network", _f.name, _int if _f.type == "int" else float)
for _f, _t in [("c1", float), ("c2", float), ("c3", float), ("model_bits", _int)]:
    _SCHEMA[("objective", _f)] = ("weights", _f, _t)
for _f in dataclasses.fields(AccuracySetup):
    _t = {"str": str, "int": _int, "float": float, "tuple": _pair}[_f.type]
    _SCHEMA[("accuracy", _f.name)] = ("accuracy", _f.name, _t)
for _f, _t in [("kind", str), ("trials", _int), ("seed", _int), ("output", str), ("alpha_mode", str)]:
    _SCHEMA[("experiment", _f)] = (None, _f, _t)


def _key_lines(text: str) -> dict:
    """Line number (1-based) of every ``key = value`` line, per section."""
    out, section = {}, None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            out[(section, None)] = no
        elif "=" in line:
            out[(section, line.split("=", 1)[0].strip().lower())] = no
    return out


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: parse error: {exc}") from None
    lines = _key_lines(text)
    groups: dict = {"hp": {}, "network": {}, "weights": {}, "accuracy": {}, None: {}}
    where: dict = {}
    for section in parser.sections():
        if not any(s == section for s, _ in _SCHEMA):
            raise ConfigError(f"{source}:{lines.get((section, None), '?')}: unknown section [{section}]")
        for key, value in parser.items(section):
            no = lines.get((section, key), "?")
            if (section, key) not in _SCHEMA:
                raise ConfigError(f"{source}:{no}: unknown key '{key}' in [{section}]")
            group, name, conv = _SCHEMA[(section, key)]
            try:
                groups[group][name] = conv(value.strip())
            except ValueError as exc:
                raise ConfigError(f"{source}:{no}: bad value for '{key}': {exc}") from None
            where[name] = no

    def build(cls, kwargs, default):
        try:
            return dataclasses.replace(default, **kwargs) if kwargs else default
        except ValueError as exc:
            raise ConfigError(f"{source}: {exc}{_line_hint(str(exc), where)}") from None

    try:
        hp = build(HyperParams, groups["hp"], HyperParams())
        cfg = ExperimentConfig(hp=hp, network=NetworkRanges(**groups["network"]),
                               weights=build(CostWeights, groups["weights"], CostWeights()),
                               accuracy=AccuracySetup(**groups["accuracy"]), **groups[None])
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    try:
        validate_config(cfg)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}{_line_hint(str(exc), where)}") from None
    return cfg


def _line_hint(msg: str, where: dict) -> str:
    # the key named first in the message is the one at fault
    hits = [(msg.find(name), no) for name, no in where.items() if name in msg]
    return f" (line {min(hits)[1]})" if hits else ""


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{path}: no such file")
    return parse_config(p.read_text(encoding="utf-8"), source=str(path))


def validate_config(cfg: ExperimentConfig) -> None:
    net, acc = cfg.network, cfg.accuracy
    if cfg.kind not in KINDS:
        raise ConfigError(f"kind must be one of {', '.join(KINDS)}; got {cfg.kind!r}")
    if cfg.alpha_mode not in ("numeric", "closed_form"):
        raise ConfigError(f"alpha_mode must be numeric or closed_form; got {cfg.alpha_mode!r}")
    if cfg.trials < 1:
        raise ConfigError("trials must be at least 1")
    if net.devices < 1:
        raise ConfigError("devices must be at least 1")
    for lo, hi in [("capacitance_min", "capacitance_max"), ("cycles_min", "cycles_max")]:
        a, b = getattr(net, lo), getattr(net, hi)
        if not 0 < a <= b:
            raise ConfigError(f"range {lo}..{hi} must satisfy 0 < {lo} <= {hi}; got [{a}, {b}]")
    for name in ("clock", "tx_power", "rate"):
        if getattr(net, name) <= 0:
            raise ConfigError(f"{name} must be positive")
    if net.battery < 0:
        raise ConfigError("battery must be nonnegative")
    if net.data_size < 2:
        raise ConfigError("data_size must be at least 2")
    if net.variability < 0 or net.stddev < 0:
        raise ConfigError("variability and stddev must be nonnegative")
    if not 0 < acc.small_alpha <= 1:
        raise ConfigError("small_alpha must lie in (0, 1]")
    if acc.seeds < 1 or acc.dim < 1 or acc.test_size < 1:
        raise ConfigError("seeds, dim and test_size must be at least 1")
    if acc.noise < 0:
        raise ConfigError("noise must be nonnegative")
    if not 0 <= acc.heterogeneity <= 1:
        raise ConfigError("heterogeneity must lie in [0, 1]")
    if acc.uses_idx and not (acc.train_labels and acc.test_images and acc.test_labels):
        raise ConfigError("IDX data needs train_images, train_labels, test_images and test_labels")


def config_text(cfg: ExperimentConfig) -> str:
    """Canonical INI text of ``cfg``; every key is written."""
    sections: dict[str, list] = {}
    for (section, key), (group, name, _) in _SCHEMA.items():
        obj = cfg if group is None else getattr(cfg, group)
        v = getattr(obj, name)
        if isinstance(v, tuple):
            text = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            text = repr(v)
        else:
            text = str(v)
        sections.setdefault(section, []).append(f"{key} = {text}")
    return "\n".join(f"[{s}]\n" + "\n".join(rows) + "\n" for s, rows in sections.items())


def write_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(config_text(cfg), encoding="utf-8")


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()


def trial_seed(cfg: ExperimentConfig, trial: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, trial]).generate_state(1)[0])


def sample_profiles(cfg: ExperimentConfig, seed: int) -> list[DeviceProfile]:
    """Uniform draws of capacitance and cycles per datum, each sorted ascending.

    Device 0 gets the smallest of both, i.e. it is the most energy-efficient.
    """
    net = cfg.network
    rng = np.random.default_rng(seed)
    gam = np.sort(rng.uniform(net.capacitance_min, net.capacitance_max, net.devices))
    cyc = np.sort(rng.uniform(net.cycles_min, net.cycles_max, net.devices))
    return [DeviceProfile(capacitance=float(g), cycles_per_datum=float(d), clock=net.clock,
                          tx_power=net.tx_power, rate=net.rate, battery=net.battery,
                          data_size=net.data_size, variability=net.variability, stddev=net.stddev)
            for g, d in zip(gam, cyc)]


def sample_network(cfg: ExperimentConfig, seed: int) -> tuple[list[DeviceProfile], list[Dataset]]:
    """Device profiles plus synthetic local datasets (``data_size`` points each)."""
    devices = sample_profiles(cfg, seed)
    data = generate_synthetic(seed, cfg.network.devices, cfg.network.data_size, cfg.accuracy.dim,
                              heterogeneity=cfg.accuracy.heterogeneity, noise=cfg.accuracy.noise)
    return devices, data


@dataclass
class ExperimentResult:
    kind: str
    tables: dict
    meta: dict = field(default_factory=dict)


def _summary(keys: list[str], rows: dict) -> Table:
    t = Table(keys + ["mean", "std", "count"])
    for key, vals in rows.items():
        v = np.array([x for x in vals if x is not None], dtype=float)
        mean = float(v.mean()) if v.size else None
        std = float(v.std(ddof=1)) if v.size > 1 else None
        t.append(*key, mean, std, int(v.size))
    return t


def _solve(cfg, devices, hp=None, weights=None, mode=None, fixed=None):
    return solve_sp(hp or cfg.hp, devices, weights or cfg.weights,
                    alpha_mode=mode or cfg.alpha_mode, fixed_alpha=fixed)


def _psi_vs_sigma(cfg, progress):
    hp, net = cfg.hp, cfg.network
    top = float(noise_bound(net.variability, net.stddev, net.data_size, 1))
    t = Table(["round", "sigma", "alpha_numeric", "psi_numeric", "alpha_closed_form",
               "psi_closed_form", "psi_alpha_one"])
    for k in range(1, hp.rounds + 1):
        for s in np.linspace(0.0, top, 21):
            s = float(s)
            an, ac = alpha_numeric(k, s, hp), alpha_closed_form(s, hp)
            t.append(k, s, an, float(psi_term(k, an, s, hp)), ac, float(psi_term(k, ac, s, hp)),
                     float(psi_term(k, 1.0, s, hp)))
    return {"trials": t, "summary": t}, {"deterministic": True}


def _minibatch_over_time(cfg, progress):
    t = Table(["trial", "round", "device", "minibatch", "continuous", "alpha", "status"])
    agg: dict = {}
    soft_failures = []
    for tr in range(cfg.trials):
        devices = sample_profiles(cfg, trial_seed(cfg, tr))
        try:
            n, a, rep = _solve(cfg, devices)
        except (GpInfeasibleError, ValueError) as exc:
            for k in range(cfg.hp.rounds):
                for i in range(cfg.network.devices):
                    t.append(tr, k + 1, i + 1, None, None, None, f"error: {exc}")
            continue
        nn = np.asarray(n)
        status = "ok" if rep.converged else "not converged"
        for k in range(nn.shape[0]):
            for i in range(nn.shape[1]):
                t.append(tr, k + 1, i + 1, int(nn[k, i]), float(rep.continuous_batches[k, i]),
                         float(a.alpha[k]), status)
                agg.setdefault((k + 1, i + 1), []).append(float(nn[k, i]))
        bad = [i + 1 for i in range(nn.shape[1]) if np.any(np.diff(nn[:, i]) < 0)]
        if bad:
            soft_failures.append({"trial": tr, "devices": bad})
            log.warning("trial %d: minibatch sequence decreases for device(s) %s", tr, bad)
        progress(tr)
    return {"trials": t, "summary": _summary(["round", "device"], agg)}, {"nondecreasing_failures": soft_failures}


def _minibatch_vs_c1(cfg, progress):
    t = Table(["trial", "c1", "mean_minibatch", "objective", "status"])
    agg: dict = {}
    for tr in range(cfg.trials):
        devices = sample_profiles(cfg, trial_seed(cfg, tr))
        for c1 in C1_GRID:
            w = dataclasses.replace(cfg.weights, c1=c1)
            try:
                n, _, rep = _solve(cfg, devices, weights=w)
            except (GpInfeasibleError, ValueError) as exc:
                t.append(tr, c1, None, None, f"error: {exc}")
                continue
            mean = float(np.asarray(n).mean())
            t.append(tr, c1, mean, rep.objective, "ok" if rep.converged else "not converged")
            agg.setdefault((c1,), []).append(mean)
        progress(tr)
    return {"trials": t, "summary": _summary(["c1"], agg)}, {"c1_grid": list(C1_GRID)}


OBJECTIVE_MODES = (("numeric", None), ("closed_form", None), ("fixed", 1.0), ("fixed", 0.5))


def _mode_label(mode, fixed):
    return mode if fixed is None else f"fixed_{fixed:g}"


def _objective_opt_vs_fixed(cfg, progress):
    t = Table(["trial", "mode", "objective", "energy", "time", "loss_gap", "mean_alpha", "status"])
    agg: dict = {}
    for tr in range(cfg.trials):
        devices = sample_profiles(cfg, trial_seed(cfg, tr))
        for mode, fixed in OBJECTIVE_MODES:
            label = _mode_label(mode, fixed)
            try:
                _, a, rep = _solve(cfg, devices, mode=mode, fixed=fixed)
            except (GpInfeasibleError, ValueError) as exc:
                t.append(tr, label, None, None, None, None, None, f"error: {exc}")
                continue
            t.append(tr, label, rep.objective, rep.energy, rep.time, rep.loss_gap,
                     float(a.alpha.mean()), "ok" if rep.converged else "not converged")
            agg.setdefault((label,), []).append(rep.objective)
        progress(tr)
    return {"trials": t, "summary": _summary(["mode"], agg)}, {}


def _alpha_vs_delta(cfg, progress):
    t = Table(["trial", "delay", "mean_alpha", "objective", "status"])
    agg: dict = {}
    for tr in range(cfg.trials):
        devices = sample_profiles(cfg, trial_seed(cfg, tr))
        for delay in range(cfg.hp.tau):
            hp = dataclasses.replace(cfg.hp, delay=delay)
            try:
                _, a, rep = _solve(cfg, devices, hp=hp)
            except (GpInfeasibleError, ValueError) as exc:
                t.append(tr, delay, None, None, f"error: {exc}")
                continue
            mean = float(a.alpha.mean())
            t.append(tr, delay, mean, rep.objective, "ok" if rep.converged else "not converged")
            agg.setdefault((delay,), []).append(mean)
        progress(tr)
    return {"trials": t, "summary": _summary(["delay"], agg)}, {}


def accuracy_data(cfg: ExperimentConfig, seed: int) -> tuple[list[Dataset], Dataset, str]:
    """Per-device training sets, a test set and the data source label."""
    acc, net = cfg.accuracy, cfg.network
    rng = np.random.default_rng(seed)
    if acc.uses_idx:
        train = read_idx(acc.train_images, acc.train_labels, acc.classes)
        test = read_idx(acc.test_images, acc.test_labels, acc.classes)
        need = net.devices * net.data_size
        if train.size < need:
            raise ConfigError(f"IDX training set has {train.size} samples, {need} needed")
        pick = rng.permutation(train.size)[:need].reshape(net.devices, net.data_size)
        return [train.subset(np.sort(p)) for p in pick], test, "idx"
    per_test = -(-acc.test_size // net.devices)
    full = generate_synthetic(seed, net.devices, net.data_size + per_test, acc.dim,
                              heterogeneity=acc.heterogeneity, noise=acc.noise)
    train = [d.subset(np.arange(net.data_size)) for d in full]
    tests = [d.subset(np.arange(net.data_size, d.size)) for d in full]
    test = Dataset(np.vstack([d.features for d in tests]), np.concatenate([d.labels for d in tests]))
    return train, test, "synthetic"


def _accuracy_run(cfg, progress):
    acc = cfg.accuracy
    per_round = Table(["seed", "setting", "round", "test_accuracy", "train_loss"])
    final = Table(["seed", "setting", "mean_alpha", "selected_round", "final_accuracy", "final_loss", "status"])
    agg: dict = {}
    source = None
    for s in range(acc.seeds):
        seed = trial_seed(cfg, s)
        train, test, source = accuracy_data(cfg, seed)
        devices = sample_profiles(cfg, seed)
        try:
            n, a_opt, _ = _solve(cfg, devices)
        except (GpInfeasibleError, ValueError) as exc:
            final.append(s, "optimized", None, None, None, None, f"error: {exc}")
            continue
        settings = [("small_alpha", np.full(cfg.hp.rounds, acc.small_alpha)),
                    ("alpha_one", np.ones(cfg.hp.rounds)),
                    ("optimized", a_opt.alpha)]
        for name, alpha in settings:
            tr = run_training(SimConfig(cfg.hp, train, n, alpha, seed=seed, l2=acc.l2, eval_data=test))
            for k, w in enumerate(tr.global_at_round_end):
                per_round.append(s, name, k + 1, accuracy(w, test), float(tr.candidate_losses[k]))
            fa = accuracy(tr.selected, test)
            final.append(s, name, float(np.mean(alpha)), tr.selected_round + 1, fa, tr.selected_loss, "ok")
            agg.setdefault((name,), []).append(fa)
        progress(s)
    return {"trials": per_round, "final": final, "summary": _summary(["setting"], agg)}, {"dataset": source}


_RUNNERS: dict[str, Callable] = {
    "psi_vs_sigma": _psi_vs_sigma,
    "minibatch_over_time": _minibatch_over_time,
    "minibatch_vs_c1": _minibatch_vs_c1,
    "objective_opt_vs_fixed": _objective_opt_vs_fixed,
    "alpha_vs_delta": _alpha_vs_delta,
    "accuracy_run": _accuracy_run,
}


def run_experiment(cfg: ExperimentConfig, kind: str | None = None,
                   progress: Callable[[int], None] | None = None) -> ExperimentResult:
    kind = kind or cfg.kind
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    tables, meta = _RUNNERS[kind](cfg, progress or (lambda _: None))
    return ExperimentResult(kind, tables, meta)


def write_outputs(result: ExperimentResult, cfg: ExperimentConfig, outdir=None,
                  gnuplot: bool = False) -> dict:
    """Write ``<kind>_<table>.csv`` files and ``<kind>_manifest.json``; return the manifest."""
    out = Path(outdir) if outdir is not None else cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, table in result.tables.items():
        path = out / f"{result.kind}_{name}.csv"
        emit_csv(table, path)
        files[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()
    if gnuplot:
        path = out / f"{result.kind}.gp"
        path.write_text(gnuplot_script(result.kind, f"{result.kind}_summary.csv"), encoding="utf-8")
        files[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()
    manifest = {
        "kind": result.kind,
        "config_sha256": config_hash(cfg),
        "seed": cfg.seed,
        "trials": cfg.trials,
        "version": __version__,
        "files": files,
        "meta": result.meta,
    }
    (out / f"{result.kind}_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                                      encoding="utf-8")
    return manifest


_PLOTS = {
    "psi_vs_sigma": ("sigma", "psi", "2:4"),
    "minibatch_over_time": ("round", "mean minibatch", "1:3"),
    "minibatch_vs_c1": ("c1", "mean minibatch", "1:2"),
    "objective_opt_vs_fixed": ("mode", "objective", "0:2:xtic(1)"),
    "alpha_vs_delta": ("delay", "mean alpha", "1:2"),
    "accuracy_run": ("setting", "final accuracy", "0:2:xtic(1)"),
}


def gnuplot_script(kind: str, csv_name: str) -> str:
    xlabel, ylabel, using = _PLOTS[kind]
    logx = "set logscale x\n" if kind == "minibatch_vs_c1" else ""
    return (f"set datafile separator ','\nset key autotitle columnhead\n{logx}"
            f"set xlabel '{xlabel}'\nset ylabel '{ylabel}'\n"
            f"set terminal pngcairo size 800,600\nset output '{kind}.png'\n"
            f"plot '{csv_name}' using {using} with linespoints\n")
