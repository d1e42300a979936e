"""Command-line entry point ``delayfl``.

Exit codes: 0 success, 1 invalid input or configuration, 2 solver failure
(infeasible instance or condensation loop not converged).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .alpha_opt import alpha_closed_form, alpha_numeric, build_schedule
from .bounds import PreconditionError, loss_gap, psi_term, sigma_schedule
from .cost_model import network_snapshot
from .experiments import (KINDS, ConfigError, ExperimentConfig, accuracy_data, config_hash, load_config,
                          run_experiment, sample_profiles, trial_seed, write_outputs)
from .gp.barrier import GpInfeasibleError
from .gp.solver import diagnostics_writer, solve_sp
from .io import Table, emit_csv, read_csv
from .simulator import SimConfig, run_training

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 1, 2


class _SolverFailure(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    # usage mistakes are invalid input; 2 is reserved for the solver
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = _replace(cfg, seed=args.seed)
    if getattr(args, "trials", None) is not None:
        cfg = _replace(cfg, trials=args.trials)
    return cfg


def _replace(cfg, **kw):
    import dataclasses
    return dataclasses.replace(cfg, **kw)


def _outdir(args, cfg) -> Path:
    out = Path(args.output) if getattr(args, "output", None) else cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, name: str, cfg, extra: dict) -> None:
    manifest = {"command": name, "config_sha256": config_hash(cfg), "seed": cfg.seed,
                "version": __version__, **extra}
    (out / f"{name}_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _solve(cfg, args, devices, diag=None):
    mode = args.alpha_mode or cfg.alpha_mode
    fixed = args.fixed_alpha if mode == "fixed" else None
    return solve_sp(cfg.hp, devices, cfg.weights, alpha_mode=mode, fixed_alpha=fixed, diagnostics=diag)


def cmd_optimize(args) -> int:
    cfg = _config(args)
    devices = sample_profiles(cfg, trial_seed(cfg, args.trial))
    out = _outdir(args, cfg)
    stream = open(args.diagnostics, "w") if args.diagnostics else None
    try:
        n, alpha, rep = _solve(cfg, args, devices, diagnostics_writer(stream) if stream else None)
    finally:
        if stream:
            stream.close()
    t = Table(["round", "device", "minibatch", "continuous", "alpha"])
    nn = np.asarray(n)
    for k in range(nn.shape[0]):
        for i in range(nn.shape[1]):
            t.append(k + 1, i + 1, int(nn[k, i]), float(rep.continuous_batches[k, i]), float(alpha.alpha[k]))
    emit_csv(t, out / "optimize_schedule.csv")
    _write_manifest(out, "optimize", cfg, {"trial": args.trial})
    print(json.dumps(rep.summary(), sort_keys=True))
    if not rep.converged:
        raise _SolverFailure("condensation loop did not converge")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    seed = trial_seed(cfg, args.trial)
    devices = sample_profiles(cfg, seed)
    train, test, source = accuracy_data(cfg, seed)
    K, I = cfg.hp.rounds, cfg.network.devices
    if args.schedule == "optimized":
        n, alpha, _ = _solve(cfg, args, devices)
        n = np.asarray(n)
        alpha = alpha.alpha
    else:
        sizes = np.array([d.size for d in train])
        n = np.tile(sizes if args.schedule == "full" else np.maximum(1, sizes // 2), (K, 1))
        mode = args.alpha_mode or cfg.alpha_mode
        sig = sigma_schedule(n, network_snapshot(devices))
        alpha = build_schedule(sig, cfg.hp, mode=mode, alpha=args.fixed_alpha).alpha
    trace = run_training(SimConfig(cfg.hp, train, n, alpha, seed=seed, devices=devices,
                                   weights=cfg.weights, eval_data=test, l2=cfg.accuracy.l2))
    out = _outdir(args, cfg)
    trace.to_csv(out / "simulate_trace.csv")
    _write_manifest(out, "simulate", cfg, {"trial": args.trial, "dataset": source, "schedule": args.schedule})
    print(json.dumps({"selected_round": trace.selected_round + 1, "selected_loss": trace.selected_loss,
                      "final_accuracy": float(trace.accuracy[-1]), "energy": float(trace.energy_to_date[-1])},
                     sort_keys=True))
    return EXIT_OK


def cmd_bound(args) -> int:
    cfg = _config(args)
    devices = sample_profiles(cfg, trial_seed(cfg, args.trial))
    network = network_snapshot(devices)
    K, I = cfg.hp.rounds, cfg.network.devices
    if args.schedule:
        t = read_csv(args.schedule)
        n = np.ones((K, I))
        for r, d, v in zip(t.column("round"), t.column("device"), t.column("minibatch")):
            n[int(r) - 1, int(d) - 1] = float(v)
    else:
        n = np.full((K, I), float(args.batch))
    mode = args.alpha_mode or cfg.alpha_mode
    sig = sigma_schedule(n, network)
    alpha = build_schedule(sig, cfg.hp, mode=mode, alpha=args.fixed_alpha).alpha
    psi = [float(psi_term(j + 1, alpha[j], sig[j], cfg.hp)) for j in range(K)]
    total = float(sum(psi))
    print(json.dumps({"sigma": [float(s) for s in sig], "alpha": [float(a) for a in alpha], "psi": psi,
                      "psi_total": total, "loss_gap": loss_gap(total, cfg.hp)}, sort_keys=True))
    return EXIT_OK


def cmd_alpha(args) -> int:
    cfg = _config(args)
    if args.mode == "numeric":
        value = alpha_numeric(args.round, args.sigma, cfg.hp)
    else:
        value = alpha_closed_form(args.sigma, cfg.hp)
    print(format(value, ".17g"))
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _config(args)
    if args.kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {args.kind!r}")
    result = run_experiment(cfg, args.kind,
                            progress=lambda i: logging.getLogger("delayfl").info("trial %d done", i))
    manifest = write_outputs(result, cfg, _outdir(args, cfg), gnuplot=args.gnuplot)
    print(json.dumps({"kind": result.kind, "files": sorted(manifest["files"])}, sort_keys=True))
    return EXIT_OK


def cmd_validate(args) -> int:
    load_config(args.path)
    print(f"{args.path}: ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="delayfl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, output=True):
        sp.add_argument("--config", help="INI configuration file (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="override the configured base seed")
        if output:
            sp.add_argument("--output", help=f"output directory (else $DELAYFL_OUTPUT_DIR or the config)")

    def alpha_opts(sp):
        sp.add_argument("--alpha-mode", choices=["numeric", "closed_form", "fixed"])
        sp.add_argument("--fixed-alpha", type=float, default=1.0, help="weight for --alpha-mode fixed")

    sp = sub.add_parser("optimize", help="optimise minibatch sizes and combiner weights")
    common(sp)
    alpha_opts(sp)
    sp.add_argument("--trial", type=int, default=0, help="which randomised network to draw")
    sp.add_argument("--diagnostics", help="write per-iteration diagnostics as JSON lines")
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("simulate", help="run the delayed training protocol and write a trace")
    common(sp)
    alpha_opts(sp)
    sp.add_argument("--trial", type=int, default=0)
    sp.add_argument("--schedule", choices=["optimized", "full", "half"], default="optimized")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("bound", help="evaluate the divergence and loss-gap bounds of a schedule")
    common(sp, output=False)
    alpha_opts(sp)
    sp.add_argument("--trial", type=int, default=0)
    grp = sp.add_mutually_exclusive_group()
    grp.add_argument("--batch", type=float, default=1.0, help="uniform minibatch size")
    grp.add_argument("--schedule", help="CSV with round, device, minibatch columns")
    sp.set_defaults(func=cmd_bound)

    sp = sub.add_parser("alpha", help="combiner weight for one noise level")
    common(sp, output=False)
    sp.add_argument("--sigma", type=float, required=True)
    sp.add_argument("--round", type=int, default=1)
    sp.add_argument("--mode", choices=["numeric", "closed_form"], default="numeric")
    sp.set_defaults(func=cmd_alpha)

    sp = sub.add_parser("experiment", help="run a randomised experiment and write CSVs")
    sp.add_argument("kind", choices=KINDS)
    common(sp)
    sp.add_argument("--trials", type=int, help="override the configured trial count")
    sp.add_argument("--gnuplot", action="store_true", help="also write a gnuplot script")
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("validate-config", help="check a configuration file")
    sp.add_argument("path")
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (GpInfeasibleError, _SolverFailure) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ConfigError, PreconditionError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
