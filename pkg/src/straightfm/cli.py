"""Command-line entry point: ``straightfm <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import numcore as nc
from .config import ConfigError, RunConfig, sidecar
from .diffusion import (DiffusionConfig, NoiseSchedule, generate_coupling_revs, score_model_from_arrays,
                        train_diffusion)
from .evalmetrics import MetricReport, straightness, transport_cost, wasserstein2_blocked
from .flowmatch import TrainConfig, VARIANTS, train_straightfm, velocity_from_arrays
from .odesolve import solve, write_trajectory_csv
from .synthdata import DATASETS, DatasetSpec, Rng, sample_data, sample_prior, write_points_csv

log = logging.getLogger("straightfm")

METRICS = ("straightness", "w2", "cost")


class UsageError(Exception):
    """Bad arguments discovered after parsing; reported with exit status 2."""


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _base_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    cfg.override({("run", "seed"): args.seed})
    return cfg


def _schedule(cfg: RunConfig) -> NoiseSchedule:
    return NoiseSchedule(cfg.get("schedule", "beta_min"), cfg.get("schedule", "beta_max"), cfg.get("schedule", "t_min"))


def _dataset(cfg: RunConfig) -> DatasetSpec:
    if not cfg.is_set("data", "dataset"):
        raise UsageError("--dataset is required (or set [data] dataset in --config)")
    return DatasetSpec(cfg.get("data", "dataset"), cfg.get("data", "scale"), cfg.get("data", "noise_std"))


def _prepare_output(path) -> Path:
    path = Path(path)
    if not path.parent.exists():
        raise OSError(f"output directory {path.parent} does not exist")
    with open(path, "ab"):
        pass
    return path


def _write_log(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def cmd_train_diffusion(args) -> int:
    cfg = _base_config(args)
    cfg.override({
        ("data", "dataset"): args.dataset,
        ("diffusion", "iters"): args.iters,
        ("diffusion", "batch"): args.batch,
        ("diffusion", "lr"): args.lr,
    })
    spec = _dataset(cfg)
    out = _prepare_output(args.out)
    config = DiffusionConfig(cfg.get("diffusion", "iters"), cfg.get("diffusion", "batch"), cfg.get("diffusion", "lr"),
                             cfg.seed(), cfg.get("diffusion", "hidden"))
    result = train_diffusion(spec, _schedule(cfg), config)
    nc.save_weights(out, result.model.params.arrays())
    rows = [(i + 1, v) for i, v in enumerate(result.losses)]
    _write_log(sidecar(out, ".log.csv"), ["iter", "loss"], rows)
    cfg.write(sidecar(out, ".config.ini"))
    from .plotting import plot_training_log

    plot_training_log(sidecar(out, ".loss.svg"), [r[0] for r in rows], {"dsm": result.losses})
    if args.dump_couplings:
        schedule = _schedule(cfg)
        x0 = sample_prior(Rng(cfg.seed(), stream=11), args.dump_couplings, 2)
        x1 = generate_coupling_revs(result.model, schedule, x0, args.coupling_steps or 50)
        write_points_csv(sidecar(out, ".couplings.csv"), np.hstack([x0, x1]),
                         header=["x0_0", "x0_1", "x1_0", "x1_1"])
    print(f"wrote {out} (final 1000-iter mean DSM loss {np.mean(result.losses[-1000:]):.4f})")
    return 0


def cmd_train_fm(args) -> int:
    cfg = _base_config(args)
    cfg.override({
        ("data", "dataset"): args.dataset,
        ("fm", "variant"): args.variant,
        ("fm", "iters"): args.iters,
        ("fm", "batch"): args.batch,
        ("fm", "lr"): args.lr,
        ("fm", "lambda"): args.lam,
        ("fm", "mix"): args.mix,
        ("fm", "ema_decay"): args.ema_decay,
        ("fm", "coupling_steps"): args.coupling_steps,
        ("fm", "cache_size"): args.cache_size,
        ("fm", "on_the_fly"): True if args.on_the_fly else None,
        ("fm", "workers"): args.workers,
    })
    spec = _dataset(cfg)
    variant = cfg.get("fm", "variant")
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    if variant != "baseline" and not args.guide:
        raise UsageError(f"variant {variant} needs --guide weights from train-diffusion")
    out = _prepare_output(args.out)
    guide = score_model_from_arrays(nc.load_weights(args.guide)) if args.guide else None
    ema = cfg.get("fm", "ema_decay")
    config = TrainConfig(
        variant=variant,
        iterations=cfg.get("fm", "iters"),
        batch=cfg.get("fm", "batch"),
        lr=cfg.get("fm", "lr"),
        lam=cfg.get("fm", "lambda"),
        mix_ratio=cfg.get("fm", "mix"),
        ema_decay=ema if ema else None,
        seed=cfg.seed(),
        hidden=cfg.get("fm", "hidden"),
        encoder_hidden=cfg.get("fm", "encoder_hidden"),
        dropout=cfg.get("fm", "dropout"),
        coupling_steps=cfg.get("fm", "coupling_steps"),
        cache_size=cfg.get("fm", "cache_size"),
        on_the_fly=cfg.get("fm", "on_the_fly"),
        workers=cfg.get("fm", "workers"),
    )
    result = train_straightfm(guide, _schedule(cfg), spec, config)
    nc.save_weights(out, result.velocity.params.arrays())
    if result.encoder is not None:
        nc.save_weights(sidecar(out, ".encoder.sfmw"), result.encoder.params.arrays())
    _write_log(sidecar(out, ".log.csv"), ["iter", "total", "revs", "forw", "kl"], result.log)
    cfg.write(sidecar(out, ".config.ini"))
    from .plotting import plot_training_log

    cols = np.array(result.log)
    plot_training_log(sidecar(out, ".loss.svg"), cols[:, 0],
                      {name: cols[:, k] for k, name in enumerate(("total", "revs", "forw", "kl"), start=1)})
    print(f"wrote {out} (variant {variant}, {config.iterations} iterations)")
    return 0


def cmd_sample(args) -> int:
    cfg = _base_config(args)
    cfg.override({
        ("sample", "solver"): args.solver,
        ("sample", "steps"): args.steps,
        ("sample", "n"): args.n,
        ("sample", "rtol"): args.rtol,
        ("sample", "atol"): args.atol,
        ("sample", "trajectories"): True if args.trajectories else None,
    })
    solver, steps, n = cfg.get("sample", "solver"), cfg.get("sample", "steps"), cfg.get("sample", "n")
    if solver not in ("euler", "heun", "rk45"):
        raise UsageError(f"unknown solver {solver!r}; choose euler, heun or rk45")
    if solver != "rk45" and steps < 1:
        raise UsageError(f"--steps must be >= 1 for fixed-step solvers, got {steps}")
    if n < 1:
        raise UsageError("--n must be >= 1")
    out = _prepare_output(args.out)
    velocity = velocity_from_arrays(nc.load_weights(args.model))
    z = sample_prior(Rng(cfg.seed(), stream=10), n, velocity.dim)
    traj = solve(velocity, z, (0.0, 1.0), solver, steps, cfg.get("sample", "rtol"), cfg.get("sample", "atol"))
    write_points_csv(out, traj.terminal)
    meta = {"solver": solver, "steps": traj.accepted, "rejected": traj.rejected,
            "evaluations": traj.evaluations, "n": n, "seed": cfg.seed()}
    if solver == "rk45":
        meta["requested_steps_ignored"] = True
    if cfg.get("sample", "trajectories"):
        write_trajectory_csv(sidecar(out, ".traj.csv"), traj)
    Path(sidecar(out, ".meta.json")).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    cfg.write(sidecar(out, ".config.ini"))
    from .plotting import plot_samples

    plot_samples(sidecar(out, ".svg"), traj.terminal,
                 traj.states if cfg.get("sample", "trajectories") else None,
                 title=f"{solver}, {traj.accepted} steps")
    print(f"wrote {n} samples to {out} ({solver}, {traj.accepted} steps)")
    return 0


def evaluate(velocity, spec: DatasetSpec, metrics, steps_list, n: int, seed: int) -> MetricReport:
    report = MetricReport(seed)
    z = sample_prior(Rng(seed, stream=20), n, velocity.dim)
    data = sample_data(Rng(seed, stream=21), spec, n)
    for steps in steps_list:
        traj = solve(velocity, z, (0.0, 1.0), "euler", steps)
        for metric in metrics:
            if metric == "straightness":
                value = straightness(traj)
            elif metric == "w2":
                value = wasserstein2_blocked(traj.terminal, data)
            else:
                value = transport_cost(z, traj.terminal)
            report.add(metric, steps, value, n)
    return report


def cmd_eval(args) -> int:
    cfg = _base_config(args)
    cfg.override({("data", "dataset"): args.dataset, ("eval", "metrics"): args.metrics,
                  ("eval", "steps_list"): args.steps_list, ("eval", "n"): args.n})
    metrics = cfg.get("eval", "metrics")
    if not metrics:
        raise UsageError(f"--metrics is empty; choose from {', '.join(METRICS)}")
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise UsageError(f"unknown metric(s) {', '.join(unknown)}; valid names: {', '.join(METRICS)}")
    steps_list = cfg.get("eval", "steps_list")
    if not steps_list or min(steps_list) < 1:
        raise UsageError("--steps-list needs positive integers")
    spec = _dataset(cfg)
    out = _prepare_output(args.out)
    velocity = velocity_from_arrays(nc.load_weights(args.model))
    report = evaluate(velocity, spec, metrics, steps_list, cfg.get("eval", "n"), cfg.seed())
    report.write_csv(out)
    cfg.write(sidecar(out, ".config.ini"))
    from .plotting import plot_report

    plot_report(sidecar(out, ".svg"), report)
    for metric, steps, value, _ in report.rows:
        print(f"{metric:>12s}  N={steps:<4d} {value:.5f}")
    return 0


def cmd_repro(args) -> int:
    from .repro import run_experiment, write_checks_csv

    kw = {"iters": args.iters, "seed": args.seed if args.seed is not None else RunConfig().seed()}
    checks = run_experiment(args.name, **kw)
    for c in checks:
        print(c.line())
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_checks_csv(out_dir / f"{args.name}.csv", checks)
        _repro_figures(args.name, kw, out_dir)
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} passed")
    return 1 if failed else 0


def _repro_figures(name, kw, out_dir: Path) -> None:
    from . import repro
    from .odesolve import euler
    from .plotting import plot_samples

    if name not in ("all", "straightness-ordering", "few-step-quality", "coupling-similarity", "transport-cost"):
        return
    run = repro.run_pipeline(kw["iters"], 256, kw["seed"])
    z = sample_prior(Rng(kw["seed"], stream=30), 512, 2)
    data = sample_data(Rng(kw["seed"], stream=31), run.spec, 2048)
    for label, res in (("baseline", run.baseline), ("straightfm2", run.straight)):
        for steps in (1, 3, 100):
            traj = euler(res.velocity, z, (0.0, 1.0), steps)
            plot_samples(out_dir / f"{label}_N{steps}.svg", traj.terminal, traj.states if steps == 100 else None,
                         reference=data, title=f"{label}, Euler N={steps}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="straightfm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="sectioned key=value file; flags override it")
        sp.add_argument("--seed", type=int, help="RNG seed (falls back to $SFM_SEED, then 0)")

    sp = sub.add_parser("train-diffusion", help="train the VP diffusion guide")
    common(sp)
    sp.add_argument("--dataset", choices=DATASETS)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--dump-couplings", type=int, metavar="N", help="also write N PF-ODE noise/data pairs as CSV")
    sp.add_argument("--coupling-steps", type=int, help="Heun steps for the dumped couplings (default 50)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_diffusion)

    sp = sub.add_parser("train-fm", help="train a flow-matching velocity field")
    common(sp)
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--guide", help="diffusion weights (required for I, II, III)")
    sp.add_argument("--dataset", choices=DATASETS)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--mix", type=float, help="fraction of forward-direction couplings per batch")
    sp.add_argument("--ema-decay", type=float, help="0 disables the moving average")
    sp.add_argument("--coupling-steps", type=int, help="Heun steps for PF-ODE couplings")
    sp.add_argument("--cache-size", type=int, help="number of pre-generated guided couplings")
    sp.add_argument("--on-the-fly", action="store_true", help="generate guided couplings every iteration")
    sp.add_argument("--workers", type=int, help="threads for coupling pre-generation")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_fm)

    sp = sub.add_parser("sample", help="generate points from a trained velocity field")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--solver", choices=("euler", "heun", "rk45"))
    sp.add_argument("--steps", type=int)
    sp.add_argument("--n", type=int)
    sp.add_argument("--rtol", type=float)
    sp.add_argument("--atol", type=float)
    sp.add_argument("--trajectories", action="store_true", help="also write full paths")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("eval", help="straightness / W2 / transport cost across Euler step counts")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--dataset", choices=DATASETS)
    sp.add_argument("--metrics", help=f"comma-separated subset of {','.join(METRICS)}")
    sp.add_argument("--steps-list", type=_csv_ints)
    sp.add_argument("--n", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    from .repro import EXPERIMENTS

    sp = sub.add_parser("repro", help="run a named acceptance experiment")
    sp.add_argument("name", choices=("all", *EXPERIMENTS))
    sp.add_argument("--iters", type=int, default=20_000, help="training budget for the pipeline experiments")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out-dir", help="write the check table and figures here")
    sp.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.error(str(exc))  # exits with status 2
    except OSError as exc:
        print(f"straightfm: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, nc.NumericFault) as exc:
        print(f"straightfm: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
