"""Command-line entry point: ``lmpcc <subcommand> [options]``.

Exit codes: 0 success, 2 scenario failure (collision, off-road, timeout),
3 solver or divergence failure.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import sys
from pathlib import Path

import click
import numpy as np

from .config import RunConfig, load_config
from .mpcc import ControllerVariant
from .sim import (compare_report, compute_metrics, generate_training_runs, load_logs, run_closed_loop,
                  speed_sweep, sweep_table)
from .stp import CHANNELS, build_training_set, fit, load_models, save_models

EXIT_OK, EXIT_SCENARIO, EXIT_SOLVER = 0, 2, 3
VARIANTS = [v.value for v in ControllerVariant]


def _config(path, variant=None, speed=None, seed=None, out=None, models=None) -> RunConfig:
    cfg = load_config(path) if path else RunConfig()
    if variant:
        cfg = cfg.with_variant(variant)
    if speed is not None:
        cfg = cfg.with_speed(speed)
    kw = {k: v for k, v in (("seed", seed), ("out", out), ("models", models)) if v is not None}
    return dataclasses.replace(cfg, **kw) if kw else cfg


def _models_for(cfg: RunConfig):
    if not cfg.variant.learning:
        return None
    if not cfg.models:
        raise click.UsageError("learning variants need --models or a `models` key in the config")
    return load_models(cfg.models)


def _exit_code(outcome: str) -> int:
    if outcome == "success":
        return EXIT_OK
    return EXIT_SOLVER if outcome == "divergence" else EXIT_SCENARIO


def write_traces(log, path) -> None:
    """Tidy per-tick traces (trajectory, speeds, inputs, g-g diagram) for plotting."""
    c = log.columns
    ax = np.gradient(c["v_x"], log.dt) - c["r"] * c["v_y"] if len(log) > 1 else np.zeros(len(log))
    ay = np.gradient(c["v_y"], log.dt) + c["r"] * c["v_x"] if len(log) > 1 else np.zeros(len(log))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "X", "Y", "v_x", "v_y", "r", "delta", "F_x", "a_x", "a_y"])
        for i in range(len(log)):
            w.writerow([repr(float(v)) for v in (c["t"][i], c["X"][i], c["Y"][i], c["v_x"][i], c["v_y"][i],
                                                 c["r"][i], c["delta"][i], c["F_x"][i], ax[i], ay[i])])


def write_metrics(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _metric_row(log, m) -> dict:
    return {"name": log.name, "variant": log.variant, "scenario": log.scenario, "outcome": m.outcome,
            "peak_sideslip": m.peak_sideslip, "peak_vy": m.peak_vy, "rms_fyf": m.rms_fyf, "rms_fyr": m.rms_fyr,
            "rms_r": m.rms_r, "min_clearance": m.min_clearance, "mean_vx": m.mean_vx}


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Learning-based contouring MPC experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


common = [
    click.option("--config", "config", type=click.Path(exists=True, dir_okay=False), help="Run config (TOML)."),
    click.option("--seed", type=int, help="Override the config seed."),
    click.option("--out", type=click.Path(file_okay=False), help="Output directory."),
]


def with_common(f):
    for opt in reversed(common):
        f = opt(f)
    return f


@main.command("generate-data")
@with_common
def generate_data(config, seed, out):
    """Run the baseline on the training and test manoeuvres."""
    cfg = _config(config, seed=seed, out=out)
    train, test = generate_training_runs(cfg, cfg.out)
    for lg in train + test:
        click.echo(f"{lg.name}: {lg.outcome} ({len(lg)} ticks)")


@main.command("train-stp")
@click.option("--config", "config", type=click.Path(exists=True, dir_okay=False), help="Run config (TOML).")
@click.option("--logs", "logs_dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="Directory of training logs.")
@click.option("--out", "out_file", type=click.Path(dir_okay=False), required=True,
              help="Model file; an existing file is updated channel by channel.")
@click.option("--channel", type=click.Choice(list(CHANNELS)), help="Fit one channel only (default: all).")
@click.option("--kind", type=click.Choice(["stp", "gp"]), default="stp", show_default=True)
@click.option("--restarts", type=int, default=3, show_default=True)
@click.option("--seed", type=int, help="Override the config seed.")
@click.option("--max-points", type=int, default=150, show_default=True, help="Training-set cap (farthest-point).")
def train_stp(config, logs_dir, out_file, channel, kind, restarts, seed, max_points):
    """Fit the mismatch processes and save them as JSON."""
    cfg = _config(config, seed=seed)
    logs = load_logs(logs_dir)
    if not logs:
        raise click.UsageError(f"no logs in {logs_dir}")
    ds = build_training_set(logs, max_points)
    floors = cfg.plant.noise_floors()
    channels = [channel] if channel else list(CHANNELS)
    out = Path(out_file)
    models = load_models(out) if out.exists() else {}
    if any(m.kind != kind for m in models.values()):
        raise click.UsageError(f"{out} holds models of another kind")
    for ch in channels:
        i = CHANNELS.index(ch)
        models[ch] = fit(ds, ch, kind=kind, seed=cfg.seed + i, restarts=restarts, noise_floor=floors.get(ch, 0.0))
        m = models[ch]
        click.echo(f"{ch}: nu={m.nu:.4g} n={m.n} converged={m.converged}")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_models(models, out)
    click.echo(str(out))


@main.command("run")
@with_common
@click.option("--variant", type=click.Choice(VARIANTS))
@click.option("--speed-kmh", type=float)
@click.option("--models", type=click.Path(exists=True, dir_okay=False))
def run(config, seed, out, variant, speed_kmh, models):
    """One closed-loop run; writes the log, traces and metrics."""
    cfg = _config(config, variant, speed_kmh, seed, out, models)
    log = run_closed_loop(cfg, _models_for(cfg))
    m = compute_metrics(log)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log.to_csv(out_dir / f"{log.name}.csv")
    write_traces(log, out_dir / f"{log.name}-traces.csv")
    write_metrics([_metric_row(log, m)], out_dir / f"{log.name}-metrics.csv")
    click.echo(f"{log.name}: {log.outcome} ({log.reason}); peak |beta|={m.peak_sideslip:.4f} rad")
    sys.exit(_exit_code(log.outcome))


@main.command("sweep")
@with_common
@click.option("--variant", "variants", type=click.Choice(VARIANTS), multiple=True)
@click.option("--speeds", default="55,57.5,60,62.5,65,67.5,70,72.5,75", show_default=True)
@click.option("--models", "model_paths", multiple=True,
              help="variant=path pairs, e.g. lmpcc-stp=models-stp.json")
def sweep(config, seed, out, variants, speeds, model_paths):
    """Speed sweep per variant; prints the comparison table."""
    cfg = _config(config, seed=seed, out=out)
    paths = dict(p.split("=", 1) for p in model_paths)
    variants = variants or ("mpcc",)
    speeds = [float(v) for v in speeds.split(",")]
    results = []
    rows = []
    for var in variants:
        models = load_models(paths[var]) if var != "mpcc" else None
        logs = []
        res = speed_sweep(cfg, var, speeds, models, logs)
        results.append(res)
        rows += [_metric_row(lg, compute_metrics(lg)) for lg in logs]
    table = sweep_table(results)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out) / "sweep.md").write_text(table + "\n")
    write_metrics(rows, Path(cfg.out) / "sweep-metrics.csv")
    click.echo(table)
    if all(r.max_speed is None for r in results):
        sys.exit(EXIT_SCENARIO)


@main.command("compare")
@with_common
@click.argument("logs", nargs=-1, type=click.Path(exists=True, dir_okay=False))
def compare(config, seed, out, logs):
    """Compare run logs of different variants on the same scenarios."""
    from .sim import RunLog

    groups: dict = {}
    for p in logs:
        lg = RunLog.from_csv(p)
        groups.setdefault(lg.variant, []).append(lg)
    if len(groups) < 2:
        raise click.UsageError("need logs from at least two variants")
    cfg = _config(config, seed=seed, out=out)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    try:
        text = compare_report(groups, Path(cfg.out) / "compare.md")
    except ValueError as exc:
        raise click.UsageError(str(exc))
    click.echo(text)


if __name__ == "__main__":
    main()
