"""Command-line harness: data export, training, evaluation, reports, replay.

Exit codes: 0 success, 1 configuration error, 2 runtime error. The
OLORA_THREADS environment variable caps how many seed runs execute in
parallel worker processes (default 1, purely sequential).
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import checkpoint as ckpt
from . import harness
from . import lora as lora_mod
from . import plateau
from . import streams
from . import vit
from .errors import ConfigError, OloraError

CONFIG_SECTIONS = {
    "experiment": ("method", "scenario", "penalty_mode", "out_dir"),
    "model": ("image_size", "patch_size", "channels", "embed_dim", "num_heads",
              "num_layers", "mlp_ratio"),
    "stream": ("classes", "per_class", "num_tasks", "batch_size",
               "disjoint_frac", "blurry_frac"),
    "train": ("rank", "lam", "lr", "head_lr", "adam_eps", "buffer_k", "eval_every"),
    "detector": ("mean_threshold", "var_threshold", "window_capacity"),
}


def load_config_file(path):
    """TOML experiment file -> (field dict, seeds list)."""
    with open(path, "rb") as f:
        data = tomllib.load(f)
    fields = {}
    seeds = data.get("experiment", {}).pop("seeds", None)
    for section, keys in CONFIG_SECTIONS.items():
        table = data.get(section, {})
        for key, value in table.items():
            if key not in keys:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            fields[key] = value
    return fields, seeds


def make_config(config_path, overrides, seed) -> harness.ExperimentConfig:
    fields = {}
    if config_path:
        fields, _ = load_config_file(config_path)
    fields.update({k: v for k, v in overrides.items() if v is not None})
    fields["seed"] = seed
    valid = {f.name for f in dataclasses.fields(harness.ExperimentConfig)}
    unknown = set(fields) - valid
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    config = harness.ExperimentConfig(**fields)
    config.validate()
    return config


def _run_one_seed(args):
    fields, seed, out_dir, data_dir = args
    config = harness.ExperimentConfig(**fields, seed=seed)
    config.validate()
    stream = streams.load_stream(data_dir) if data_dir else None
    result = harness.train(config, stream)
    run_dir = Path(out_dir) / f"seed{seed}"
    harness.save_run(result, run_dir)
    return str(run_dir), result.record.metrics_row()


@click.group()
def cli():
    """Online continual learning with incremental low-rank adapters."""


@cli.command("gen-data")
@click.option("--scenario", type=click.Choice(harness.SCENARIOS), default="disjoint")
@click.option("--classes", type=int, default=20, show_default=True)
@click.option("--per-class", type=int, default=200, show_default=True)
@click.option("--image-size", type=int, default=16, show_default=True)
@click.option("--tasks", type=int, default=5, show_default=True,
              help="Tasks (or domains for the domain scenario).")
@click.option("--batch-size", type=int, default=64, show_default=True)
@click.option("--disjoint-frac", type=float, default=0.5, show_default=True)
@click.option("--blurry-frac", type=float, default=0.1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def gen_data(scenario, classes, per_class, image_size, tasks, batch_size,
             disjoint_frac, blurry_frac, seed, out_dir):
    """Generate a synthetic stream and export it to a directory."""
    dataset = streams.gen_synthetic(classes, per_class, image_size, seed=seed)
    stream = streams.build_stream(scenario, dataset, tasks, batch_size,
                                  seed=seed + 1, disjoint_frac=disjoint_frac,
                                  blurry_frac=blurry_frac)
    streams.export_stream(stream, out_dir)
    click.echo(f"wrote {len(stream.batches)} batches, {stream.num_tasks} tasks -> {out_dir}")


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="TOML experiment file; flags override its values.")
@click.option("--method", type=click.Choice(harness.METHODS), default=None)
@click.option("--scenario", type=click.Choice(harness.SCENARIOS), default=None)
@click.option("--seed", "seeds", type=int, multiple=True,
              help="May be given multiple times; defaults to 0.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--data", "data_dir", type=click.Path(exists=True),
              help="Train from an exported stream instead of a live generator.")
@click.option("--penalty-mode", type=click.Choice(["deviation", "literal"]), default=None)
@click.option("--lr", type=float, default=None)
@click.option("--head-lr", type=float, default=None)
@click.option("--lam", type=float, default=None)
@click.option("--rank", type=int, default=None)
@click.option("--mean-threshold", type=float, default=None)
@click.option("--var-threshold", type=float, default=None)
@click.option("--window", "window_capacity", type=int, default=None)
@click.option("--buffer-k", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--classes", type=int, default=None)
@click.option("--per-class", type=int, default=None)
@click.option("--tasks", "num_tasks", type=int, default=None)
@click.option("--eval-every", type=int, default=None)
@click.option("--adam-eps", type=float, default=None)
@click.option("--image-size", type=int, default=None)
@click.option("--patch-size", type=int, default=None)
@click.option("--channels", type=int, default=None)
@click.option("--embed-dim", type=int, default=None)
@click.option("--num-heads", type=int, default=None)
@click.option("--num-layers", type=int, default=None)
@click.option("--mlp-ratio", type=float, default=None)
@click.option("--disjoint-frac", type=float, default=None)
@click.option("--blurry-frac", type=float, default=None)
def train_cmd(config_path, seeds, out_dir, data_dir, **overrides):
    """Run one training pass per seed; writes one run directory per seed."""
    fields = {}
    file_seeds = None
    if config_path:
        fields, file_seeds = load_config_file(config_path)
    fields.update({k: v for k, v in overrides.items() if v is not None})
    seeds = list(seeds) or (list(file_seeds) if file_seeds else [0])
    fields.pop("out_dir", None)
    # validate once before launching workers
    probe = dict(fields)
    probe["seed"] = seeds[0]
    valid = {f.name for f in dataclasses.fields(harness.ExperimentConfig)}
    unknown = set(probe) - valid
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    harness.ExperimentConfig(**probe).validate()

    jobs = [(fields, seed, out_dir, data_dir) for seed in seeds]
    workers = int(os.environ.get("OLORA_THREADS", "1"))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            outcomes = list(pool.map(_run_one_seed, jobs))
    else:
        outcomes = [_run_one_seed(job) for job in jobs]
    for run_dir, row in outcomes:
        click.echo(f"{run_dir}: {row}")


@cli.command("eval")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True),
              help="Run directory holding config.json and checkpoint.olra.")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True),
              help="Exported stream directory providing the eval sets.")
def eval_cmd(run_dir, data_dir):
    """Evaluate a saved checkpoint on held-out eval sets; prints CSV."""
    run = Path(run_dir)
    fields = json.loads((run / "config.json").read_text(encoding="utf-8"))
    config = harness.ExperimentConfig(**fields)
    tensors = ckpt.load(run / "checkpoint.olra")
    vcfg = config.vit_config()
    model = vit.model_from_tensors(vcfg, tensors)
    stack = lora_mod.stack_from_tensors(vcfg.num_layers, vcfg.embed_dim, tensors)
    stream = streams.load_stream(data_dir)
    accuracies = harness.evaluate(model, stack, stream.eval_sets)
    click.echo("task,accuracy")
    for task, acc in enumerate(accuracies):
        click.echo(f"{task},{acc!r}")
    click.echo(f"mean,{sum(accuracies) / len(accuracies)!r}")


@cli.command("report")
@click.argument("run_dirs", nargs=-1, required=True,
                type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path())
def report_cmd(run_dirs, out_dir):
    """Aggregate run directories into CSV summaries and SVG charts."""
    out = harness.report(run_dirs, out_dir)
    click.echo(f"report written to {out}")


@cli.command("replay-detector")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True),
              help="Loss trace CSV, one float per line.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--mean", "mean_threshold", type=float, required=True)
@click.option("--var", "var_threshold", type=float, required=True)
@click.option("--window", "capacity", type=int, default=plateau.DEFAULT_CAPACITY,
              show_default=True)
def replay_cmd(input_path, out_path, mean_threshold, var_threshold, capacity):
    """Re-run the plateau detector over a recorded loss trace."""
    losses = plateau.read_loss_csv(input_path)
    rows = plateau.replay(losses, capacity, mean_threshold, var_threshold)
    plateau.write_event_csv(out_path, rows)
    events = sum(1 for r in rows if r[4])
    click.echo(f"{len(rows)} losses, {events} events -> {out_path}")


def main():
    try:
        cli(standalone_mode=False)
    except click.exceptions.Exit as e:
        sys.exit(e.exit_code)
    except (click.UsageError, ConfigError) as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(1)
    except click.ClickException as e:
        e.show()
        sys.exit(1)
    except (OloraError, OSError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)
    sys.exit(0)


if __name__ == "__main__":
    main()
