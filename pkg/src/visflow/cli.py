"""Command line mapping each experiment to a subcommand with file artifacts.

Every command is deterministic given its config and seeds: running one twice
writes byte-identical files. Errors surface as a one-line diagnostic on
stderr and a nonzero exit code.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import harness
from .checkpoint import load_checkpoint, save_checkpoint
from .cost import preset_cost, toy_model_cost
from .errors import VisflowError
from .model import build_model, train
from .perturb import KINDS, layer_sweep
from .prune import PruneSchedule, PruneStage, schedule_preset
from .saliency import dataset_flow_profile
from .tasks import gen_dataset, load_jsonl, save_jsonl

KIND_ALIASES = {"vt": "vt_block", "vv": "vv_block", "vrandom": "v_random_block"}


def _fail_cleanly(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (VisflowError, OSError, ValueError, json.JSONDecodeError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_json(path: str):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _resolve_schedule(value: str, n_layers: int | None = None) -> PruneSchedule:
    """A schedule argument is a preset name, or a path to a JSON stage file."""
    if Path(value).is_file():
        return harness.schedule_from_value(_load_json(value), n_layers=n_layers)
    return schedule_preset(value)


@click.group()
@click.version_option(package_name="visflow", prog_name="visflow")
def main():
    """Visual-information-flow experiments on a toy multimodal transformer."""


@main.command("gen-data")
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--count", required=True, type=click.IntRange(min=1))
@click.option("--out", "out_path", required=True, type=click.Path(file_okay=False))
@click.option("--split", type=click.IntRange(min=0), default=harness.TRAIN_SPLIT,
              show_default=True, help="Split seed; 0 is the training split, 1 the eval split.")
@_fail_cleanly
def gen_data(spec_path, count, out_path, split):
    """Write a synthetic dataset as JSON lines."""
    spec = harness.task_spec_from_dict(_load_json(spec_path))
    examples = gen_dataset(spec, count, split)
    out = _out_dir(out_path) / "dataset.jsonl"
    save_jsonl(examples, out)
    click.echo(f"wrote {len(examples)} examples to {out}")


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(file_okay=False))
@_fail_cleanly
def train_cmd(config_path, out_path):
    """Train from an experiment config; write checkpoint and loss curve."""
    config = harness.load_config(config_path)
    train_ds, eval_ds = harness.make_datasets(config)
    params = build_model(config.model)
    params, losses = train(params, train_ds, config.train)

    out = _out_dir(out_path)
    save_checkpoint(params, config.model, out / "checkpoint.bin")
    harness.write_loss_csv(out / "loss_curve.csv", losses)
    metrics = {
        "final_loss": losses[-1],
        "train_accuracy": harness.eval_accuracy(params, train_ds),
        "eval_accuracy": harness.eval_accuracy(params, eval_ds),
    }
    harness.write_json(out / "metrics.json", metrics)
    click.echo(
        f"trained {config.train.steps} steps; train accuracy "
        f"{metrics['train_accuracy']:.3f}, eval accuracy {metrics['eval_accuracy']:.3f}"
    )


@main.command("saliency")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(file_okay=False))
@_fail_cleanly
def saliency_cmd(ckpt, data, out_path):
    """Per-layer saliency flow profile averaged over a dataset."""
    params, _ = load_checkpoint(ckpt)
    examples = load_jsonl(data)
    profile = dataset_flow_profile(params, examples)
    out = _out_dir(out_path) / "flow_profile.csv"
    harness.write_flow_csv(out, profile)
    click.echo(f"wrote {out}")


@main.command("perturb")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--kind", required=True,
              type=click.Choice(sorted(KINDS) + sorted(KIND_ALIASES) + ["paired"]))
@click.option("--windows", required=True,
              help='Layer windows, e.g. "0-1,6-7" or "first2,last2".')
@click.option("--random-seed", type=int, default=0, show_default=True,
              help="Seed for the random-row control intervention.")
@click.option("--out", "out_path", required=True, type=click.Path(file_okay=False))
@_fail_cleanly
def perturb_cmd(ckpt, data, kind, windows, random_seed, out_path):
    """Consistency and disruption under attention-flow interventions."""
    params, config = load_checkpoint(ckpt)
    examples = load_jsonl(data)
    kind = KIND_ALIASES.get(kind, kind)
    parsed = harness.parse_windows(windows, config.layers)
    results = layer_sweep(params, examples, kind, parsed, random_seed=random_seed)
    out = _out_dir(out_path) / "consistency.csv"
    harness.write_perturb_csv(out, results)
    click.echo(f"wrote {out}")


@main.command("prune-eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--schedule", "schedule_arg", required=True,
              help="Preset name or JSON stage file.")
@click.option("--out", "out_path", required=True, type=click.Path(file_okay=False))
@_fail_cleanly
def prune_eval_cmd(ckpt, data, schedule_arg, out_path):
    """Accuracy with and without pruning, plus keep map and cost profile."""
    params, config = load_checkpoint(ckpt)
    examples = load_jsonl(data)
    schedule = _resolve_schedule(schedule_arg, config.layers)

    from .model import forward

    baseline = harness.eval_accuracy(params, examples)
    pruned = harness.eval_accuracy(params, examples, schedule if schedule.stages else None)
    ex0 = examples[0]
    trace = forward(params, ex0.tokens, ex0.layout,
                    schedule=schedule if schedule.stages else None)
    n_image = len(ex0.layout.img)
    profile = toy_model_cost(config.layers, config.hidden, config.ffn,
                             n_image, schedule)
    report = {
        "baseline_accuracy": baseline,
        "pruned_accuracy": pruned,
        "accuracy_drop_points": 100.0 * (baseline - pruned),
        "keep_map": [[int(i) for i in kept] for kept in trace.keep_map],
        "cost": harness.cost_profile_dict(profile),
    }
    out = _out_dir(out_path) / "prune_eval.json"
    harness.write_json(out, report)
    click.echo(f"wrote {out}")


@main.command("cost")
@click.option("--arch", required=True, help="Architecture preset, e.g. llava-7b.")
@click.option("--n-image", required=True, type=click.IntRange(min=0))
@click.option("--schedule", "schedule_arg", required=True,
              help="Preset name or JSON stage file.")
@_fail_cleanly
def cost_cmd(arch, n_image, schedule_arg):
    """Analytical FLOPs profile for an architecture preset, as JSON."""
    if Path(schedule_arg).is_file():
        # explicit stage files are literal; preset names adapt to the arch
        schedule = harness.schedule_from_value(_load_json(schedule_arg))
    else:
        schedule = schedule_arg
    profile = preset_cost(arch, n_image, schedule)
    click.echo(harness.dump_json(harness.cost_profile_dict(profile)), nl=False)


@main.command("ablate")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--grid", required=True, help='Sweep grid, e.g. "k=1,2,4:r=25,50,75".')
@click.option("--criterion", type=click.Choice(("phi_sh", "phi_dp", "phi_attn")),
              default="phi_sh", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(file_okay=False))
@_fail_cleanly
def ablate_cmd(ckpt, data, grid, criterion, out_path):
    """Accuracy/cost sweep over single-stage schedules (filter layer x ratio)."""
    params, config = load_checkpoint(ckpt)
    examples = load_jsonl(data)
    ks, rs = harness.parse_ablation_grid(grid)
    n_image = len(examples[0].layout.img)

    baseline = harness.eval_accuracy(params, examples)
    rows = []
    for k in ks:
        for r in rs:
            schedule = PruneSchedule((PruneStage(k, r, criterion),))
            schedule.validate_for_depth(config.layers)
            acc = harness.eval_accuracy(params, examples, schedule)
            profile = toy_model_cost(config.layers, config.hidden, config.ffn,
                                     n_image, schedule)
            rows.append((k, r, acc, 100.0 * (baseline - acc), profile.eta))
    out = _out_dir(out_path) / "ablation.csv"
    harness.write_csv(out, ("filter_layer", "ratio", "accuracy",
                            "drop_points", "eta"), rows)
    click.echo(f"wrote {out}")


if __name__ == "__main__":
    main()
