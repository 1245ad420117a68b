"""Experiment configuration and orchestration.

An experiment is described by one JSON document: model, task, training,
optional pruning schedule, optional intervention, and a global seed. Every
random draw in a run flows from seeds in this document; nothing reads the
clock or OS entropy. Section seeds may be omitted, in which case the global
seed is inherited, so a single integer pins the whole pipeline.

Dataset splits are fixed by convention: split 0 is the training split,
split 1 the held-out evaluation split. Both derive from the task seed, so
they are disjoint streams by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cost import CostProfile
from .errors import ConfigError
from .model import ModelConfig, ModelParams, TrainSpec, forward, train
from .perturb import Intervention, WindowResult
from .prune import PruneSchedule, PruneStage, schedule_preset
from .saliency import LayerFlow
from .tasks import SyntheticExample, SyntheticTaskSpec, gen_dataset

TRAIN_SPLIT = 0
EVAL_SPLIT = 1


@dataclass(frozen=True)
class DataSpec:
    train_count: int = 4096
    eval_count: int = 200

    def __post_init__(self):
        if self.train_count < 1 or self.eval_count < 1:
            raise ConfigError("dataset counts must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    model: ModelConfig
    task: SyntheticTaskSpec
    train: TrainSpec
    data: DataSpec
    schedule: PruneSchedule | None = None
    intervention: Intervention | None = None
    out_dir: str = "runs/out"

    def __post_init__(self):
        if self.model.vocab < self.task.vocab_size:
            raise ConfigError(
                f"model vocab {self.model.vocab} smaller than task vocabulary "
                f"{self.task.vocab_size}"
            )
        if self.model.max_seq < self.task.seq_len:
            raise ConfigError(
                f"model max_seq {self.model.max_seq} cannot hold task sequences "
                f"of length {self.task.seq_len}"
            )
        if self.schedule is not None:
            self.schedule.validate_for_depth(self.model.layers)


def _section(obj: Mapping, key: str) -> dict:
    val = obj.get(key, {})
    if not isinstance(val, Mapping):
        raise ConfigError(f"config section {key!r} must be an object")
    return dict(val)


def schedule_from_value(value, *, n_layers: int | None = None) -> PruneSchedule | None:
    """Accept null, a preset name, or
    {"stages": [{filter_layer, filter_ratio, criterion}...]}."""
    if value is None:
        return None
    if isinstance(value, str):
        return schedule_preset(value)
    if isinstance(value, Mapping):
        try:
            stages = tuple(
                PruneStage(int(s["filter_layer"]), float(s["filter_ratio"]),
                           str(s["criterion"]))
                for s in value.get("stages", ())
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(
                "each schedule stage needs filter_layer, filter_ratio, "
                "and criterion"
            ) from exc
        sched = PruneSchedule(stages)
        if n_layers is not None:
            sched.validate_for_depth(n_layers)
        return sched
    raise ConfigError("schedule must be null, a preset name, or a stage list")


def intervention_from_value(value) -> Intervention | None:
    if value is None:
        return None
    if not isinstance(value, Mapping):
        raise ConfigError("intervention must be null or an object")
    try:
        kind = value["kind"]
        layers = value["layers"]
    except KeyError as exc:
        raise ConfigError(f"intervention is missing {exc.args[0]!r}") from exc
    seed = value.get("random_seed")
    return Intervention(kind=str(kind), layers=frozenset(int(l) for l in layers),
                        random_seed=None if seed is None else int(seed))


def config_from_dict(obj: Mapping) -> ExperimentConfig:
    if "seed" not in obj:
        raise ConfigError("config requires an explicit global seed")
    try:
        seed = int(obj["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"global seed must be an integer, got {obj['seed']!r}") from exc

    model_d = _section(obj, "model")
    model_d.setdefault("init_seed", seed)
    task_d = _section(obj, "task")
    task_d.setdefault("seed", seed)
    train_d = _section(obj, "train")
    train_d.setdefault("seed", seed)

    try:
        model = ModelConfig(**model_d)
        task = SyntheticTaskSpec(**task_d)
        tspec = TrainSpec(**train_d)
        data = DataSpec(**_section(obj, "data"))
    except TypeError as exc:
        raise ConfigError(f"bad config field: {exc}") from exc

    return ExperimentConfig(
        seed=seed,
        model=model,
        task=task,
        train=tspec,
        data=data,
        schedule=schedule_from_value(obj.get("schedule"), n_layers=model.layers),
        intervention=intervention_from_value(obj.get("intervention")),
        out_dir=str(obj.get("out_dir", "runs/out")),
    )


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(obj, Mapping):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return config_from_dict(obj)


def task_spec_from_dict(obj: Mapping) -> SyntheticTaskSpec:
    try:
        return SyntheticTaskSpec(**dict(obj))
    except TypeError as exc:
        raise ConfigError(f"bad task spec field: {exc}") from exc


def make_datasets(config: ExperimentConfig) -> tuple[list[SyntheticExample], list[SyntheticExample]]:
    train_ds = gen_dataset(config.task, config.data.train_count, TRAIN_SPLIT)
    eval_ds = gen_dataset(config.task, config.data.eval_count, EVAL_SPLIT)
    return train_ds, eval_ds


def predict_answer(params: ModelParams, ex: SyntheticExample,
                   schedule: PruneSchedule | None = None) -> int:
    """Greedy prediction at the example's answer slot, surviving any pruning."""
    tr = forward(params, ex.tokens, ex.layout, schedule=schedule)
    rows = np.nonzero(tr.final_indices == ex.answer_position)[0]
    if rows.size != 1:
        raise ConfigError("answer position was pruned; schedules must keep the instruction segment")
    return int(np.argmax(tr.logits[int(rows[0])]))


def eval_accuracy(params: ModelParams, examples: Sequence[SyntheticExample],
                  schedule: PruneSchedule | None = None) -> float:
    """Fraction of examples whose predicted answer token equals gold.

    Examples are reduced in index order so the result never depends on
    evaluation parallelism.
    """
    if not examples:
        raise ConfigError("cannot evaluate on an empty example list")
    hits = 0
    for ex in examples:
        hits += int(predict_answer(params, ex, schedule) == ex.gold)
    return hits / len(examples)


def run_training(config: ExperimentConfig,
                 dataset: Sequence[SyntheticExample]) -> tuple[ModelParams, list[float]]:
    from .model import build_model

    params = build_model(config.model)
    return train(params, dataset, config.train)


# Artifact writers. All output is newline-terminated text with a fixed float
# rendering so identical inputs produce byte-identical files.

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_json(path, obj) -> None:
    Path(path).write_text(dump_json(obj), encoding="utf-8")


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_loss_csv(path, losses: Sequence[float]) -> None:
    write_csv(path, ["step", "loss"],
              [(i + 1, float(l)) for i, l in enumerate(losses)])


FLOW_HEADER = ("layer", "s_sys", "s_img", "s_ins", "s_vv", "s_vt", "s_vt_rx")


def write_flow_csv(path, profile: Sequence[LayerFlow]) -> None:
    rows = [(f.layer, f.s_sys, f.s_img, f.s_ins, f.s_vv, f.s_vt, f.s_vt_rx)
            for f in profile]
    write_csv(path, FLOW_HEADER, rows)


PERTURB_HEADER = ("window_start", "window_end", "kind", "c_label", "c_score",
                  "e", "d", "n_examples")


def write_perturb_csv(path, results: Sequence[WindowResult]) -> None:
    rows = [(r.window[0], r.window[1], r.kind, r.c_label, r.c_score, r.e,
             r.d, r.n_examples) for r in results]
    write_csv(path, PERTURB_HEADER, rows)


def cost_profile_dict(profile: CostProfile) -> dict:
    tflop = 1e12
    return {
        "baseline_tflops": profile.baseline_flops / tflop,
        "pruned_tflops": profile.pruned_flops / tflop,
        "ratio_percent": 100.0 * profile.ratio,
        "eta": profile.eta,
        "segments": [
            {
                "start_layer": s.start_layer,
                "end_layer": s.end_layer,
                "n_tokens": s.n_tokens,
                "flops_per_layer": s.flops_per_layer,
            }
            for s in profile.segments
        ],
    }


def parse_windows(text: str, n_layers: int) -> list[tuple[int, int]]:
    """Parse a layer-window list like "0-1,6-7", "3", or "first2,last2".

    firstN and lastN are aliases for the N shallowest and N deepest layers.
    Windows are inclusive on both ends and must fit the model depth.
    """
    windows = []
    for part in text.split(","):
        part = part.strip().lower()
        if not part:
            raise ConfigError("empty window entry")
        if part.startswith("first"):
            n = _window_count(part[5:], n_layers)
            windows.append((0, n - 1))
        elif part.startswith("last"):
            n = _window_count(part[4:], n_layers)
            windows.append((n_layers - n, n_layers - 1))
        elif "-" in part:
            lo_s, hi_s = part.split("-", 1)
            lo, hi = _window_edge(lo_s), _window_edge(hi_s)
            windows.append((lo, hi))
        else:
            lo = _window_edge(part)
            windows.append((lo, lo))
    for lo, hi in windows:
        if not (0 <= lo <= hi < n_layers):
            raise ConfigError(f"window {lo}-{hi} does not fit a {n_layers}-layer model")
    return windows


def _window_count(text: str, n_layers: int) -> int:
    n = _window_edge(text)
    if not (1 <= n <= n_layers):
        raise ConfigError(f"window size {n} does not fit a {n_layers}-layer model")
    return n


def _window_edge(text: str) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigError(f"bad window component {text!r}") from exc


def parse_ablation_grid(text: str) -> tuple[list[int], list[float]]:
    """Parse "k=1,2,4:r=25,50,75" into filter-layer and ratio lists."""
    parts = dict()
    for chunk in text.split(":"):
        if "=" not in chunk:
            raise ConfigError(f"bad grid chunk {chunk!r}; expected k=...:r=...")
        key, _, vals = chunk.partition("=")
        parts[key.strip().lower()] = vals
    if set(parts) != {"k", "r"}:
        raise ConfigError("grid must define exactly k=... and r=...")
    try:
        ks = [int(v) for v in parts["k"].split(",") if v.strip()]
        rs = [float(v) for v in parts["r"].split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad grid value: {exc}") from exc
    if not ks or not rs:
        raise ConfigError("grid k and r lists must be non-empty")
    return ks, rs
