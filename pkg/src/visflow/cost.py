"""Analytical per-layer FLOPs model and schedule-induced reduction rate.

Per-layer cost for n tokens with hidden width d and FFN width m:

    omega(n) = 4 n d^2 + 2 n^2 d + 2 n d m

(projections, attention score/mix products, FFN). A two-stage schedule
(K1, R1), (K2, R2) runs K1 layers at full image width n, K2 - K1 layers at
the width surviving stage one, and the rest at the width surviving stage two.
The reduction rate eta is 1 minus the pruned-to-baseline ratio. Counts follow
the prune module's floor rule, so the cost model and the executed pruning
always agree on widths.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, ScheduleError
from .prune import PruneSchedule, schedule_preset, surviving_count

TFLOP = 1e12


@dataclass(frozen=True)
class ArchDims:
    layers: int
    hidden: int
    ffn: int

    def __post_init__(self):
        if min(self.layers, self.hidden, self.ffn) < 1:
            raise ConfigError("layers, hidden, and ffn must be positive")


@dataclass(frozen=True)
class ArchPreset:
    name: str
    dims: ArchDims
    shallow_filter_layer: int


ARCH_PRESETS: dict[str, ArchPreset] = {
    "llava-7b": ArchPreset("llava-7b", ArchDims(32, 4096, 11008), shallow_filter_layer=2),
    "llava-13b": ArchPreset("llava-13b", ArchDims(40, 5120, 13824), shallow_filter_layer=3),
}


def arch_preset(name: str) -> ArchPreset:
    try:
        return ARCH_PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown architecture preset {name!r}, expected one of {sorted(ARCH_PRESETS)}"
        ) from None


def layer_flops(n_tokens: int, dims: ArchDims) -> float:
    """FLOPs of one decoder layer over n_tokens positions."""
    if n_tokens < 0:
        raise ConfigError("token count must be non-negative")
    n, d, m = float(n_tokens), float(dims.hidden), float(dims.ffn)
    return 4.0 * n * d * d + 2.0 * n * n * d + 2.0 * n * d * m


@dataclass(frozen=True)
class CostSegment:
    start_layer: int
    end_layer: int  # exclusive
    n_tokens: int
    flops_per_layer: float


@dataclass(frozen=True)
class CostProfile:
    baseline_flops: float
    pruned_flops: float
    eta: float
    segments: tuple[CostSegment, ...]

    @property
    def ratio(self) -> float:
        return self.pruned_flops / self.baseline_flops


def schedule_cost(dims: ArchDims, n_image: int, schedule: PruneSchedule) -> CostProfile:
    """Cost of running a pruning schedule against the all-layers baseline.

    Token counts here are image tokens only, matching the convention that the
    sequence is dominated by (and the schedule only ever touches) the image.
    """
    if n_image < 0:
        raise ConfigError("n_image must be non-negative")
    schedule.validate_for_depth(dims.layers)

    baseline = dims.layers * layer_flops(n_image, dims)

    segments = []
    n_cur = n_image
    prev = 0
    for stage in schedule.stages:
        if stage.filter_layer > prev:
            segments.append(CostSegment(prev, stage.filter_layer, n_cur,
                                        layer_flops(n_cur, dims)))
        prev = stage.filter_layer
        n_cur = surviving_count(n_cur, stage.filter_ratio)
    segments.append(CostSegment(prev, dims.layers, n_cur, layer_flops(n_cur, dims)))

    pruned = sum((seg.end_layer - seg.start_layer) * seg.flops_per_layer
                 for seg in segments)
    eta = 1.0 - pruned / baseline if baseline > 0 else 0.0
    return CostProfile(baseline, pruned, eta, tuple(segments))


def preset_cost(arch_name: str, n_image: int,
                schedule: "PruneSchedule | str") -> CostProfile:
    """Cost for a named architecture.

    A schedule given by preset name is architecture-relative: its shallow
    stage moves to the layer this architecture ranks at (the 13B variant
    prunes one layer deeper than the 7B). An explicit PruneSchedule is
    taken literally.
    """
    arch = arch_preset(arch_name)
    if isinstance(schedule, str):
        schedule = schedule_preset(schedule,
                                   shallow_filter_layer=arch.shallow_filter_layer)
    return schedule_cost(arch.dims, n_image, schedule)


def toy_model_cost(layers: int, hidden: int, ffn: int, n_image: int,
                   schedule: PruneSchedule) -> CostProfile:
    """Cost profile for an explicit toy architecture."""
    return schedule_cost(ArchDims(layers, hidden, ffn), n_image, schedule)
