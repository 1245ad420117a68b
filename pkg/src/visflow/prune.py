"""Image-token importance criteria, ranking, and two-stage pruning schedules.

A schedule stage (K, R, criterion) means: the first K layers run at full
width, tokens are ranked on the head-averaged attention of layer K-1 (the
last full-width layer), and the lowest-scoring floor(|V_surviving| * R / 100)
image tokens are dropped before layer K runs. Non-image tokens are never
dropped. Ties keep the lower original index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, LayoutError, ScheduleError, ShapeError
from .layout import TokenLayout

CRITERIA = ("phi_sh", "phi_dp", "phi_attn")


@dataclass(frozen=True)
class PruneStage:
    filter_layer: int
    filter_ratio: float
    criterion: str

    def __post_init__(self):
        if self.filter_layer < 0:
            raise ScheduleError(f"filter_layer must be >= 0, got {self.filter_layer}")
        if not (0.0 <= self.filter_ratio <= 100.0):
            raise ScheduleError(f"filter_ratio must be in [0, 100], got {self.filter_ratio}")
        if self.criterion not in CRITERIA:
            raise ScheduleError(f"unknown criterion {self.criterion!r}, expected one of {CRITERIA}")


@dataclass(frozen=True)
class PruneSchedule:
    stages: tuple[PruneStage, ...]

    def __post_init__(self):
        if len(self.stages) > 2:
            raise ScheduleError("at most two pruning stages are supported")
        layers = [s.filter_layer for s in self.stages]
        if any(k < 1 for k in layers):
            raise ScheduleError("filter_layer 0 has no preceding attention to rank on")
        if sorted(set(layers)) != layers:
            raise ScheduleError(f"stage filter layers must be strictly increasing, got {layers}")

    def __bool__(self) -> bool:
        return bool(self.stages)

    def validate_for_depth(self, n_layers: int) -> None:
        for s in self.stages:
            if s.filter_layer >= n_layers:
                raise ScheduleError(
                    f"filter_layer {s.filter_layer} out of range for a {n_layers}-layer model"
                )


SCHEDULE_PRESETS: dict[str, tuple[tuple[int, float, str], ...]] = {
    "none": (),
    "aggressive": ((2, 50.0, "phi_sh"), (8, 75.0, "phi_dp")),
    "conservative": ((2, 50.0, "phi_sh"), (15, 75.0, "phi_dp")),
    "toy-aggressive": ((2, 50.0, "phi_sh"), (4, 75.0, "phi_dp")),
}


def schedule_preset(name: str, *, shallow_filter_layer: int | None = None) -> PruneSchedule:
    """Build a preset schedule, optionally overriding the first stage's layer.

    The override exists because the recommended shallow filtering point
    differs by architecture (layer 2 for the 7B-class preset, layer 3 for the
    13B-class preset).
    """
    try:
        spec = SCHEDULE_PRESETS[name]
    except KeyError:
        raise ScheduleError(
            f"unknown schedule preset {name!r}, expected one of {sorted(SCHEDULE_PRESETS)}"
        ) from None
    stages = []
    for i, (k, r, crit) in enumerate(spec):
        if i == 0 and shallow_filter_layer is not None:
            k = shallow_filter_layer
        stages.append(PruneStage(k, r, crit))
    return PruneSchedule(tuple(stages))


def pruned_count(n_tokens: int, ratio: float) -> int:
    """Number of tokens removed at ratio R%: floor(n * R / 100).

    Integral ratios use integer arithmetic so e.g. 10% of 30 is exactly 3.
    """
    if n_tokens < 0:
        raise ConfigError("token count must be non-negative")
    if not (0.0 <= ratio <= 100.0):
        raise ConfigError(f"ratio must be in [0, 100], got {ratio}")
    if float(ratio).is_integer():
        return (n_tokens * int(ratio)) // 100
    return math.floor(n_tokens * ratio / 100.0)


def surviving_count(n_tokens: int, ratio: float) -> int:
    return n_tokens - pruned_count(n_tokens, ratio)


def select_kept(scores: Mapping[int, float], ratio: float) -> tuple[int, ...]:
    """Keep the highest-scoring tokens, dropping floor(n * ratio / 100).

    Ties at the cut keep the lower index. Returns kept indices ascending.
    """
    n = len(scores)
    drop = pruned_count(n, ratio)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [idx for idx, _ in ranked[: n - drop]]
    return tuple(sorted(kept))


def _position_map(n: int, kept: Sequence[int] | None) -> dict[int, int]:
    if kept is None:
        return {i: i for i in range(n)}
    if len(kept) != n:
        raise ShapeError(
            f"kept lists {len(kept)} survivors but the attention matrix has {n} rows"
        )
    return {int(orig): i for i, orig in enumerate(kept)}


def phi_sh(attn: np.ndarray, layout: TokenLayout,
           kept: Sequence[int] | None = None) -> dict[int, float]:
    """Shallow-stage score: total attention received from instruction rows.

    attn is a head-averaged attention matrix over the currently surviving
    tokens; kept maps its rows/columns to original positions (identity when
    omitted). Returns {original image index: score} for surviving image tokens.
    """
    pos = _position_map(attn.shape[0], kept)
    ins_rows = [pos[i] for i in layout.ins if i in pos]
    if not ins_rows:
        raise LayoutError("no instruction tokens present to rank with")
    rows = np.array(ins_rows, dtype=np.intp)
    return {
        v: float(attn[rows, pos[v]].sum())
        for v in layout.img
        if v in pos
    }


def phi_dp(attn: np.ndarray, layout: TokenLayout,
           kept: Sequence[int] | None = None) -> dict[int, float]:
    """Deep-stage score: total attention the token pays to surviving image
    tokens (its own column included)."""
    pos = _position_map(attn.shape[0], kept)
    img_cols = [pos[v] for v in layout.img if v in pos]
    if not img_cols:
        raise LayoutError("no surviving image tokens to rank")
    cols = np.array(img_cols, dtype=np.intp)
    return {v: float(attn[pos[v], cols].sum()) for v in layout.img if v in pos}


def phi_attn(attn: np.ndarray, layout: TokenLayout,
             kept: Sequence[int] | None = None) -> dict[int, float]:
    """Plain received-attention score: mean attention paid to the token by
    later (causally able) rows, zero when no such row exists."""
    n = attn.shape[0]
    pos = _position_map(n, kept)
    out = {}
    for v in layout.img:
        if v not in pos:
            continue
        j = pos[v]
        later = n - j - 1
        out[v] = float(attn[j + 1:, j].sum() / later) if later else 0.0
    return out


_CRITERION_FNS = {"phi_sh": phi_sh, "phi_dp": phi_dp, "phi_attn": phi_attn}


def criterion_scores(criterion: str, attn: np.ndarray, layout: TokenLayout,
                     kept: Sequence[int] | None = None) -> dict[int, float]:
    try:
        fn = _CRITERION_FNS[criterion]
    except KeyError:
        raise ScheduleError(f"unknown criterion {criterion!r}") from None
    return fn(attn, layout, kept)


def head_mean_attention(head_mats: Sequence[np.ndarray]) -> np.ndarray:
    """Average per-head attention matrices into one ranking matrix."""
    if not head_mats:
        raise ConfigError("need at least one attention matrix")
    return np.mean(np.stack(head_mats, axis=0), axis=0)
