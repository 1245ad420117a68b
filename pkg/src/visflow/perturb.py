"""Attention-flow interventions and the consistency / bias metrics.

An intervention zeroes post-softmax attention entries (no renormalization)
at a set of layers: vt_block zeroes instruction-row attention into image
columns, vv_block zeroes image-row attention into image columns, and
v_random_block zeroes the image columns of |ins| non-image rows sampled once
per (seed, layout). Disruption E is measured as the drop in a consistency
metric relative to the undisrupted run, whose consistency is 1 by definition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .layout import TokenLayout
from .model import ModelParams, forward

Array = np.ndarray

KINDS = ("vt_block", "vv_block", "v_random_block")

# Disruption energies at or below this are treated as zero; the log bias
# ratio is undefined when either side vanishes.
BIAS_EPS = 1e-9

TOP_K = 5


@dataclass(frozen=True)
class Intervention:
    kind: str
    layers: frozenset[int]
    random_seed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown intervention kind {self.kind!r}, expected one of {KINDS}")
        if self.kind == "v_random_block" and self.random_seed is None:
            raise ConfigError("v_random_block requires a random_seed")
        object.__setattr__(self, "layers", frozenset(int(l) for l in self.layers))

    @classmethod
    def window(cls, kind: str, start: int, end: int,
               random_seed: int | None = None) -> "Intervention":
        """Intervention over the inclusive layer window [start, end]; an
        inverted window yields the empty (no-op) intervention."""
        return cls(kind, frozenset(range(start, end + 1)), random_seed)


def blocked_rows(iv: Intervention, layout: TokenLayout) -> np.ndarray:
    """Rows whose attention into image columns the intervention zeroes."""
    if iv.kind == "vt_block":
        return np.asarray(layout.ins, dtype=np.intp)
    if iv.kind == "vv_block":
        return np.asarray(layout.img, dtype=np.intp)
    pool = np.asarray(sorted(set(layout.sys) | set(layout.ins)), dtype=np.intp)
    count = len(layout.ins)
    if count > pool.size:
        raise ConfigError("not enough non-image rows to sample")
    rng = np.random.default_rng(iv.random_seed)
    return np.sort(rng.choice(pool, size=count, replace=False))


def intervention_mask(iv: Intervention, layout: TokenLayout) -> Array:
    """Multiplicative 0/1 mask over attention entries for the full layout."""
    n = layout.seq_len
    mask = np.ones((n, n))
    rows = blocked_rows(iv, layout)
    cols = np.asarray(layout.img, dtype=np.intp)
    if rows.size and cols.size:
        mask[np.ix_(rows, cols)] = 0.0
    return mask


def apply_intervention(attn: Array, layout: TokenLayout, iv: Intervention) -> Array:
    """Zero the targeted entries of one attention matrix."""
    if attn.shape != (layout.seq_len, layout.seq_len):
        raise ConfigError(f"attention shape {attn.shape} does not match layout")
    return attn * intervention_mask(iv, layout)


def top_k_tokens(logits: Array, k: int = TOP_K) -> frozenset[int]:
    """Ids of the k largest logits; ties prefer the lower token id."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size < k:
        raise ValueError(f"need a 1-D vector of at least {k} logits")
    order = sorted(range(z.size), key=lambda i: (-z[i], i))
    return frozenset(order[:k])


def label_consistency(base: Sequence[int], perturbed: Sequence[int]) -> float:
    """Fraction of examples whose first answer token is unchanged."""
    if len(base) != len(perturbed):
        raise ValueError("prediction lists differ in length")
    if not base:
        raise ValueError("no predictions to compare")
    return sum(b == p for b, p in zip(base, perturbed)) / len(base)


def score_consistency(base: Sequence[frozenset], perturbed: Sequence[frozenset]) -> float:
    """Mean Jaccard overlap of the top-5 answer token sets."""
    if len(base) != len(perturbed):
        raise ValueError("top-k lists differ in length")
    if not base:
        raise ValueError("no predictions to compare")
    total = 0.0
    for b, p in zip(base, perturbed):
        if len(b) != TOP_K or len(p) != TOP_K:
            raise ValueError(f"top-k sets must have exactly {TOP_K} elements")
        total += len(b & p) / len(b | p)
    return total / len(base)


def prediction_bias(c_base: float, c_perturbed: float) -> float:
    """Disruption E: how much consistency an intervention destroyed."""
    for name, c in (("c_base", c_base), ("c_perturbed", c_perturbed)):
        if not (0.0 <= c <= 1.0):
            raise ValueError(f"{name} must lie in [0, 1], got {c}")
    return c_base - c_perturbed


def bias_ratio(e_vv: float, e_vt: float) -> float | None:
    """ln(E_vv / E_vt), or None when either disruption is effectively zero."""
    if e_vv <= BIAS_EPS or e_vt <= BIAS_EPS:
        return None
    return math.log(e_vv / e_vt)


@dataclass(frozen=True)
class ConsistencyReport:
    c_label: float
    c_score: float
    n_examples: int


@dataclass(frozen=True)
class WindowResult:
    window: tuple[int, int]
    kind: str
    c_label: float
    c_score: float
    e: float
    d: float | None
    n_examples: int


def _predict(params: ModelParams, ex, iv: Intervention | None) -> tuple[int, frozenset[int]]:
    tr = forward(params, ex.tokens, ex.layout, intervention=iv)
    row = int(np.flatnonzero(tr.final_indices == ex.answer_position)[0])
    logits = tr.logits[row]
    return int(np.argmax(logits)), top_k_tokens(logits)


def consistency(params: ModelParams, examples: Sequence,
                iv: Intervention) -> ConsistencyReport:
    """Consistency of first-token and top-5 predictions under an intervention,
    relative to the undisrupted forward pass."""
    if not examples:
        raise ConfigError("no examples")
    base_ids, base_tops, pert_ids, pert_tops = [], [], [], []
    for ex in examples:
        bi, bt = _predict(params, ex, None)
        pi, pt = _predict(params, ex, iv)
        base_ids.append(bi)
        base_tops.append(bt)
        pert_ids.append(pi)
        pert_tops.append(pt)
    return ConsistencyReport(
        c_label=label_consistency(base_ids, pert_ids),
        c_score=score_consistency(base_tops, pert_tops),
        n_examples=len(examples),
    )


def _metric(report: ConsistencyReport, bias_metric: str) -> float:
    if bias_metric == "score":
        return report.c_score
    if bias_metric == "label":
        return report.c_label
    raise ConfigError(f"bias_metric must be 'score' or 'label', got {bias_metric!r}")


def layer_sweep(params: ModelParams, examples: Sequence, kind: str,
                windows: Sequence[tuple[int, int]], *,
                random_seed: int = 0,
                bias_metric: str = "score") -> list[WindowResult]:
    """Consistency and disruption per layer window.

    kind is one of the intervention kinds, or "paired" to run vv_block and
    vt_block on every window and attach the log bias ratio D to the vv row.
    Undisrupted consistency is 1 by construction, so E = 1 - C_metric.
    """
    if kind == "paired":
        kinds = ("vv_block", "vt_block")
    elif kind in KINDS:
        kinds = (kind,)
    else:
        raise ConfigError(f"unknown sweep kind {kind!r}")
    _metric(ConsistencyReport(0, 0, 0), bias_metric)  # validate early

    out = []
    for start, end in windows:
        row_by_kind = {}
        for k in kinds:
            iv = Intervention.window(k, start, end,
                                     random_seed if k == "v_random_block" else None)
            rep = consistency(params, examples, iv)
            row_by_kind[k] = WindowResult(
                window=(start, end), kind=k,
                c_label=rep.c_label, c_score=rep.c_score,
                e=1.0 - _metric(rep, bias_metric), d=None,
                n_examples=rep.n_examples,
            )
        if kind == "paired":
            d = bias_ratio(row_by_kind["vv_block"].e, row_by_kind["vt_block"].e)
            vv = row_by_kind["vv_block"]
            row_by_kind["vv_block"] = WindowResult(
                vv.window, vv.kind, vv.c_label, vv.c_score, vv.e, d, vv.n_examples
            )
        out.extend(row_by_kind[k] for k in kinds)
    return out
