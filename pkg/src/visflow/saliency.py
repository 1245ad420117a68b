"""Attention-edge saliency and the scalar information-flow metrics.

The per-layer saliency matrix is |sum over heads of A ⊙ dL/dA|, the absolute
value taken after the head sum so that opposing head contributions cancel.
Entry (i, j) measures how much the edge "row i attends to column j"
contributes to the loss; scalar metrics aggregate those entries over layout
segments and normalize by the receiving segment's size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import MissingGradientError, VisflowError
from .layout import TokenLayout
from .model import ForwardTrace, ModelParams, forward

Array = np.ndarray


@dataclass(frozen=True)
class SaliencyMatrix:
    layer: int
    values: Array


@dataclass(frozen=True)
class ModalityScores:
    s_sys: float
    s_img: float
    s_ins: float


@dataclass(frozen=True)
class VisualFlowScores:
    """Intra-image flow plus both conventions of image-to-instruction flow.

    s_vt follows the image-rows-attending-to-instruction-columns reading,
    which is structurally zero under a causal sys < img < ins layout; s_vt_rx
    is the receiver reading (instruction rows attending to image columns),
    the quantity the flow profiles and bias ratios use. Both divide by |img|.
    """

    s_vv: float
    s_vt: float
    s_vt_rx: float


def saliency_matrix(trace: ForwardTrace, layer: int) -> SaliencyMatrix:
    """Saliency for one layer of a gradient-bearing trace."""
    if trace.attention_grad is None:
        raise MissingGradientError("trace has no attention gradients; run with want_grads")
    if not (0 <= layer < len(trace.attention)):
        raise VisflowError(f"layer {layer} out of range")
    acc = np.zeros_like(trace.attention[layer][0])
    for a, g in zip(trace.attention[layer], trace.attention_grad[layer]):
        acc += a * g
    return SaliencyMatrix(layer, np.abs(acc))


def saliency_stack(trace: ForwardTrace) -> list[SaliencyMatrix]:
    return [saliency_matrix(trace, l) for l in range(len(trace.attention))]


def _segment(layout: TokenLayout, name: str) -> np.ndarray:
    seg = getattr(layout, name)
    if not seg:
        raise ZeroDivisionError(f"layout segment {name!r} is empty")
    return np.asarray(seg, dtype=np.intp)


def modality_scores(sal: SaliencyMatrix, layout: TokenLayout) -> ModalityScores:
    """Mean saliency mass flowing from each segment into all tokens.

    Each score sums the columns of one segment over every row and divides by
    that segment's size. An empty segment raises ZeroDivisionError naming it.
    """
    v = sal.values
    sys_cols = _segment(layout, "sys")
    img_cols = _segment(layout, "img")
    ins_cols = _segment(layout, "ins")
    return ModalityScores(
        s_sys=float(v[:, sys_cols].sum()) / len(sys_cols),
        s_img=float(v[:, img_cols].sum()) / len(img_cols),
        s_ins=float(v[:, ins_cols].sum()) / len(ins_cols),
    )


def visual_flow_scores(sal: SaliencyMatrix, layout: TokenLayout) -> VisualFlowScores:
    """Image-internal and image-to-instruction flow, normalized by |img|."""
    v = sal.values
    img = _segment(layout, "img")
    ins = _segment(layout, "ins")
    n_img = len(img)
    return VisualFlowScores(
        s_vv=float(v[np.ix_(img, img)].sum()) / n_img,
        s_vt=float(v[np.ix_(img, ins)].sum()) / n_img,
        s_vt_rx=float(v[np.ix_(ins, img)].sum()) / n_img,
    )


@dataclass(frozen=True)
class LayerFlow:
    layer: int
    s_sys: float
    s_img: float
    s_ins: float
    s_vv: float
    s_vt: float
    s_vt_rx: float


def trace_flow_profile(trace: ForwardTrace, layout: TokenLayout) -> list[LayerFlow]:
    out = []
    for sal in saliency_stack(trace):
        ms = modality_scores(sal, layout)
        vf = visual_flow_scores(sal, layout)
        out.append(LayerFlow(sal.layer, ms.s_sys, ms.s_img, ms.s_ins,
                             vf.s_vv, vf.s_vt, vf.s_vt_rx))
    return out


def dataset_flow_profile(params: ModelParams, examples: Sequence) -> list[LayerFlow]:
    """Per-layer flow metrics averaged over examples, in dataset order.

    Each example runs with gradients against its gold answer. Errors from an
    individual example are re-raised with the example index prepended.
    """
    if not examples:
        raise VisflowError("no examples to profile")
    n_layers = None
    sums = None
    for i, ex in enumerate(examples):
        try:
            tr = forward(params, ex.tokens, ex.layout, want_grads=True,
                         loss_target=(ex.answer_position, ex.gold))
            rows = trace_flow_profile(tr, ex.layout)
        except Exception as exc:
            raise VisflowError(f"example {i}: {exc}") from exc
        if sums is None:
            n_layers = len(rows)
            sums = np.zeros((n_layers, 6))
        for l, row in enumerate(rows):
            sums[l] += (row.s_sys, row.s_img, row.s_ins, row.s_vv, row.s_vt, row.s_vt_rx)
    sums /= len(examples)
    return [LayerFlow(l, *map(float, sums[l])) for l in range(n_layers)]
