"""Tiny decoder-only transformer over a system / image / instruction layout.

Blocks are pre-norm: x + Attn(LN(x)) then x + FFN(LN(x)), learned absolute
position embeddings, no biases outside the layer norms, and no final norm
before the unembedding. The forward pass records every head's post-softmax
attention (after any intervention) and, on request, the loss gradient with
respect to those matrices.

Pruning schedules and frozen keep-sets drop image-token rows between layers.
Because later layers then never see the dropped keys, a decode-time re-forward
with the prefill's keep sets is exactly equivalent to caching. Gradient
capture, interventions, pruning, and attention overrides are mutually
exclusive features of a single pass; unsupported combinations are rejected
up front.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import prune as pruning
from .errors import (
    ConfigError,
    LayoutError,
    TrainingDivergedError,
    UnsupportedComboError,
)
from .layout import TokenLayout

Array = np.ndarray

_LAYER_FIELDS = (
    "wq", "wk", "wv", "wo", "w_in", "w_out",
    "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
)


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    heads: int
    hidden: int
    ffn: int
    vocab: int
    max_seq: int
    init_seed: int
    init_std: float = 0.02

    def __post_init__(self):
        if self.layers < 2:
            raise ConfigError("need at least 2 layers to split shallow from deep")
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        if self.hidden % self.heads != 0:
            raise ConfigError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})"
            )
        if self.ffn < 1 or self.vocab < 1 or self.max_seq < 1:
            raise ConfigError("ffn, vocab, and max_seq must be positive")
        if self.init_std < 0:
            raise ConfigError("init_std must be non-negative")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


@dataclass
class LayerParams:
    wq: Array
    wk: Array
    wv: Array
    wo: Array
    w_in: Array
    w_out: Array
    ln1_gain: Array
    ln1_bias: Array
    ln2_gain: Array
    ln2_bias: Array


@dataclass
class ModelParams:
    config: ModelConfig
    tok_emb: Array
    pos_emb: Array
    head: Array
    layers: list[LayerParams]

    def tensors(self) -> Iterator[tuple[str, Array]]:
        """All parameter arrays in canonical (name, array) order."""
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        yield "head", self.head
        for i, lp in enumerate(self.layers):
            for name in _LAYER_FIELDS:
                yield f"layers.{i}.{name}", getattr(lp, name)

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            tok_emb=self.tok_emb.copy(),
            pos_emb=self.pos_emb.copy(),
            head=self.head.copy(),
            layers=[
                LayerParams(**{name: getattr(lp, name).copy() for name in _LAYER_FIELDS})
                for lp in self.layers
            ],
        )

    @classmethod
    def from_tensor_dict(cls, config: ModelConfig,
                         tensors: Mapping[str, Array]) -> "ModelParams":
        expected = dict(param_manifest(config))
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        if missing or extra:
            raise ConfigError(f"tensor names mismatch: missing {missing}, extra {extra}")
        arrays = {}
        for name, shape in expected.items():
            arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float64))
            if arr.shape != shape:
                raise ConfigError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
            arrays[name] = arr
        layers = [
            LayerParams(**{f: arrays[f"layers.{i}.{f}"] for f in _LAYER_FIELDS})
            for i in range(config.layers)
        ]
        return cls(config, arrays["tok_emb"], arrays["pos_emb"], arrays["head"], layers)


def param_manifest(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list for a config, in serialization order."""
    d, m = config.hidden, config.ffn
    shapes = {
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "w_in": (d, m), "w_out": (m, d),
        "ln1_gain": (d,), "ln1_bias": (d,), "ln2_gain": (d,), "ln2_bias": (d,),
    }
    out: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (config.vocab, d)),
        ("pos_emb", (config.max_seq, d)),
        ("head", (d, config.vocab)),
    ]
    for i in range(config.layers):
        out.extend((f"layers.{i}.{name}", shapes[name]) for name in _LAYER_FIELDS)
    return out


def build_model(config: ModelConfig) -> ModelParams:
    """Initialize parameters from config.init_seed: weights ~ N(0, init_std^2)
    drawn in canonical tensor order, layer-norm gains 1 and biases 0."""
    rng = np.random.default_rng(config.init_seed)
    d, m = config.hidden, config.ffn

    def draw(*shape: int) -> Array:
        return rng.normal(0.0, config.init_std, size=shape)

    tok_emb = draw(config.vocab, d)
    pos_emb = draw(config.max_seq, d)
    head = draw(d, config.vocab)
    layers = []
    for _ in range(config.layers):
        layers.append(LayerParams(
            wq=draw(d, d), wk=draw(d, d), wv=draw(d, d), wo=draw(d, d),
            w_in=draw(d, m), w_out=draw(m, d),
            ln1_gain=np.ones(d), ln1_bias=np.zeros(d),
            ln2_gain=np.ones(d), ln2_bias=np.zeros(d),
        ))
    return ModelParams(config, tok_emb, pos_emb, head, layers)


@dataclass
class ForwardTrace:
    """Everything a single pass exposes for analysis.

    attention[l][h] is the post-softmax (and post-intervention) matrix over
    the tokens surviving at layer l; attention_grad mirrors it with dL/dA
    when gradients were requested. keep_map[l] holds the original positions
    entering layer l; final_indices the positions the logits rows refer to.
    """

    attention: list[list[Array]]
    attention_grad: list[list[Array]] | None
    logits: Array
    final_indices: np.ndarray
    keep_map: list[np.ndarray]
    loss: float | None
    param_grads: dict[str, Array] | None = None


def _wrap_params(params: ModelParams, tape: "ad.GradTape | None") -> dict[str, ad.Tensor]:
    out = {}
    for name, arr in params.tensors():
        out[name] = tape.leaf(arr, name) if tape is not None else ad.Tensor(arr)
    return out


def _validate_tokens(tokens: Sequence[int], config: ModelConfig) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.intp)
    if arr.ndim != 1 or arr.size == 0:
        raise ConfigError("tokens must be a non-empty 1-D sequence")
    if arr.size > config.max_seq:
        raise ConfigError(f"sequence length {arr.size} exceeds max_seq {config.max_seq}")
    if arr.min() < 0 or arr.max() >= config.vocab:
        raise ConfigError("token id out of vocabulary range")
    return arr


def forward(params: ModelParams, tokens: Sequence[int], layout: TokenLayout, *,
            intervention=None,
            schedule: "pruning.PruneSchedule | None" = None,
            frozen_keep: Mapping[int, frozenset] | None = None,
            want_grads: bool = False,
            loss_target: tuple[int, int] | None = None,
            attention_override: Mapping[tuple[int, int], Array] | None = None,
            key_exclusions: Sequence[tuple[int, frozenset]] | None = None) -> ForwardTrace:
    """Run the model once and return its trace.

    Mutually exclusive features: want_grads (tape capture, needs loss_target),
    schedule / frozen_keep (image-token dropping), intervention (attention
    edge zeroing), attention_override (replace a head's post-softmax matrix,
    used for derivative checks). key_exclusions is a diagnostic hook that
    removes keys from the softmax domain from a given layer on, for verifying
    that zeroed-attention tokens are inert.
    """
    cfg = params.config
    toks = _validate_tokens(tokens, cfg)
    n = toks.size
    if layout.seq_len != n:
        raise LayoutError(f"layout covers {layout.seq_len} positions, sequence has {n}")

    if schedule is not None and not schedule.stages:
        schedule = None
    pruned_pass = schedule is not None or frozen_keep is not None
    if schedule is not None and frozen_keep is not None:
        raise UnsupportedComboError("schedule and frozen_keep are exclusive")
    if want_grads and pruned_pass:
        raise UnsupportedComboError("gradient capture does not support pruned passes")
    if intervention is not None and pruned_pass:
        raise UnsupportedComboError("interventions do not combine with pruning")
    if attention_override is not None and (want_grads or pruned_pass or intervention is not None):
        raise UnsupportedComboError("attention_override must run in a plain forward pass")
    if want_grads and loss_target is None:
        raise ConfigError("want_grads requires a loss_target")

    if schedule is not None:
        schedule.validate_for_depth(cfg.layers)
    if intervention is not None:
        bad = [l for l in intervention.layers if not (0 <= l < cfg.layers)]
        if bad:
            raise ConfigError(f"intervention layers {sorted(bad)} out of range")

    if loss_target is not None:
        pos, tid = loss_target
        if not (0 <= pos < n):
            raise ConfigError(f"loss position {pos} out of range")
        if not (0 <= tid < cfg.vocab):
            raise ConfigError(f"loss target id {tid} out of vocabulary")

    # Boundary plan: layer index -> PruneStage (rank dynamically) or a frozen
    # set of image originals to keep.
    plan: dict[int, object] = {}
    if schedule is not None:
        plan = {st.filter_layer: st for st in schedule.stages}
    elif frozen_keep is not None:
        for k, kept_imgs in frozen_keep.items():
            if not (1 <= int(k) < cfg.layers):
                raise ConfigError(f"frozen keep boundary {k} out of range")
            plan[int(k)] = frozenset(kept_imgs)

    iv_mask = None
    if intervention is not None and intervention.layers:
        from .perturb import intervention_mask

        iv_mask = intervention_mask(intervention, layout)

    tape = ad.GradTape() if want_grads else None
    P = _wrap_params(params, tape)

    x = ad.add(
        ad.gather_rows(P["tok_emb"], toks),
        ad.gather_rows(P["pos_emb"], np.arange(n)),
    )

    H, dh = cfg.heads, cfg.head_dim
    inv_sqrt_dh = 1.0 / math.sqrt(dh)
    img_set = set(layout.img)
    kept = np.arange(n)
    keep_map: list[np.ndarray] = []
    attn_nodes: list[ad.Tensor] = []  # one stacked (H, n, n) tensor per layer

    mask3 = None  # (H, n_cur, n_cur) causal mask, rebuilt when the width changes
    for l in range(cfg.layers):
        keep_map.append(kept.copy())
        n_cur = kept.size
        if mask3 is None or key_exclusions:
            mask = np.tril(np.ones((n_cur, n_cur), dtype=bool))
            if key_exclusions:
                dead = set()
                for from_layer, ids in key_exclusions:
                    if l >= from_layer:
                        dead.update(ids)
                if dead:
                    cols = [i for i, o in enumerate(kept) if int(o) in dead]
                    mask[:, cols] = False
            mask3 = np.ascontiguousarray(np.broadcast_to(mask, (H, n_cur, n_cur)))

        ln1 = ad.layer_norm(x, P[f"layers.{l}.ln1_gain"], P[f"layers.{l}.ln1_bias"])
        q = ad.split_heads(ad.matmul(ln1, P[f"layers.{l}.wq"]), H)
        k = ad.split_heads(ad.matmul(ln1, P[f"layers.{l}.wk"]), H)
        v = ad.split_heads(ad.matmul(ln1, P[f"layers.{l}.wv"]), H)

        scores = ad.scale(ad.bmm(q, ad.swap_last2(k)), inv_sqrt_dh)
        a = ad.masked_row_softmax(scores, mask3)
        if attention_override is not None:
            for (ol, oh), ov in attention_override.items():
                if ol != l:
                    continue
                ov = np.asarray(ov, dtype=np.float64)
                if not (0 <= oh < H):
                    raise ConfigError(f"override head {oh} out of range")
                if ov.shape != (n_cur, n_cur):
                    raise ConfigError(
                        f"override for layer {ol} head {oh} has shape {ov.shape}, "
                        f"expected {(n_cur, n_cur)}"
                    )
                a = ad.replace_slab(a, oh, ov)
        elif iv_mask is not None and l in intervention.layers:
            a = ad.mul_mask(a, iv_mask)
        attn_nodes.append(a)

        x = ad.add(x, ad.matmul(ad.merge_heads(ad.bmm(a, v)), P[f"layers.{l}.wo"]))
        ln2 = ad.layer_norm(x, P[f"layers.{l}.ln2_gain"], P[f"layers.{l}.ln2_bias"])
        x = ad.add(x, ad.matmul(ad.gelu(ad.matmul(ln2, P[f"layers.{l}.w_in"])), P[f"layers.{l}.w_out"]))

        boundary = l + 1
        if boundary in plan:
            entry = plan[boundary]
            if isinstance(entry, pruning.PruneStage):
                amean = pruning.head_mean_attention(list(attn_nodes[l].value))
                scores_map = pruning.criterion_scores(entry.criterion, amean, layout, kept)
                kept_imgs = set(pruning.select_kept(scores_map, entry.filter_ratio))
            else:
                kept_imgs = set(entry)
            sel = [i for i, o in enumerate(kept)
                   if int(o) not in img_set or int(o) in kept_imgs]
            if len(sel) != kept.size:
                x = ad.gather_rows(x, sel)
                kept = kept[sel]
                mask3 = None

    logits = ad.matmul(x, P["head"])

    loss_val = None
    loss_node = None
    if loss_target is not None:
        pos, tid = loss_target
        where = np.flatnonzero(kept == pos)
        if where.size == 0:
            raise LayoutError(f"loss position {pos} was pruned away")
        loss_node = ad.cross_entropy(ad.take_row(logits, int(where[0])), tid)
        loss_val = float(loss_node.value[0])

    attention = [[node.value[h] for h in range(H)] for node in attn_nodes]
    attention_grad = None
    param_grads = None
    if want_grads:
        tape.backward(loss_node)
        attention_grad = [
            [node.grad[h] if node.grad is not None else np.zeros_like(node.value[h])
             for h in range(H)]
            for node in attn_nodes
        ]
        param_grads = {
            name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
            for name, leaf in ((nm, P[nm]) for nm, _ in params.tensors())
        }

    return ForwardTrace(
        attention=attention,
        attention_grad=attention_grad,
        logits=logits.value,
        final_indices=kept.copy(),
        keep_map=keep_map,
        loss=loss_val,
        param_grads=param_grads,
    )


def _batched_loss_and_grads(arrays: Mapping[str, Array], cfg: ModelConfig,
                            toks: Array, answer_pos: int,
                            golds: Array) -> tuple[float, dict[str, Array]]:
    """Mean loss and mean parameter gradients over a uniform-shape batch.

    Training-only fast path: same arithmetic as per-example tape passes, laid
    out as (batch*seq, hidden) blocks so the work runs in a few large kernel
    calls. Gradients are exact (verified against the tape in tests); tiny
    float differences from the different summation order are expected.
    """
    from . import kernels

    B, n = toks.shape
    H, dh, d, m = cfg.heads, cfg.head_dim, cfg.hidden, cfg.ffn
    scale = 1.0 / math.sqrt(dh)
    rows = B * n

    mask2 = np.tril(np.ones((n, n), dtype=bool))
    mask_flat = np.ascontiguousarray(
        np.broadcast_to(mask2, (B * H, n, n))
    ).view(np.uint8).reshape(B * H * n, n)

    def split(flat: Array) -> Array:
        # (B*n, d) -> (B*H, n, dh)
        return np.ascontiguousarray(
            flat.reshape(B, n, H, dh).transpose(0, 2, 1, 3)
        ).reshape(B * H, n, dh)

    def merge(stacked: Array) -> Array:
        # (B*H, n, dh) -> (B*n, d)
        return np.ascontiguousarray(
            stacked.reshape(B, H, n, dh).transpose(0, 2, 1, 3)
        ).reshape(rows, d)

    x = (arrays["tok_emb"][toks] + arrays["pos_emb"][:n]).reshape(rows, d)
    caches = []
    for l in range(cfg.layers):
        p = {nm: arrays[f"layers.{l}.{nm}"] for nm in _LAYER_FIELDS}
        y1, xhat1, inv1 = kernels.layernorm(x, p["ln1_gain"], p["ln1_bias"], ad.LN_EPS)
        q3 = split(y1 @ p["wq"])
        k3 = split(y1 @ p["wk"])
        v3 = split(y1 @ p["wv"])
        scores = (q3 @ k3.transpose(0, 2, 1)) * scale
        probs = kernels.masked_softmax(
            np.ascontiguousarray(scores).reshape(-1, n), mask_flat
        ).reshape(B * H, n, n)
        ctx = merge(probs @ v3)
        x_attn = x + ctx @ p["wo"]
        y2, xhat2, inv2 = kernels.layernorm(x_attn, p["ln2_gain"], p["ln2_bias"], ad.LN_EPS)
        h1 = y2 @ p["w_in"]
        act = kernels.gelu(h1)
        x = x_attn + act @ p["w_out"]
        caches.append((y1, xhat1, inv1, q3, k3, v3, probs, ctx, y2, xhat2, inv2, h1, act))

    ans_rows = np.arange(B) * n + answer_pos
    xa = x[ans_rows]
    logits = xa @ arrays["head"]
    zmax = logits.max(axis=1, keepdims=True)
    ez = np.exp(logits - zmax)
    zsum = ez.sum(axis=1, keepdims=True)
    probs_out = ez / zsum
    gold_logits = logits[np.arange(B), golds]
    loss = float(np.mean(zmax[:, 0] + np.log(zsum[:, 0]) - gold_logits))

    grads = {nm: np.zeros_like(arr) for nm, arr in arrays.items()}
    dlogits = probs_out.copy()
    dlogits[np.arange(B), golds] -= 1.0
    dlogits /= B
    grads["head"] = xa.T @ dlogits
    dx = np.zeros((rows, d))
    dx[ans_rows] = dlogits @ arrays["head"].T

    for l in range(cfg.layers - 1, -1, -1):
        p = {nm: arrays[f"layers.{l}.{nm}"] for nm in _LAYER_FIELDS}
        g = {nm: grads[f"layers.{l}.{nm}"] for nm in _LAYER_FIELDS}
        y1, xhat1, inv1, q3, k3, v3, probs, ctx, y2, xhat2, inv2, h1, act = caches[l]

        # FFN branch: x = x_attn + gelu(LN2(x_attn) @ w_in) @ w_out
        g["w_out"] += act.T @ dx
        dact = dx @ p["w_out"].T
        dh1 = kernels.gelu_grad(h1, dact)
        g["w_in"] += y2.T @ dh1
        dy2 = dh1 @ p["w_in"].T
        dxa_ln, dgain2, dbias2 = kernels.layernorm_grad(dy2, xhat2, inv2, p["ln2_gain"])
        g["ln2_gain"] += dgain2
        g["ln2_bias"] += dbias2
        dx_attn = dx + dxa_ln

        # Attention branch: x_attn = x + merge(probs @ v3) @ wo
        g["wo"] += ctx.T @ dx_attn
        dctx = split(dx_attn @ p["wo"].T)
        dprobs = dctx @ v3.transpose(0, 2, 1)
        dv3 = probs.transpose(0, 2, 1) @ dctx
        dscores = kernels.masked_softmax_grad(
            probs.reshape(-1, n), np.ascontiguousarray(dprobs).reshape(-1, n), mask_flat
        ).reshape(B * H, n, n) * scale
        dq3 = dscores @ k3
        dk3 = dscores.transpose(0, 2, 1) @ q3
        dqf, dkf, dvf = merge(dq3), merge(dk3), merge(dv3)
        g["wq"] += y1.T @ dqf
        g["wk"] += y1.T @ dkf
        g["wv"] += y1.T @ dvf
        dy1 = dqf @ p["wq"].T + dkf @ p["wk"].T + dvf @ p["wv"].T
        dx_ln1, dgain1, dbias1 = kernels.layernorm_grad(dy1, xhat1, inv1, p["ln1_gain"])
        g["ln1_gain"] += dgain1
        g["ln1_bias"] += dbias1
        dx = dx_attn + dx_ln1

    dx3 = dx.reshape(B, n, d)
    np.add.at(grads["tok_emb"], toks.reshape(-1), dx)
    grads["pos_emb"][:n] = dx3.sum(axis=0)
    return loss, grads


@dataclass(frozen=True)
class TrainSpec:
    steps: int
    batch: int
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise ConfigError("steps and batch must be >= 1")
        # A zero learning rate is a legitimate no-op configuration.
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be non-negative (0 disables clipping)")


def train(params: ModelParams, dataset: Sequence, spec: TrainSpec) -> tuple[ModelParams, list[float]]:
    """Adam training on next-token loss at each example's answer position.

    Batches are drawn with replacement from a generator seeded by spec.seed.
    Returns fresh parameters and the per-step mean batch loss; the input
    parameters are not modified. Non-finite loss raises TrainingDivergedError.
    """
    if not dataset:
        raise ConfigError("dataset is empty")
    out = params.copy()
    names = [name for name, _ in out.tensors()]
    arrays = dict(out.tensors())
    m_state = {nm: np.zeros_like(arr) for nm, arr in arrays.items()}
    v_state = {nm: np.zeros_like(arr) for nm, arr in arrays.items()}
    rng = np.random.default_rng(spec.seed)
    losses: list[float] = []

    lengths = {len(ex.tokens) for ex in dataset}
    uniform = len(lengths) == 1

    for step in range(1, spec.steps + 1):
        idx = rng.integers(0, len(dataset), size=spec.batch)
        if uniform:
            toks = np.array([dataset[int(i)].tokens for i in idx], dtype=np.intp)
            golds = np.array([dataset[int(i)].gold for i in idx], dtype=np.intp)
            batch_loss, grads = _batched_loss_and_grads(
                arrays, out.config, toks, toks.shape[1] - 1, golds
            )
        else:
            grads = {nm: np.zeros_like(arr) for nm, arr in arrays.items()}
            batch_loss = 0.0
            for i in idx:
                ex = dataset[int(i)]
                tr = forward(out, ex.tokens, ex.layout, want_grads=True,
                             loss_target=(len(ex.tokens) - 1, ex.gold))
                batch_loss += tr.loss
                for nm in names:
                    grads[nm] += tr.param_grads[nm] / spec.batch
            batch_loss /= spec.batch
        losses.append(batch_loss)
        if not math.isfinite(batch_loss):
            raise TrainingDivergedError(step, batch_loss)

        gsq = 0.0
        for nm in names:
            gsq += float((grads[nm] ** 2).sum())
        gnorm = math.sqrt(gsq)
        if spec.clip_norm > 0 and gnorm > spec.clip_norm:
            factor = spec.clip_norm / gnorm
            for nm in names:
                grads[nm] *= factor

        bc1 = 1.0 - spec.beta1 ** step
        bc2 = 1.0 - spec.beta2 ** step
        for nm in names:
            g = grads[nm]
            m_state[nm] = spec.beta1 * m_state[nm] + (1.0 - spec.beta1) * g
            v_state[nm] = spec.beta2 * v_state[nm] + (1.0 - spec.beta2) * (g * g)
            update = (m_state[nm] / bc1) / (np.sqrt(v_state[nm] / bc2) + spec.adam_eps)
            arrays[nm] -= spec.learning_rate * update
    return out, losses


def generate(params: ModelParams, prompt: Sequence[int], layout: TokenLayout,
             max_new: int, schedule: "pruning.PruneSchedule | None" = None) -> list[int]:
    """Greedy decoding. A schedule applies during prefill; the image tokens it
    keeps are frozen and reused for every decode step, which (by causality)
    matches incremental decoding with a cache. Appended tokens extend the
    instruction segment and are never pruned."""
    cfg = params.config
    if max_new < 0:
        raise ConfigError("max_new must be non-negative")
    if max_new == 0:
        return []
    if len(prompt) + max_new > cfg.max_seq:
        raise ConfigError(
            f"prompt ({len(prompt)}) plus max_new ({max_new}) exceeds max_seq {cfg.max_seq}"
        )
    if schedule is not None and not schedule.stages:
        schedule = None

    prefill = forward(params, prompt, layout, schedule=schedule)
    frozen = None
    if schedule is not None:
        img_set = set(layout.img)
        frozen = {
            st.filter_layer: frozenset(
                int(o) for o in prefill.keep_map[st.filter_layer] if int(o) in img_set
            )
            for st in schedule.stages
        }

    out: list[int] = []
    cur = list(prompt)
    tr = prefill
    while True:
        row = np.flatnonzero(tr.final_indices == len(cur) - 1)
        tid = int(np.argmax(tr.logits[int(row[0])]))
        out.append(tid)
        cur.append(tid)
        if len(out) >= max_new:
            return out
        lay = layout.extended(len(cur) - layout.seq_len)
        tr = forward(params, cur, lay, frozen_keep=frozen)
