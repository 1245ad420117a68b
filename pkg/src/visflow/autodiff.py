"""Dense float64 tensors with tape-based reverse-mode gradients.

A GradTape records primitive operations in execution order; backward() walks
the record in reverse, accumulating gradients additively into each Tensor's
.grad slot. Values are NumPy float64 arrays and are treated as immutable once
wrapped. Tensors built with tape=None participate in forward math only, which
is how gradient-free passes avoid recording overhead.

Gradient flow stops at masked_row_softmax outputs only in the sense that
callers may replace the probabilities wholesale (interventions multiply them
by a 0/1 mask via mul_mask, which is itself differentiable).
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import DegenerateRowError, ShapeError, TapeError

Array = np.ndarray

LN_EPS = 1e-5


def _as_f64(value) -> Array:
    return np.ascontiguousarray(np.asarray(value, dtype=np.float64))


class Tensor:
    """A float64 array plus an optional slot on a gradient tape."""

    __slots__ = ("value", "tape", "grad")

    def __init__(self, value, tape: "GradTape | None" = None):
        self.value = _as_f64(value)
        self.tape = tape
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        taped = "taped" if self.tape is not None else "constant"
        return f"Tensor(shape={self.value.shape}, {taped})"


class GradTape:
    """Ordered record of primitive ops with named leaves.

    backward() runs once per tape; a second call is an error, as is calling
    it with a tensor recorded on a different tape.
    """

    def __init__(self):
        self._ops: list[Callable[[], None]] = []
        self._spent = False
        self.leaves: dict[str, Tensor] = {}

    def leaf(self, value, name: str | None = None) -> Tensor:
        t = Tensor(value, self)
        if name is not None:
            if name in self.leaves:
                raise TapeError(f"duplicate leaf name {name!r}")
            self.leaves[name] = t
        return t

    def record(self, backward_fn: Callable[[], None]) -> None:
        if self._spent:
            raise TapeError("tape already consumed by backward")
        self._ops.append(backward_fn)

    def backward(self, loss: Tensor) -> None:
        if self._spent:
            raise TapeError("backward already ran on this tape")
        if loss.tape is not self:
            raise TapeError("loss tensor was not recorded on this tape")
        self._spent = True
        loss.grad = np.ones_like(loss.value)
        for fn in reversed(self._ops):
            fn()

    def grad_of(self, name: str) -> Array:
        leaf = self.leaves[name]
        if leaf.grad is None:
            raise TapeError(f"no gradient accumulated for leaf {name!r}")
        return leaf.grad


def _accumulate(t: Tensor, g: Array, own: bool = False) -> None:
    # Unless the caller owns g (freshly allocated, never shared), copy on
    # first write: g may alias an upstream gradient shared with a sibling
    # input (e.g. both arguments of add receive the same array).
    if t.grad is None:
        t.grad = g if own else g.copy()
    else:
        t.grad += g


def _tape_of(*tensors: Tensor) -> "GradTape | None":
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise TapeError("operands recorded on different tapes")
    return tape


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add shapes {a.value.shape} vs {b.value.shape}")
    tape = _tape_of(a, b)
    out = Tensor(a.value + b.value, tape)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            if a.tape is not None:
                _accumulate(a, out.grad)
            if b.tape is not None:
                _accumulate(b, out.grad)
        tape.record(bwd)
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    tape = a.tape
    out = Tensor(a.value * factor, tape)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accumulate(a, out.grad * factor, own=True)
        tape.record(bwd)
    return out


def mul_mask(a: Tensor, mask) -> Tensor:
    """Elementwise product with a constant mask (used to zero attention edges).

    The mask must broadcast to the value's shape without resizing it, e.g. a
    (n, n) mask against (H, n, n) attention.
    """
    mask = _as_f64(mask)
    if np.broadcast_shapes(mask.shape, a.value.shape) != a.value.shape:
        raise ShapeError(f"mask shape {mask.shape} does not broadcast to {a.value.shape}")
    tape = a.tape
    out = Tensor(a.value * mask, tape)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accumulate(a, out.grad * mask, own=True)
        tape.record(bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shapes {av.shape} x {bv.shape}")
    tape = _tape_of(a, b)
    out = Tensor(av @ bv, tape)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            if a.tape is not None:
                _accumulate(a, g @ bv.T, own=True)
            if b.tape is not None:
                _accumulate(b, av.T @ g, own=True)
        tape.record(bwd)
    return out


def transpose(a: Tensor) -> Tensor:
    tape = a.tape
    out = Tensor(a.value.T, tape)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accumulate(a, out.grad.T.copy(), own=True)
        tape.record(bwd)
    return out


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul of stacked matrices: (H, n, k) @ (H, k, m)."""
    av, bv = a.value, b.value
    if av.ndim != 3 or bv.ndim != 3 or av.shape[0] != bv.shape[0] or av.shape[2] != bv.shape[1]:
        raise ShapeError(f"bmm shapes {av.shape} x {bv.shape}")
    tape = _tape_of(a, b)
    out = Tensor(av @ bv, tape)
    if tape is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            if a.tape is not None:
                _accumulate(a, g @ bv.transpose(0, 2, 1), own=True)
            if b.tape is not None:
                _accumulate(b, av.transpose(0, 2, 1) @ g, own=True)
        tape.record(bwd)
    return out


def swap_last2(a: Tensor) -> Tensor:
    """Transpose the trailing two axes of a stacked-matrix tensor."""
    if a.value.ndim != 3:
        raise ShapeError("swap_last2 expects a 3-D tensor")
    tape = a.tape
    out = Tensor(a.value.transpose(0, 2, 1), tape)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accumulate(a, out.grad.transpose(0, 2, 1).copy(), own=True)
        tape.record(bwd)
    return out


def split_heads(a: Tensor, heads: int) -> Tensor:
    """Reshape (n, heads*dh) into stacked per-head matrices (heads, n, dh)."""
    n, d = a.value.shape
    if d % heads:
        raise ShapeError(f"width {d} not divisible into {heads} heads")
    dh = d // heads
    tape = a.tape
    out = Tensor(np.ascontiguousarray(a.value.reshape(n, heads, dh).transpose(1, 0, 2)), tape)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accumulate(a, out.grad.transpose(1, 0, 2).copy().reshape(n, d), own=True)
        tape.record(bwd)
    return out


def merge_heads(a: Tensor) -> Tensor:
    """Inverse of split_heads: (heads, n, dh) back to (n, heads*dh)."""
    if a.value.ndim != 3:
        raise ShapeError("merge_heads expects a 3-D tensor")
    h, n, dh = a.value.shape
    tape = a.tape
    out = Tensor(np.ascontiguousarray(a.value.transpose(1, 0, 2)).reshape(n, h * dh), tape)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            _accumulate(a, out.grad.reshape(n, h, dh).transpose(1, 0, 2).copy(), own=True)
        tape.record(bwd)
    return out


def replace_slab(a: Tensor, index: int, value) -> Tensor:
    """Replace one leading-axis slab with a constant; gradient flows through
    every other slab and is zero at the replaced one."""
    if not (0 <= index < a.value.shape[0]):
        raise ShapeError(f"slab {index} out of range for {a.value.shape}")
    const = _as_f64(value)
    if const.shape != a.value.shape[1:]:
        raise ShapeError(f"slab shape {const.shape} vs {a.value.shape[1:]}")
    new = a.value.copy()
    new[index] = const
    tape = a.tape
    out = Tensor(new, tape)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            g = out.grad.copy()
            g[index] = 0.0
            _accumulate(a, g, own=True)
        tape.record(bwd)
    return out


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if not (0 <= lo < hi <= a.value.shape[1]):
        raise ShapeError(f"column slice [{lo}:{hi}] out of range for {a.value.shape}")
    tape = a.tape
    out = Tensor(a.value[:, lo:hi], tape)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            if a.grad is None:
                a.grad = np.zeros_like(a.value)
            a.grad[:, lo:hi] += out.grad
        tape.record(bwd)
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    tape = _tape_of(*parts)
    out = Tensor(np.concatenate([p.value for p in parts], axis=1), tape)
    if tape is not None:
        widths = [p.value.shape[1] for p in parts]
        def bwd():
            if out.grad is None:
                return
            lo = 0
            for p, w in zip(parts, widths):
                if p.tape is not None:
                    _accumulate(p, out.grad[:, lo:lo + w])
                lo += w
        tape.record(bwd)
    return out


def gather_rows(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= table.value.shape[0]):
        raise ShapeError("gather_rows index out of range")
    tape = table.tape
    out = Tensor(table.value[idx], tape)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            if table.grad is None:
                table.grad = np.zeros_like(table.value)
            np.add.at(table.grad, idx, out.grad)
        tape.record(bwd)
    return out


def take_row(a: Tensor, row: int) -> Tensor:
    """Extract one row of a 2-D tensor as a 1-D tensor."""
    if not (0 <= row < a.value.shape[0]):
        raise ShapeError(f"row {row} out of range for {a.value.shape}")
    tape = a.tape
    out = Tensor(a.value[row], tape)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            if a.grad is None:
                a.grad = np.zeros_like(a.value)
            a.grad[row] += out.grad
        tape.record(bwd)
    return out


def masked_row_softmax(scores: Tensor, mask) -> Tensor:
    """Row softmax restricted to allowed entries (mask truthy = allowed).

    Rows are the trailing axis: scores may be one (n, m) matrix or stacked
    matrices (H, n, m) sharing a 2-D mask. Disallowed entries are exactly
    zero in the output and excluded from the softmax domain. A row with no
    allowed entries raises DegenerateRowError naming the first such row.
    """
    v = scores.value
    if v.ndim not in (2, 3):
        raise ShapeError("masked_row_softmax expects a 2-D or 3-D tensor")
    allowed = np.asarray(mask, dtype=bool)
    if np.broadcast_shapes(allowed.shape, v.shape) != v.shape:
        raise ShapeError(f"mask shape {allowed.shape} does not broadcast to {v.shape}")
    dead = np.flatnonzero(~allowed.any(axis=-1))
    if dead.size:
        raise DegenerateRowError(int(dead[0]) % v.shape[-2])
    full = np.ascontiguousarray(np.broadcast_to(allowed, v.shape))
    mask_u8 = full.view(np.uint8).reshape(-1, v.shape[-1])
    flat = v.reshape(-1, v.shape[-1])
    probs = kernels.masked_softmax(flat, mask_u8).reshape(v.shape)
    tape = scores.tape
    out = Tensor(probs, tape)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            g = np.ascontiguousarray(out.grad).reshape(-1, v.shape[-1])
            p = out.value.reshape(-1, v.shape[-1])
            _accumulate(scores, kernels.masked_softmax_grad(p, g, mask_u8).reshape(v.shape),
                        own=True)
        tape.record(bwd)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    if x.value.ndim != 2:
        raise ShapeError("layer_norm expects a 2-D input")
    d = x.value.shape[1]
    if gain.value.shape != (d,) or bias.value.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},)")
    tape = _tape_of(x, gain, bias)
    y, xhat, inv_std = kernels.layernorm(x.value, gain.value, bias.value, eps)
    out = Tensor(y, tape)
    if tape is not None:
        gv = gain.value
        def bwd():
            if out.grad is None:
                return
            g = np.ascontiguousarray(out.grad)
            dx, dgain, dbias = kernels.layernorm_grad(g, xhat, inv_std, gv)
            if x.tape is not None:
                _accumulate(x, dx, own=True)
            if gain.tape is not None:
                _accumulate(gain, dgain, own=True)
            if bias.tape is not None:
                _accumulate(bias, dbias, own=True)
        tape.record(bwd)
    return out


def gelu(x: Tensor) -> Tensor:
    tape = x.tape
    out = Tensor(kernels.gelu(x.value), tape)
    if tape is not None:
        def bwd():
            if out.grad is None:
                return
            g = np.ascontiguousarray(out.grad)
            _accumulate(x, kernels.gelu_grad(x.value, g), own=True)
        tape.record(bwd)
    return out


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Softmax cross-entropy of a 1-D logit vector against a target id."""
    z = logits.value
    if z.ndim != 1:
        raise ShapeError("cross_entropy expects a 1-D logit vector")
    if not (0 <= target < z.shape[0]):
        raise ShapeError(f"target {target} out of range for {z.shape[0]} logits")
    m = float(z.max())
    e = np.exp(z - m)
    se = float(e.sum())
    loss = m + math.log(se) - float(z[target])
    tape = logits.tape
    out = Tensor(np.float64(loss), tape)
    if tape is not None:
        probs = e / se
        def bwd():
            if out.grad is None:
                return
            g = probs.copy()
            g[target] -= 1.0
            _accumulate(logits, g * out.grad, own=True)
        tape.record(bwd)
    return out


def finite_difference_check(f: Callable[[Mapping[str, Array]], float],
                            params: Mapping[str, Array],
                            grads: Mapping[str, Array],
                            eps: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    f is a pure scalar function of the parameter dict. Returns the worst
    relative error |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
    over every coordinate of every parameter. Non-finite objective values
    raise immediately.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = {name: np.array(arr, dtype=np.float64) for name, arr in params.items()}
    worst = 0.0
    for name, arr in work.items():
        analytic = np.asarray(grads[name], dtype=np.float64)
        if analytic.shape != arr.shape:
            raise ShapeError(f"gradient shape mismatch for {name!r}")
        flat = arr.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(work))
            flat[i] = orig - eps
            fm = float(f(work))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError("objective returned a non-finite value")
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(float(aflat[i]) - numeric) / max(1e-8, abs(float(aflat[i])) + abs(numeric))
            if err > worst:
                worst = err
        work[name] = arr
    return worst
