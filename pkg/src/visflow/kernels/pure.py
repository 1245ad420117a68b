"""NumPy implementations of the hot kernels.

All functions take and return float64 arrays. Masks are uint8 (1 = allowed).
Callers guarantee at least one allowed entry per mask row; degenerate rows
are rejected one level up, before the kernel is reached.
"""

import numpy as np

NAME = "pure"

# GELU tanh approximation constants.
_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax over the allowed entries; disallowed entries are exactly 0."""
    allowed = mask.astype(bool)
    shifted = np.where(allowed, scores, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def masked_softmax_grad(probs: np.ndarray, grad_out: np.ndarray,
                        mask: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. pre-softmax scores given the output probabilities.

    Disallowed entries carry probs == 0, so their score gradient is exactly 0
    and the row inner product already excludes them; the mask argument exists
    for interface parity with the compiled backend.
    """
    dot = (probs * grad_out).sum(axis=1, keepdims=True)
    return probs * (grad_out - dot)


def layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
              eps: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row layer norm. Returns (y, xhat, inv_std) for reuse in the backward."""
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gain + bias, xhat, inv_std[:, 0]


def layernorm_grad(grad_out: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray,
                   gain: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dgain, dbias) for layernorm."""
    dxhat = grad_out * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = inv_std[:, None] * (dxhat - m1 - xhat * m2)
    dgain = (grad_out * xhat).sum(axis=0)
    dbias = grad_out.sum(axis=0)
    return dx, dgain, dbias


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    u = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_grad(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of the tanh-approximated GELU."""
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + _GELU_A * x2))
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return grad_out * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
