"""Kernel backend selection.

The compiled core (Cython) is preferred when importable; otherwise the NumPy
fallback is used. Set VISFLOW_KERNELS=pure or VISFLOW_KERNELS=compiled to
force a backend; forcing "compiled" raises if the extension is missing.

Both backends implement the same functions over C-contiguous float64 arrays:
masked_softmax(_grad), layernorm(_grad), gelu(_grad). Matrix products are
delegated to BLAS through NumPy in either case.
"""

import os

from . import pure

_forced = os.environ.get("VISFLOW_KERNELS")

if _forced == "pure":
    _impl = pure
elif _forced == "compiled":
    from . import _core as _impl
elif _forced:
    raise ImportError(f"unknown VISFLOW_KERNELS value: {_forced!r}")
else:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = pure

BACKEND = _impl.NAME

masked_softmax = _impl.masked_softmax
masked_softmax_grad = _impl.masked_softmax_grad
layernorm = _impl.layernorm
layernorm_grad = _impl.layernorm_grad
gelu = _impl.gelu
gelu_grad = _impl.gelu_grad


def available_backends() -> list[str]:
    names = ["pure"]
    try:
        from . import _core  # noqa: F401

        names.append("compiled")
    except ImportError:
        pass
    return names


def load_backend(name: str):
    """Return a backend module by name (used by tests and the benchmark)."""
    if name == "pure":
        return pure
    if name == "compiled":
        from . import _core

        return _core
    raise ValueError(f"unknown backend {name!r}")
