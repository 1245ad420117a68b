"""Visual-information-flow analysis on a small trainable transformer.

Subpackages and modules:

kernels
    Numerical primitives (softmax, layer norm, GELU) with a compiled
    extension and a pure NumPy fallback, selected at import time.
autodiff
    Reverse-mode tape over float64 arrays.
model
    Decoder-only transformer: build, forward with trace capture, train,
    greedy generation.
layout / tasks
    System / image / instruction token segmentation and the synthetic
    color-grid lookup task.
saliency / perturb / prune / cost
    Attention-saliency metrics, attention-flow interventions, image-token
    pruning schedules, and the analytical FLOPs model.
harness / cli
    Experiment configuration, checkpointing, and the command line.
"""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
