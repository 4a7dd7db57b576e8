"""Numeric kernel backends.

Two interchangeable implementations of the hot-path kernels exist:

* ``pybackend`` — pure numpy, always available; the reference semantics.
* ``compiled`` — a hybrid built on the ``_core`` Cython extension. The
  extension implements every kernel, but the hybrid only routes to C
  where fused loops beat numpy on training-sized inputs (row-wise
  softmax/cross-entropy, logit BCE, ragged embedding pooling and its
  scatter-add backward, Adam, sigmoid); dense matmul and plain
  elementwise maps stay on numpy's BLAS/SIMD paths, which naive C loops
  cannot match. ``benchmarks/bench_kernels.py`` reproduces the numbers.

Selection happens at import time; set ``LBI_KERNELS=python`` or
``LBI_KERNELS=compiled`` to force a backend (forcing ``compiled`` raises
if the extension is missing), or call :func:`set_backend` at runtime.
"""

import os
from types import SimpleNamespace

from . import pybackend

try:
    from . import _core
except ImportError:
    _core = None

KERNEL_NAMES = (
    "linear_fwd",
    "linear_bwd",
    "matmul",
    "tanh_fwd",
    "tanh_bwd",
    "relu_fwd",
    "relu_bwd",
    "sigmoid_fwd",
    "sigmoid_bwd",
    "softmax_fwd",
    "softmax_xent_fwd",
    "softmax_xent_bwd",
    "bce_logits_fwd",
    "bce_logits_bwd",
    "embed_meanpool_fwd",
    "embed_meanpool_bwd",
    "adam_step",
)

# kernels where the measured C loops win over numpy (see module docstring)
COMPILED_OVERRIDES = frozenset(
    {
        "sigmoid_fwd",
        "softmax_fwd",
        "softmax_xent_fwd",
        "softmax_xent_bwd",
        "bce_logits_fwd",
        "bce_logits_bwd",
        "embed_meanpool_fwd",
        "embed_meanpool_bwd",
        "adam_step",
    }
)

_BACKENDS = {"python": pybackend}
if _core is not None:
    _BACKENDS["compiled"] = SimpleNamespace(
        **{
            name: getattr(_core if name in COMPILED_OVERRIDES else pybackend, name)
            for name in KERNEL_NAMES
        }
    )


def available_backends():
    return tuple(sorted(_BACKENDS))


def set_backend(name):
    """Switch the active backend; returns the previous backend's name."""
    global _impl, _active
    if name not in _BACKENDS:
        raise ValueError(
            f"unknown kernel backend {name!r}; available: {available_backends()}"
        )
    previous = _active
    _impl = _BACKENDS[name]
    _active = name
    return previous


def get_backend():
    return _active


_forced = os.environ.get("LBI_KERNELS", "").strip().lower()
if _forced and _forced not in _BACKENDS:
    if _forced == "compiled":
        raise ImportError(
            "LBI_KERNELS=compiled but the compiled kernel extension is not "
            "built; install with `pip install -e . --no-build-isolation`"
        )
    raise ImportError(f"LBI_KERNELS={_forced!r} is not a known backend")

_active = _forced or ("compiled" if _core is not None else "python")
_impl = _BACKENDS[_active]


def __getattr__(name):
    if name in KERNEL_NAMES:
        return getattr(_impl, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
