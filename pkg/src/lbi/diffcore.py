"""Dense float64 tensors, forward ops, per-layer backward rules, and Adam.

The model family in this package is small and closed, so gradients are
hand-derived per layer instead of taped: every forward op has a matching
``*_backward`` rule, and :func:`finite_diff_grad` provides the
independent central-difference oracle used to check them.

Everything is single-threaded and deterministic: all randomness flows
from explicit seeds through :func:`make_rng` (PCG64), and reductions run
in a fixed order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Iterator

import numpy as np

from . import _kernels as K
from .errors import ConfigError, ContractError, NumericError, ShapeError

Tensor = np.ndarray  # carrier type: C-contiguous float64 ndarray


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64) seeded explicitly."""
    return np.random.Generator(np.random.PCG64(seed))


def as_tensor(data, shape=None) -> Tensor:
    """Coerce to a C-contiguous float64 array, optionally reshaping."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def ensure_finite(arr: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}", context=what)
    return arr


def _require_2d(x: Tensor, name: str) -> None:
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.shape}")


# ---------------------------------------------------------------------------
# Forward ops (with shape validation) and their backward rules.
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, "a")
    _require_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}"
        )
    return K.matmul(as_tensor(a), as_tensor(b))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(
            f"bias of shape {b.shape} does not match trailing dim of {x.shape}"
        )
    return x + b


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w.T + b with full shape validation."""
    _require_2d(x, "x")
    _require_2d(w, "w")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"linear: input dim {x.shape[1]} != weight fan-in {w.shape[1]}"
        )
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    return K.linear_fwd(as_tensor(x), as_tensor(w), as_tensor(b))


def linear_backward(x: Tensor, w: Tensor, dy: Tensor, need_dx: bool = True):
    """Returns (dx, dw, db) for y = x @ w.T + b."""
    if dy.shape != (x.shape[0], w.shape[0]):
        raise ShapeError(
            f"linear_backward: dy shape {dy.shape} != ({x.shape[0]}, {w.shape[0]})"
        )
    return K.linear_bwd(as_tensor(x), as_tensor(w), as_tensor(dy), need_dx)


def tanh(x: Tensor) -> Tensor:
    return K.tanh_fwd(as_tensor(x))


def tanh_backward(y: Tensor, dy: Tensor) -> Tensor:
    """dx from the cached output y = tanh(x)."""
    return K.tanh_bwd(y, dy)


def relu(x: Tensor) -> Tensor:
    return K.relu_fwd(as_tensor(x))


def relu_backward(x: Tensor, dy: Tensor) -> Tensor:
    return K.relu_bwd(x, dy)


def sigmoid(x: Tensor) -> Tensor:
    return K.sigmoid_fwd(as_tensor(x))


def sigmoid_backward(y: Tensor, dy: Tensor) -> Tensor:
    return K.sigmoid_bwd(y, dy)


def softmax(x: Tensor) -> Tensor:
    """Row softmax; rows sum to 1 within 1e-12 and entries lie in (0, 1)."""
    _require_2d(x, "x")
    return K.softmax_fwd(as_tensor(x))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-example cross-entropy losses (all >= 0)."""
    _require_2d(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"labels shape {labels.shape} != ({logits.shape[0]},)"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(
            f"labels must lie in [0, {logits.shape[1]}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    losses, _ = K.softmax_xent_fwd(as_tensor(logits), labels)
    return losses


def binary_cross_entropy(p: Tensor, y: Tensor) -> Tensor:
    """Per-example BCE on probabilities; callers keep p inside (0, 1)."""
    p = as_tensor(p)
    y = as_tensor(y)
    if p.shape != y.shape:
        raise ShapeError(f"probability shape {p.shape} != label shape {y.shape}")
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def scale(x: Tensor, alpha: float) -> Tensor:
    return as_tensor(x) * float(alpha)


def add(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise add: shapes {a.shape} vs {b.shape}")
    return a + b


# ---------------------------------------------------------------------------
# Parameter collections.
# ---------------------------------------------------------------------------


class ParameterSet:
    """Ordered, named collection of float64 tensors.

    Iteration order is the insertion order and is stable, which makes
    ``flatten``/``unflatten`` a bit-exact round trip.
    """

    __slots__ = ("_tensors",)

    def __init__(self, items: Iterable[tuple[str, Tensor]] | dict[str, Tensor]):
        pairs = items.items() if isinstance(items, dict) else items
        self._tensors: dict[str, Tensor] = {}
        for name, tensor in pairs:
            if name in self._tensors:
                raise ConfigError(f"duplicate parameter name {name!r}")
            self._tensors[name] = as_tensor(tensor)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        value = as_tensor(value)
        if name in self._tensors and self._tensors[name].shape != value.shape:
            raise ShapeError(
                f"cannot replace {name!r} of shape {self._tensors[name].shape} "
                f"with shape {value.shape}"
            )
        self._tensors[name] = value

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def copy(self) -> "ParameterSet":
        return ParameterSet((n, t.copy()) for n, t in self.items())

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet((n, np.zeros_like(t)) for n, t in self.items())

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def flatten(self) -> Tensor:
        if not self._tensors:
            return np.empty(0)
        return np.concatenate([t.reshape(-1) for t in self._tensors.values()])

    def unflatten(self, vec: Tensor) -> "ParameterSet":
        vec = as_tensor(vec).reshape(-1)
        if vec.size != self.n_params:
            raise ShapeError(
                f"flat vector of length {vec.size} does not match "
                f"{self.n_params} parameters"
            )
        out = []
        pos = 0
        for name, t in self.items():
            out.append((name, vec[pos : pos + t.size].reshape(t.shape).copy()))
            pos += t.size
        return ParameterSet(out)

    def add_scaled(self, other: "ParameterSet", alpha: float) -> "ParameterSet":
        """New set equal to self + alpha * other (shapes must match)."""
        if self.names != other.names:
            raise ShapeError("parameter sets have different names")
        return ParameterSet(
            (n, t + alpha * other[n]) for n, t in self.items()
        )

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(t * t)) for t in self._tensors.values())))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self._tensors.values())


# ---------------------------------------------------------------------------
# Optimizer.
# ---------------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam with optional decoupled weight decay.

    The decay multiplies parameters by ``1 - lr * weight_decay`` after
    the Adam update so that tests stay deterministic about ordering.
    """

    def __init__(
        self,
        params: ParameterSet,
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if lr <= 0.0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        beta1, beta2 = betas
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {betas}")
        if weight_decay < 0.0:
            raise ConfigError(f"weight decay must be >= 0, got {weight_decay}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = params.zeros_like()
        self.v = params.zeros_like()

    def step(self, params: ParameterSet, grads: ParameterSet) -> None:
        """Update ``params`` in place from ``grads``."""
        if params.names != self.m.names or grads.names != self.m.names:
            raise ShapeError("parameter/gradient names do not match optimizer state")
        self.t += 1
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} != parameter shape {p.shape} "
                    f"for {name!r}"
                )
            K.adam_step(
                p, g, self.m[name], self.v[name], self.t,
                self.lr, self.beta1, self.beta2, self.eps, self.weight_decay,
            )


# ---------------------------------------------------------------------------
# Finite-difference oracle.
# ---------------------------------------------------------------------------


def _eval_scalar(f: Callable[[ParameterSet], float], params: ParameterSet) -> float:
    out = f(params)
    if np.ndim(out) != 0:
        raise ContractError(
            f"objective must return a scalar, got shape {np.shape(out)}"
        )
    return float(out)


def finite_diff_grad(
    f: Callable[[ParameterSet], float],
    params: ParameterSet,
    step: float = 1e-5,
) -> ParameterSet:
    """Central differences (f(p+h) - f(p-h)) / 2h per coordinate."""
    if step <= 0.0:
        raise ConfigError(f"step must be positive, got {step}")
    flat = params.flatten()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = _eval_scalar(f, params.unflatten(flat))
        flat[i] = orig - step
        lo = _eval_scalar(f, params.unflatten(flat))
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return params.unflatten(grad)


def gradient_rel_error(analytic: ParameterSet, numeric: ParameterSet) -> float:
    """Two-sided relative error between two gradient sets."""
    a = analytic.flatten()
    n = numeric.flatten()
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), 1e-12)
    return float(np.linalg.norm(a - n)) / denom
