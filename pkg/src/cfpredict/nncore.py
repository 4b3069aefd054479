"""Small deterministic numeric core.

Matrices are plain float64 numpy arrays. Layers elsewhere in the package do
explicit forward/backward passes on top of the helpers here; there is no
autodiff graph.

Random numbers come from :class:`Rng`, which wraps numpy's PCG64 bit
generator. The stream for a given seed is fixed by PCG64's published
algorithm, so results are reproducible across platforms.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidRate, ShapeMismatch

DTYPE = np.float64

# Set CFPREDICT_DEBUG=1 to assert finiteness of every op output.
DEBUG_FINITE = os.environ.get("CFPREDICT_DEBUG", "0").lower() in {"1", "true", "yes"}


def check_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if DEBUG_FINITE and not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got shape {a.shape}")
    return a


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul")


def _same_shape(a, b, op: str) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op} {a.shape} vs {b.shape}")
    return a, b


def add(a, b) -> np.ndarray:
    a, b = _same_shape(a, b, "add")
    return check_finite(a + b, "add")


def sub(a, b) -> np.ndarray:
    a, b = _same_shape(a, b, "sub")
    return check_finite(a - b, "sub")


def hadamard(a, b) -> np.ndarray:
    a, b = _same_shape(a, b, "hadamard")
    return check_finite(a * b, "hadamard")


def scale(a, k: float) -> np.ndarray:
    return check_finite(as_matrix(a) * k, "scale")


def transpose(a) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(a).T)


def concat_cols(*mats) -> np.ndarray:
    ms = [as_matrix(m) for m in mats]
    if len({m.shape[0] for m in ms}) > 1:
        raise ShapeMismatch("concat_cols: row counts differ")
    return np.concatenate(ms, axis=1)


def slice_cols(a, start: int, stop: int) -> np.ndarray:
    a = as_matrix(a)
    if not 0 <= start <= stop <= a.shape[1]:
        raise ShapeMismatch(f"slice_cols [{start}:{stop}] of {a.shape}")
    return a[:, start:stop].copy()


# ---------------------------------------------------------------------------
# activations; *_grad functions take the activation OUTPUT


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad(y):
    return y * (1.0 - y)


def tanh_act(x):
    return np.tanh(np.asarray(x, dtype=DTYPE))


def tanh_grad(y):
    return 1.0 - y * y


def relu(x):
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def relu_grad(y):
    return (y > 0).astype(DTYPE)


def softmax_rows(x):
    """Row-wise softmax over the last axis, max-subtracted."""
    x = np.asarray(x, dtype=DTYPE)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y, dy):
    """Gradient wrt the logits given softmax output ``y`` and upstream ``dy``."""
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# loss


def mae_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean absolute error and its subgradient (sign(0) taken as 0)."""
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mae_loss {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


# ---------------------------------------------------------------------------
# randomness


class Rng:
    """Seeded random stream backed by numpy's PCG64."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed & 0xFFFFFFFFFFFFFFFF))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(loc, scale, size=shape)

    def poisson(self, lam, shape=None) -> np.ndarray:
        return self._gen.poisson(lam, size=shape)

    def gamma(self, shape_k: float, scale: float, shape=None) -> np.ndarray:
        return self._gen.gamma(shape_k, scale, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# dropout


def dropout_forward(x, p: float, rng: Rng | None, training: bool) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout. Returns the output and the multiplicative mask."""
    if not 0.0 <= p < 1.0:
        raise InvalidRate(f"dropout rate must be in [0, 1), got {p}")
    x = np.asarray(x, dtype=DTYPE)
    if not training or p == 0.0:
        return x.copy(), np.ones_like(x)
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = rng.uniform(x.shape) >= p
    mask = keep * (1.0 / (1.0 - p))
    return x * mask, mask


def dropout_backward(upstream, mask) -> np.ndarray:
    return np.asarray(upstream, dtype=DTYPE) * mask


# ---------------------------------------------------------------------------
# parameters and optimizer


@dataclass(eq=False)
class Param:
    value: np.ndarray
    name: str = ""
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


def adam_step(
    params: Iterable[Param],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int = 1,
) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    if t < 1:
        raise ValueError("adam step counter starts at 1")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p in params:
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / bc1
        v_hat = p.adam_v / bc2
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


def clip_grad_norm(params: Sequence[Param], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(math.fsum(float((p.grad * p.grad).sum()) for p in params))
    if total > max_norm > 0:
        k = max_norm / total
        for p in params:
            p.grad *= k
    return total


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[], float], params: Sequence[Param], epsilon: float = 1e-5) -> float:
    """Compare the analytic gradients already stored in ``params`` against
    central differences of ``f``.

    ``f`` must re-evaluate the scalar objective from the current parameter
    values (dropout disabled or its mask frozen). Returns the maximum over all
    entries of ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        analytic = p.grad.reshape(-1).copy()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = f()
            flat[i] = orig - epsilon
            fm = f()
            flat[i] = orig
            num = (fp - fm) / (2.0 * epsilon)
            a = analytic[i]
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    return worst
