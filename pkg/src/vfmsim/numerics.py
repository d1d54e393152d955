"""Deterministic float64 kernels used as the single-device oracle.

Arrays are plain ``numpy.ndarray`` objects of dtype float64. The one kernel
that does not defer to numpy's reduction order is :func:`matmul`, which
accumulates over the inner dimension strictly left to right so that results
are reproducible bit-for-bit and independent of how rows are sharded.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Iterator

import numpy as np

__all__ = [
    "ContractError",
    "SeededRng",
    "as_tensor",
    "matmul",
    "softmax_lastdim",
    "reference_attention",
    "layer_norm",
    "per_head_l2_normalize",
    "flop_counter",
    "FlopCounter",
]


class ContractError(ValueError):
    """Raised when an operation is called outside its declared preconditions."""


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr


class SeededRng:
    """Counter-based (Philox) generator; ``split`` derives independent child streams."""

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = _key
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *_key]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def split(self, index: int) -> "SeededRng":
        return SeededRng(self.seed, self._key + (int(index),))

    def normal(self, shape=(), loc=0.0, scale=1.0) -> np.ndarray:
        return self._gen.normal(loc, scale, size=shape)

    def uniform(self, shape=(), low=0.0, high=1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high=None, shape=None):
        return self._gen.integers(low, high, size=shape)

    def gamma(self, shape_k, scale, size=None):
        return self._gen.gamma(shape_k, scale, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# --- FLOP instrumentation -------------------------------------------------

class FlopCounter:
    def __init__(self) -> None:
        self.matmul_flops = 0

    def add(self, n: int) -> None:
        self.matmul_flops += n


_active_counter: contextvars.ContextVar[FlopCounter | None] = contextvars.ContextVar(
    "_active_counter", default=None
)


@contextlib.contextmanager
def flop_counter() -> Iterator[FlopCounter]:
    """Count ``2*m*k*n`` for every :func:`matmul` executed inside the block."""
    counter = FlopCounter()
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


# --- kernels ----------------------------------------------------------------

def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed left-to-right accumulation over the inner dim.

    Accepts ``a`` of shape ``[..., m, k]`` and ``b`` of shape ``[k, n]``; leading
    dims of ``a`` are treated as extra rows. Each output element equals
    ``((a0*b0 + a1*b1) + a2*b2) + ...`` starting from 0.0.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 1 or b.ndim != 2:
        raise ContractError(f"matmul expects a[..., m, k] and b[k, n], got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ContractError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    k = b.shape[0]
    lead = a.shape[:-1]
    a2 = a.reshape(-1, k)
    out = np.zeros((a2.shape[0], b.shape[1]), dtype=np.float64)
    for j in range(k):
        out += a2[:, j : j + 1] * b[j : j + 1, :]
    counter = _active_counter.get()
    if counter is not None:
        counter.add(2 * a2.shape[0] * k * b.shape[1])
    return out.reshape(*lead, b.shape[1])


def softmax_lastdim(x) -> np.ndarray:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ContractError("softmax needs a last extent >= 1")
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def reference_attention(q, k, v, mask=None, scale: float | None = None) -> np.ndarray:
    """Serial scaled dot-product attention for a single head.

    ``q`` is ``[sq, dh]``, ``k``/``v`` are ``[skv, dh]``/``[skv, dv]``. ``mask`` is a
    boolean ``[sq, skv]`` array where True means "may attend". A query row with
    no admissible key produces a zero output row.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ContractError("reference_attention expects 2-D q, k, v")
    if q.shape[1] != k.shape[1]:
        raise ContractError(f"q/k head dims differ: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ContractError(f"k/v lengths differ: {k.shape} vs {v.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[1])
    scores = matmul(q, k.T) * scale
    if mask is None:
        return matmul(softmax_lastdim(scores), v)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise ContractError(f"mask shape {mask.shape} does not match scores {scores.shape}")
    live = mask.any(axis=-1)
    scores = np.where(mask, scores, -np.inf)
    scores[~live] = 0.0
    probs = softmax_lastdim(scores)
    probs[~live] = 0.0
    return matmul(probs, v)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-6) -> np.ndarray:
    x = as_tensor(x)
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    if gamma is not None:
        y = y * as_tensor(gamma)
    if beta is not None:
        y = y + as_tensor(beta)
    return y


def per_head_l2_normalize(x, scale=None) -> np.ndarray:
    """Normalize every ``(token, head)`` vector of ``x[..., H, dh]`` to unit L2 norm.

    ``scale`` (shape ``[dh]``) is a learnable gain applied after normalization.
    Zero vectors are passed through unchanged.
    """
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-1] < 1:
        raise ContractError("per-head normalization expects [..., H, dh] with dh >= 1")
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    safe = np.where(norm > 0.0, norm, 1.0)
    y = x / safe
    if scale is not None:
        y = y * as_tensor(scale)
    return y
