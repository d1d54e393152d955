"""Tensor parallelism: column-sharded then row-sharded GEMM pair with one all-reduce."""

from __future__ import annotations

import numpy as np

from ..numerics import ContractError, as_tensor, matmul
from .mesh import CollectiveTrace, all_reduce


def shard_columns(w, tp: int) -> list[np.ndarray]:
    w = as_tensor(w)
    if w.shape[-1] % tp:
        raise ContractError(f"tp={tp} does not divide output width {w.shape[-1]}")
    return [p.copy() for p in np.split(w, tp, axis=-1)]


def shard_rows(w, tp: int) -> list[np.ndarray]:
    w = as_tensor(w)
    if w.shape[0] % tp:
        raise ContractError(f"tp={tp} does not divide input width {w.shape[0]}")
    return [p.copy() for p in np.split(w, tp, axis=0)]


def tp_linear_forward(x, w1, w2, tp: int, trace: CollectiveTrace | None = None,
                      b1=None, b2=None, activation=None, tag: str = "tp") -> np.ndarray:
    """``act(x @ w1 + b1) @ w2 + b2`` with ``w1`` split by columns and ``w2`` by rows.

    Each rank computes a partial product of the full output; partials are summed
    with a single all-reduce. ``b2`` is added once, after the reduction.
    """
    x = as_tensor(x)
    w1_parts = shard_columns(w1, tp)
    w2_parts = shard_rows(w2, tp)
    b1_parts = [None] * tp if b1 is None else np.split(as_tensor(b1), tp)
    partials = []
    for r in range(tp):
        h = matmul(x, w1_parts[r])
        if b1_parts[r] is not None:
            h = h + b1_parts[r]
        if activation is not None:
            h = activation(h)
        partials.append(matmul(h, w2_parts[r]))
    out = all_reduce(partials, "tp", trace, tag)[0]
    return out if b2 is None else out + as_tensor(b2)
