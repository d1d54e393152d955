"""Sequence-parallel attention: ring (context parallel) and head-scatter (Ulysses) variants.

Both take per-device shards of ``[B, s_local, H, dh]`` (2-D ``[s_local, dh]``
shards are promoted to one sample and one head) sharded along the sequence.
"""

from __future__ import annotations

import math

import numpy as np

from ..dit import multihead_attention
from ..numerics import ContractError, matmul
from .mesh import CollectiveTrace, ShardedTensor, _shards_of, all_to_all, p2p


def _promote(shards):
    shards = _shards_of(shards)
    if shards[0].ndim == 2:
        return [s[None, :, None, :] for s in shards], True
    if shards[0].ndim != 4:
        raise ContractError("attention shards must be [s, dh] or [B, s, H, dh]")
    return shards, False


def _block_mask(mask, b, rows: slice, cols: slice):
    if mask is None:
        return None
    m = mask[b] if mask.ndim == 3 else mask
    return m[rows, cols]


def ring_attention_cp(q, k, v, mask=None, trace: CollectiveTrace | None = None, axis: str = "cp", tag: str = "cp"):
    """Blockwise attention over a simulated ring of ``cp`` devices.

    Device ``i`` keeps its query block and, at round ``r``, holds the KV block
    that originated on device ``(i - r) mod cp``. Partial results are merged with
    a running max / normalizer (log-sum-exp) so the final output equals the
    serial softmax. KV blocks move ``cp - 1`` times; each move is one recorded
    P2P round carrying every device's K and V block.
    """
    qs, squeeze = _promote(q)
    ks, _ = _promote(k)
    vs, _ = _promote(v)
    cp = len(qs)
    if not (len(ks) == len(vs) == cp):
        raise ContractError("q, k and v must have one shard per device")
    s_loc = qs[0].shape[1]
    if any(x.shape[1] != s_loc for x in (*qs, *ks, *vs)):
        raise ContractError("sequence shards must be equal-sized")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-1] != s_loc * cp or mask.shape[-2] != s_loc * cp:
            raise ContractError(f"mask {mask.shape} inconsistent with global length {s_loc * cp}")

    if cp == 1:
        out = [multihead_attention(qs[0], ks[0], vs[0], mask)]
        return [o[0, :, 0, :] for o in out] if squeeze else out

    B, _, H, dh = qs[0].shape
    dv = vs[0].shape[-1]
    scale = 1.0 / math.sqrt(dh)
    run_max = [np.full((B, H, s_loc, 1), -np.inf) for _ in range(cp)]
    run_sum = [np.zeros((B, H, s_loc, 1)) for _ in range(cp)]
    acc = [np.zeros((B, H, s_loc, dv)) for _ in range(cp)]
    held_k, held_v = list(ks), list(vs)

    for r in range(cp):
        for i in range(cp):
            j = (i - r) % cp
            rows = slice(i * s_loc, (i + 1) * s_loc)
            cols = slice(j * s_loc, (j + 1) * s_loc)
            for b in range(B):
                m = _block_mask(mask, b, rows, cols)
                for h in range(H):
                    scores = matmul(qs[i][b, :, h], held_k[i][b, :, h].T) * scale
                    if m is not None:
                        scores = np.where(m, scores, -np.inf)
                    blk_max = scores.max(axis=-1, keepdims=True)
                    new_max = np.maximum(run_max[i][b, h], blk_max)
                    safe = np.where(np.isfinite(new_max), new_max, 0.0)
                    alpha = np.exp(run_max[i][b, h] - safe)
                    p = np.exp(scores - safe)
                    run_sum[i][b, h] = run_sum[i][b, h] * alpha + p.sum(axis=-1, keepdims=True)
                    acc[i][b, h] = acc[i][b, h] * alpha + matmul(p, held_v[i][b, :, h])
                    run_max[i][b, h] = new_max
        if r < cp - 1:
            # every device forwards its held KV block to its ring successor
            n_el = sum(x.size for x in held_k) + sum(x.size for x in held_v)
            p2p(n_el, cp, axis, trace, tag)
            held_k = [held_k[(i - 1) % cp] for i in range(cp)]
            held_v = [held_v[(i - 1) % cp] for i in range(cp)]

    out = []
    for i in range(cp):
        l = run_sum[i]
        o = np.where(l > 0.0, acc[i] / np.where(l > 0.0, l, 1.0), 0.0)
        out.append(o.transpose(0, 2, 1, 3))
    return [o[0, :, 0, :] for o in out] if squeeze else out


def ulysses_attention(q, k, v, attend, trace: CollectiveTrace | None = None, axis: str = "cp", tag: str = "ulysses"):
    """Head-scatter attention: 3 all-to-alls in (q, k, v), local attention, 1 all-to-all out.

    ``attend(q, k, v)`` receives full-sequence, head-sharded ``[B, s, H/cp, dh]``
    arrays and returns the attention output of the same layout.
    """
    qs, _ = _promote(q)
    ks, _ = _promote(k)
    vs, _ = _promote(v)
    cp = len(qs)
    if qs[0].shape[2] % cp:
        raise ContractError(f"cp={cp} must divide the head count {qs[0].shape[2]}")
    gathered = [all_to_all(ShardedTensor(list(x), axis, 1), split_dim=2, concat_dim=1, trace=trace, tag=tag) for x in (qs, ks, vs)]
    local = [attend(gathered[0].shards[i], gathered[1].shards[i], gathered[2].shards[i]) for i in range(cp)]
    back = all_to_all(ShardedTensor(local, axis, 2), split_dim=1, concat_dim=2, trace=trace, tag=tag)
    return back.shards
