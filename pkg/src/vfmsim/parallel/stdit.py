"""Spatial-temporal DiT layer under hybrid sharding.

Full attention runs context-parallel on the sequence-sharded layout; spatial
and temporal attention run data-parallel on whole frames / whole pixel tracks.
Layout changes between them are single all-to-all exchanges.

Token order inside a sample is frame-major: token ``ti * (h*w) + p``.
Every layout shards a canonical row order evenly across ``cp`` devices:

* FullSeq  ``[b, S/cp, d]``: device i holds tokens ``[i*S/cp, (i+1)*S/cp)`` of every sample
* Spatial  ``[(b*t)/cp, h*w, d]``: frames in ``(sample, frame)`` order
* Temporal ``[(b*h*w)/cp, t, d]``: pixel tracks in ``(sample, pixel)`` order
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from ..dit import merge_heads, multihead_attention, split_heads
from ..numerics import ContractError, SeededRng, as_tensor, matmul
from .attention import ring_attention_cp, ulysses_attention
from .mesh import CollectiveTrace, ShardedTensor, exchange


class Variant(str, Enum):
    FULLSEQ = "FullSeq"
    SPATIAL = "Spatial"
    TEMPORAL = "Temporal"


_NEXT = {Variant.FULLSEQ: Variant.SPATIAL, Variant.SPATIAL: Variant.TEMPORAL, Variant.TEMPORAL: Variant.FULLSEQ}


@dataclass(frozen=True)
class StditLayout:
    variant: Variant
    b: int
    h: int
    w: int
    t: int
    d: int
    cp: int = 1

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if min(self.b, self.h, self.w, self.t, self.d, self.cp) < 1:
            raise ContractError(f"layout extents must be positive: {self}")
        if self.rows % self.cp:
            raise ContractError(f"cp={self.cp} does not divide {self.rows} for {self.variant.value}")

    @property
    def hw(self) -> int:
        return self.h * self.w

    @property
    def seq(self) -> int:
        return self.hw * self.t

    @property
    def rows(self) -> int:
        """The product that is split across devices."""
        if self.variant is Variant.FULLSEQ:
            return self.seq
        if self.variant is Variant.SPATIAL:
            return self.b * self.t
        return self.b * self.hw

    @property
    def local_shape(self) -> tuple[int, int, int]:
        if self.variant is Variant.FULLSEQ:
            return (self.b, self.seq // self.cp, self.d)
        if self.variant is Variant.SPATIAL:
            return (self.b * self.t // self.cp, self.hw, self.d)
        return (self.b * self.hw // self.cp, self.t, self.d)

    def to(self, variant) -> "StditLayout":
        return replace(self, variant=Variant(variant))

    def global_ids(self, device: int) -> np.ndarray:
        """Global token id ``sample * S + token`` of every local row, shaped like the local tensor minus ``d``."""
        n0, n1, _ = self.local_shape
        if self.variant is Variant.FULLSEQ:
            bb = np.arange(self.b)[:, None]
            tok = device * n1 + np.arange(n1)[None, :]
            return bb * self.seq + tok
        if self.variant is Variant.SPATIAL:
            f = device * n0 + np.arange(n0)[:, None]
            bb, ti = f // self.t, f % self.t
            return bb * self.seq + ti * self.hw + np.arange(n1)[None, :]
        r = device * n0 + np.arange(n0)[:, None]
        bb, p = r // self.hw, r % self.hw
        return bb * self.seq + np.arange(n1)[None, :] * self.hw + p

    def placement(self) -> tuple[np.ndarray, np.ndarray]:
        """``(device, flat local position)`` for every global token id."""
        dev = np.empty(self.b * self.seq, dtype=np.int64)
        pos = np.empty_like(dev)
        for j in range(self.cp):
            ids = self.global_ids(j).ravel()
            dev[ids] = j
            pos[ids] = np.arange(ids.size)
        return dev, pos

    def shard(self, x) -> ShardedTensor:
        """Distribute a global ``[b, S, d]`` tensor into this layout."""
        x = as_tensor(x)
        if x.shape != (self.b, self.seq, self.d):
            raise ContractError(f"global tensor must be {(self.b, self.seq, self.d)}, got {x.shape}")
        rows = x.reshape(-1, self.d)
        shards = [rows[self.global_ids(j).ravel()].reshape(self.local_shape) for j in range(self.cp)]
        return ShardedTensor(shards, "cp", 0)

    def gather(self, x: ShardedTensor) -> np.ndarray:
        """Reassemble the global ``[b, S, d]`` tensor (test/inspection helper, not a traced collective)."""
        self.check(x)
        out = np.empty((self.b * self.seq, self.d))
        for j, s in enumerate(x.shards):
            out[self.global_ids(j).ravel()] = s.reshape(-1, self.d)
        return out.reshape(self.b, self.seq, self.d)

    def check(self, x: ShardedTensor) -> None:
        if x.n != self.cp or x.shards[0].shape != self.local_shape:
            raise ContractError(
                f"{self.variant.value} layout expects {self.cp} shards of {self.local_shape}, "
                f"got {x.n} of {x.shards[0].shape}"
            )


def stdit_transition(x: ShardedTensor, src: StditLayout, dst: StditLayout,
                     trace: CollectiveTrace | None = None, tag: str = "stdit") -> ShardedTensor:
    """Move ``x`` from ``src`` to the next layout in the FullSeq -> Spatial -> Temporal cycle.

    One all-to-all: each device sends every destination the rows it owns there,
    in its own local order; the receiver scatters them into place. Placement is
    derived from the static layouts, so only payload values travel.
    """
    if replace(src, variant=dst.variant) != dst:
        raise ContractError("transition layouts must share b, h, w, t, d and cp")
    if _NEXT[src.variant] is not dst.variant:
        raise ContractError(f"{src.variant.value} -> {dst.variant.value} is not a step of the layout cycle")
    src.check(x)
    cp, d = src.cp, src.d
    dev, pos = dst.placement()
    send, dest_pos = [], []
    for i in range(cp):
        ids = src.global_ids(i).ravel()
        rows = x.shards[i].reshape(-1, d)
        to = dev[ids]
        send.append([rows[to == j] for j in range(cp)])
        dest_pos.append([pos[ids[to == j]] for j in range(cp)])
    recv = exchange(send, "cp", trace, tag)
    out = []
    for j in range(cp):
        local = np.empty((int(np.prod(dst.local_shape[:2])), d))
        for i in range(cp):
            local[dest_pos[i][j]] = recv[j][i]
        out.append(local.reshape(dst.local_shape))
    return ShardedTensor(out, "cp", 0)


# --- layer --------------------------------------------------------------------------------

ATTENTIONS = ("full", "spatial", "temporal")


def init_stdit_params(d: int, seed: int = 0) -> dict[str, dict[str, np.ndarray]]:
    rng = SeededRng(seed)
    out = {}
    for a, name in enumerate(ATTENTIONS):
        r = rng.split(a)
        out[name] = {w: r.split(i).normal((d, d), scale=1.0 / math.sqrt(d)) for i, w in enumerate(("wq", "wk", "wv", "wo"))}
    return out


def _qkv(x, p, heads):
    return tuple(split_heads(matmul(x, p[w]), heads) for w in ("wq", "wk", "wv"))


def _local_attention(x, p, heads):
    """Residual self-attention over the middle dim of ``[batch, seq, d]``."""
    q, k, v = _qkv(x, p, heads)
    return x + matmul(merge_heads(multihead_attention(q, k, v)), p["wo"])


def stdit_layer_reference(x, params, heads: int, t: int, hw: int) -> np.ndarray:
    """Unsharded oracle on ``[b, t*hw, d]``: full, then per-frame, then per-track attention."""
    x = as_tensor(x)
    b, S, d = x.shape
    x = _local_attention(x, params["full"], heads)
    x = _local_attention(x.reshape(b * t, hw, d), params["spatial"], heads)
    x = x.reshape(b, t, hw, d).transpose(0, 2, 1, 3).reshape(b * hw, t, d)
    x = _local_attention(x, params["temporal"], heads)
    return x.reshape(b, hw, t, d).transpose(0, 2, 1, 3).reshape(b, S, d)


def _ring_full_attention(x: ShardedTensor, p, heads, trace):
    qkv = [_qkv(s, p, heads) for s in x.shards]
    outs = ring_attention_cp([a[0] for a in qkv], [a[1] for a in qkv], [a[2] for a in qkv], trace=trace, tag="stdit.full")
    return ShardedTensor([s + matmul(merge_heads(o), p["wo"]) for s, o in zip(x.shards, outs)], "cp", 0)


def _ulysses_attention(x: ShardedTensor, p, heads, trace, layout: StditLayout, kind: str):
    """Head-scatter attention on the FullSeq layout; spatial/temporal regroup the gathered sequence locally."""
    b, t, hw = layout.b, layout.t, layout.hw

    def attend(q, k, v):
        if kind == "full":
            return multihead_attention(q, k, v)
        hl, dh = q.shape[2], q.shape[3]
        if kind == "spatial":
            fwd = lambda a: a.reshape(b * t, hw, hl, dh)
            back = lambda a: a.reshape(b, t * hw, hl, dh)
        else:
            fwd = lambda a: a.reshape(b, t, hw, hl, dh).transpose(0, 2, 1, 3, 4).reshape(b * hw, t, hl, dh)
            back = lambda a: a.reshape(b, hw, t, hl, dh).transpose(0, 2, 1, 3, 4).reshape(b, t * hw, hl, dh)
        return back(multihead_attention(fwd(q), fwd(k), fwd(v)))

    qkv = [_qkv(s, p, heads) for s in x.shards]
    outs = ulysses_attention([a[0] for a in qkv], [a[1] for a in qkv], [a[2] for a in qkv], attend, trace, tag=f"ulysses.{kind}")
    return ShardedTensor([s + matmul(merge_heads(o), p["wo"]) for s, o in zip(x.shards, outs)], "cp", 0)


def stdit_layer_forward(x: ShardedTensor, params, heads: int, layout: StditLayout,
                        trace: CollectiveTrace | None = None, mode: str = "a2a") -> ShardedTensor:
    """One ST-DiT layer on a FullSeq-sharded input; returns the FullSeq-sharded output.

    ``mode="a2a"``: ring attention for the full attention, then two layout
    transitions so spatial and temporal attention run with no communication,
    then a third transition back (3 all-to-alls per layer).
    ``mode="ulysses"``: every attention stays on the FullSeq layout and uses
    head-scatter all-to-alls (4 per attention, 12 per layer).
    """
    if layout.variant is not Variant.FULLSEQ:
        raise ContractError("layer input must be in the FullSeq layout")
    layout.check(x)
    if mode == "ulysses":
        for kind in ATTENTIONS:
            x = _ulysses_attention(x, params[kind], heads, trace, layout, kind)
        return x
    if mode != "a2a":
        raise ContractError(f"unknown ST-DiT mode {mode!r}")
    spatial, temporal = layout.to(Variant.SPATIAL), layout.to(Variant.TEMPORAL)
    x = _ring_full_attention(x, params["full"], heads, trace)
    x = stdit_transition(x, layout, spatial, trace, tag="stdit.to_spatial")
    x = ShardedTensor([_local_attention(s, params["spatial"], heads) for s in x.shards], "cp", 0)
    x = stdit_transition(x, spatial, temporal, trace, tag="stdit.to_temporal")
    x = ShardedTensor([_local_attention(s, params["temporal"], heads) for s in x.shards], "cp", 0)
    return stdit_transition(x, temporal, layout, trace, tag="stdit.to_fullseq")
