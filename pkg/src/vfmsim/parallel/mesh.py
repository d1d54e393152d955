"""Simulated device mesh, sharded tensors and traced collectives.

Devices are list positions; a collective is a deterministic buffer handoff
plus one appended :class:`CollectiveRecord`. Byte counts use the logical
payload convention: the global element count of the tensor being moved,
times 8 (float64). Collectives over a single participant are no-ops and are
not recorded.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..numerics import ContractError

KINDS = ("all_gather", "reduce_scatter", "all_to_all", "p2p", "all_reduce")
BYTES_PER_ELEMENT = 8


@dataclass(frozen=True)
class DeviceGrid:
    tp: int = 1
    cp: int = 1
    pp: int = 1
    dp: int = 1

    def __post_init__(self):
        if min(self.tp, self.cp, self.pp, self.dp) < 1:
            raise ContractError(f"grid axes must be positive: {self}")

    @property
    def size(self) -> int:
        return self.tp * self.cp * self.pp * self.dp

    @classmethod
    def parse(cls, text: str) -> "DeviceGrid":
        parts = [int(p) for p in text.replace("x", ",").split(",") if p.strip()]
        if len(parts) != 4:
            raise ContractError(f"grid must be 'tp,cp,pp,dp', got {text!r}")
        return cls(*parts)


@dataclass(frozen=True)
class CollectiveRecord:
    kind: str
    axis: str
    bytes: int
    participants: int
    step: int = 0
    tag: str = ""


@dataclass
class CollectiveTrace:
    records: list[CollectiveRecord] = field(default_factory=list)
    step: int = 0

    def record(self, kind: str, axis: str, n_elements: int, participants: int, tag: str = "") -> None:
        if kind not in KINDS:
            raise ContractError(f"unknown collective kind {kind!r}")
        self.records.append(
            CollectiveRecord(kind, axis, int(n_elements) * BYTES_PER_ELEMENT, participants, self.step, tag)
        )

    def select(self, kind: str | None = None, tag: str | None = None, step: int | None = None):
        return [
            r for r in self.records
            if (kind is None or r.kind == kind) and (tag is None or r.tag == tag) and (step is None or r.step == step)
        ]

    def count(self, kind: str | None = None, tag: str | None = None) -> int:
        return len(self.select(kind, tag))

    def total_bytes(self, kind: str | None = None, tag: str | None = None, step: int | None = None) -> int:
        return sum(r.bytes for r in self.select(kind, tag, step))

    def by_kind(self) -> dict[str, int]:
        out = {k: 0 for k in KINDS}
        for r in self.records:
            out[r.kind] += r.bytes
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)


def _trace(trace):
    return trace if trace is not None else CollectiveTrace()


@dataclass
class ShardedTensor:
    """Per-device arrays along one mesh axis; ``dim`` is the sharded tensor dim (None = replicated)."""

    shards: list[np.ndarray]
    axis: str = "cp"
    dim: int | None = 0

    def __post_init__(self):
        if not self.shards:
            raise ContractError("a sharded tensor needs at least one shard")
        ref = self.shards[0].shape
        if any(s.shape != ref for s in self.shards):
            raise ContractError("shards must have equal extents")

    @property
    def n(self) -> int:
        return len(self.shards)

    @classmethod
    def shard(cls, x, n: int, dim: int = 0, axis: str = "cp") -> "ShardedTensor":
        x = np.asarray(x, dtype=np.float64)
        if x.shape[dim] % n:
            raise ContractError(f"axis size {n} does not divide extent {x.shape[dim]} of dim {dim}")
        return cls([p.copy() for p in np.split(x, n, axis=dim)], axis, dim)

    @classmethod
    def replicate(cls, x, n: int, axis: str = "cp") -> "ShardedTensor":
        x = np.asarray(x, dtype=np.float64)
        return cls([x.copy() for _ in range(n)], axis, None)

    def to_global(self) -> np.ndarray:
        if self.dim is None:
            return self.shards[0].copy()
        return np.concatenate(self.shards, axis=self.dim)


def _shards_of(x) -> list[np.ndarray]:
    return x.shards if isinstance(x, ShardedTensor) else [np.asarray(s, dtype=np.float64) for s in x]


# --- collectives -------------------------------------------------------------------------

def all_gather(x: ShardedTensor, trace: CollectiveTrace | None = None, tag: str = "") -> ShardedTensor:
    if x.dim is None:
        raise ContractError("all_gather needs a tensor sharded along the axis")
    full = x.to_global()
    if x.n > 1:
        _trace(trace).record("all_gather", x.axis, full.size, x.n, tag)
    return ShardedTensor([full.copy() for _ in range(x.n)], x.axis, None)


def all_reduce(xs: Sequence[np.ndarray], axis: str = "tp", trace: CollectiveTrace | None = None, tag: str = "") -> list[np.ndarray]:
    """Elementwise sum in fixed device order, replicated to every participant."""
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    shape = xs[0].shape
    if any(x.shape != shape for x in xs):
        raise ContractError("all_reduce inputs must share shape")
    total = xs[0].copy()
    for x in xs[1:]:
        total = total + x
    if len(xs) > 1:
        _trace(trace).record("all_reduce", axis, total.size, len(xs), tag)
    return [total.copy() for _ in xs]


def reduce_scatter(xs: Sequence[np.ndarray], dim: int = 0, axis: str = "dp", trace: CollectiveTrace | None = None, tag: str = "") -> ShardedTensor:
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    shape = xs[0].shape
    if any(x.shape != shape for x in xs):
        raise ContractError("reduce_scatter inputs must share shape")
    n = len(xs)
    if shape[dim] % n:
        raise ContractError(f"axis size {n} does not divide extent {shape[dim]}")
    total = xs[0].copy()
    for x in xs[1:]:
        total = total + x
    if n > 1:
        _trace(trace).record("reduce_scatter", axis, total.size, n, tag)
    return ShardedTensor([p.copy() for p in np.split(total, n, axis=dim)], axis, dim)


def exchange(send: Sequence[Sequence[np.ndarray]], axis: str = "cp", trace: CollectiveTrace | None = None, tag: str = "") -> list[list[np.ndarray]]:
    """General all-to-all: ``send[i][j]`` goes from device i to device j.

    Returns ``recv`` with ``recv[j][i] = send[i][j]``. Recorded as one
    ``all_to_all`` whose byte count is the total payload.
    """
    n = len(send)
    if any(len(row) != n for row in send):
        raise ContractError("all_to_all needs one buffer per destination")
    recv = [[np.asarray(send[i][j]).copy() for i in range(n)] for j in range(n)]
    if n > 1:
        total = sum(int(np.asarray(b).size) for row in send for b in row)
        _trace(trace).record("all_to_all", axis, total, n, tag)
    return recv


def all_to_all(x: ShardedTensor, split_dim: int, concat_dim: int, trace: CollectiveTrace | None = None, tag: str = "") -> ShardedTensor:
    """Reshard from ``concat_dim`` to ``split_dim``: split locally, swap, concatenate.

    ``concat_dim`` must be the dim ``x`` is currently sharded along.
    """
    if x.dim is None or x.dim != concat_dim:
        raise ContractError(f"all_to_all concat_dim {concat_dim} must be the sharded dim {x.dim}")
    n = x.n
    if x.shards[0].shape[split_dim] % n:
        raise ContractError(f"axis size {n} does not divide local extent {x.shards[0].shape[split_dim]}")
    if n == 1:
        return ShardedTensor([x.shards[0].copy()], x.axis, split_dim)
    send = [np.split(s, n, axis=split_dim) for s in x.shards]
    recv = exchange(send, x.axis, trace, tag)
    return ShardedTensor([np.concatenate(r, axis=concat_dim) for r in recv], x.axis, split_dim)


def p2p(n_elements: int, participants: int, axis: str, trace: CollectiveTrace | None, tag: str = "") -> None:
    """Record a point-to-point round moving ``n_elements`` values in total."""
    _trace(trace).record("p2p", axis, n_elements, participants, tag)
