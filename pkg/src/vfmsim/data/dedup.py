"""Shard distribution where each shard is fetched from storage by one rank and shared via all-gather."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from ..numerics import ContractError
from .shards import Sample, read_shards


@dataclass
class RankLedger:
    rank: int
    origin_shards: list[int] = field(default_factory=list)
    origin_bytes: int = 0
    allgather_bytes: int = 0  # bytes received from peers


@dataclass
class DistributionResult:
    streams: list[list[Sample]]
    ledger: list[RankLedger]
    naive: bool = False

    @property
    def origin_total(self) -> int:
        return sum(r.origin_bytes for r in self.ledger)

    @property
    def allgather_total(self) -> int:
        return sum(r.allgather_bytes for r in self.ledger)


def _load(shard) -> bytes:
    if isinstance(shard, (bytes, bytearray, memoryview)):
        return bytes(shard)
    return Path(shard).read_bytes()


def assign_round_robin(n_shards: int, n_ranks: int) -> list[list[int]]:
    return [list(range(r, n_shards, n_ranks)) for r in range(n_ranks)]


def dedup_assign_and_distribute(shards: list, n_ranks: int, naive: bool = False) -> DistributionResult:
    """Give every rank the full ordered dataset.

    Dedup mode: shard i is downloaded by rank ``i % n_ranks`` only, then the raw
    shard bytes are all-gathered so every rank holds every shard. Naive mode:
    every rank downloads every shard itself. Each rank then decodes the shards
    in the original order, so its sample stream equals the single-rank one.
    """
    if n_ranks < 1:
        raise ContractError("n_ranks must be >= 1")
    if not shards:
        raise ContractError("no shards to distribute")
    ledger = [RankLedger(r) for r in range(n_ranks)]
    if naive:
        held = []
        for r in range(n_ranks):
            held.append([_load(s) for s in shards])
            ledger[r].origin_shards = list(range(len(shards)))
            ledger[r].origin_bytes = sum(len(b) for b in held[r])
    else:
        owned: list[dict[int, bytes]] = []
        for r, ids in enumerate(assign_round_robin(len(shards), n_ranks)):
            owned.append({i: _load(shards[i]) for i in ids})
            ledger[r].origin_shards = ids
            ledger[r].origin_bytes = sum(len(b) for b in owned[r].values())
        # all-gather: every rank receives the buffers it does not own
        pool = {i: b for part in owned for i, b in part.items()}
        held = []
        for r in range(n_ranks):
            ledger[r].allgather_bytes = sum(len(b) for i, b in pool.items() if i not in owned[r])
            held.append([owned[r].get(i, pool[i]) for i in range(len(shards))])
    streams = [list(read_shards(blobs)) for blobs in held]
    return DistributionResult(streams, ledger, naive)
