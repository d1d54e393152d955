"""Deterministic weighted interleaving of several sample sources."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

from ..numerics import ContractError, SeededRng

EXHAUSTION_POLICIES = ("drop", "stop", "error")


@dataclass
class BlendSpec:
    weights: list[float]
    seed: int = 0
    on_exhausted: str = "drop"  # drop the source, stop the stream, or raise
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.weights:
            raise ContractError("blend needs at least one source")
        if min(self.weights) <= 0:
            raise ContractError(f"blend weights must be positive, got {self.weights}")
        if self.on_exhausted not in EXHAUSTION_POLICIES:
            raise ContractError(f"on_exhausted must be one of {EXHAUSTION_POLICIES}")
        if self.names and len(self.names) != len(self.weights):
            raise ContractError("names and weights differ in length")

    @property
    def normalized(self) -> list[float]:
        total = float(sum(self.weights))
        return [w / total for w in self.weights]


class SourceExhausted(ContractError):
    pass


def blend(sources: list[Iterable], spec: BlendSpec, limit: int | None = None,
          picks: list | None = None) -> Iterator:
    """Interleave ``sources`` so that the running counts track the weights.

    At every draw the source with the largest deficit ``w_i * (n + 1) - count_i``
    is chosen; exact ties go to a fixed seeded priority order. ``picks``, if
    given, receives the source index of every yielded item.
    """
    if len(sources) != len(spec.weights):
        raise ContractError(f"{len(sources)} sources but {len(spec.weights)} weights")
    weights = spec.normalized
    iters = [iter(s) for s in sources]
    rank = {src: pos for pos, src in enumerate(SeededRng(spec.seed).permutation(len(sources)).tolist())}
    live = set(range(len(sources)))
    counts = [0] * len(sources)
    drawn = 0
    while live and (limit is None or drawn < limit):
        live_w = sum(weights[i] for i in live)
        best = max(live, key=lambda i: (weights[i] / live_w * (drawn + 1) - counts[i], -rank[i]))
        try:
            item = next(iters[best])
        except StopIteration:
            if spec.on_exhausted == "error":
                name = spec.names[best] if spec.names else str(best)
                raise SourceExhausted(f"source {name} exhausted after {counts[best]} items")
            if spec.on_exhausted == "stop":
                return
            live.discard(best)
            # restart the deficit bookkeeping over the remaining sources
            drawn = 0
            counts = [0] * len(sources)
            continue
        counts[best] += 1
        drawn += 1
        if picks is not None:
            picks.append(best)
        yield item
