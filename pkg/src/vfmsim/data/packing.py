"""Sequence packing: several samples concatenated into one fixed-length row with a block-diagonal mask."""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from ..numerics import ContractError


@dataclass(frozen=True)
class Segment:
    sample_id: str
    start: int
    length: int


@dataclass
class PackedSequence:
    max_len: int
    segments: list[Segment] = field(default_factory=list)

    @property
    def total_len(self) -> int:
        return sum(s.length for s in self.segments)

    @property
    def pad_len(self) -> int:
        return self.max_len - self.total_len

    @property
    def mask(self) -> list[int]:
        """Block-diagonal descriptor: the segment lengths in order."""
        return [s.length for s in self.segments]

    def fits(self, length: int) -> bool:
        return self.total_len + length <= self.max_len

    def append(self, sample_id: str, length: int) -> None:
        if not self.fits(length):
            raise ContractError(f"segment of {length} tokens overflows pack ({self.total_len}/{self.max_len})")
        self.segments.append(Segment(sample_id, self.total_len, length))

    def check(self) -> None:
        pos = 0
        for s in self.segments:
            if s.start != pos or s.length < 1:
                raise ContractError(f"segments are not contiguous at {s}")
            pos += s.length
        if pos + self.pad_len != self.max_len or self.pad_len < 0:
            raise ContractError("segment lengths and padding do not add up to max_len")


def _length(item) -> tuple[str, int]:
    if isinstance(item, tuple):
        return str(item[0]), int(item[1])
    return item.id, int(item.token_len)


def ffd(lengths: list[tuple[str, int]], max_len: int) -> list[PackedSequence]:
    """First-fit-decreasing over one window; bins come out in creation order.

    Equal lengths keep their arrival order (stable sort).
    """
    bins: list[PackedSequence] = []
    for sid, n in sorted(lengths, key=lambda x: -x[1]):
        for b in bins:
            if b.fits(n):
                b.append(sid, n)
                break
        else:
            b = PackedSequence(max_len)
            b.append(sid, n)
            bins.append(b)
    return bins


def pack_sequences(stream: Iterable, max_len: int, buffer_size: int = 64) -> Iterator[PackedSequence]:
    """Pack samples (objects with ``id``/``token_len`` or ``(id, length)`` pairs).

    The stream is consumed in consecutive windows of ``buffer_size`` samples and
    each window is packed independently, so memory stays bounded. Each pack is
    one micro batch.
    """
    if max_len < 1 or buffer_size < 1:
        raise ContractError("max_len and buffer_size must be >= 1")
    window: list[tuple[str, int]] = []
    for item in stream:
        sid, n = _length(item)
        if n > max_len:
            raise ContractError(f"sample {sid} has {n} tokens, longer than max_len={max_len}")
        if n < 1:
            raise ContractError(f"sample {sid} has no tokens")
        window.append((sid, n))
        if len(window) == buffer_size:
            yield from ffd(window, max_len)
            window = []
    if window:
        yield from ffd(window, max_len)


def build_packed_mask(pack: PackedSequence) -> np.ndarray:
    """Boolean ``[max_len, max_len]`` mask; True only inside each segment's diagonal block."""
    pack.check()
    mask = np.zeros((pack.max_len, pack.max_len), dtype=bool)
    for s in pack.segments:
        mask[s.start:s.start + s.length, s.start:s.start + s.length] = True
    return mask


def pack_tokens(pack: PackedSequence, tokens: dict[str, np.ndarray]) -> np.ndarray:
    """Concatenate per-sample token rows into one ``[max_len, d]`` array with zero padding."""
    d = next(iter(tokens.values())).shape[-1]
    out = np.zeros((pack.max_len, d))
    for s in pack.segments:
        out[s.start:s.start + s.length] = tokens[s.sample_id]
    return out


_DONE = object()


def prefetch(packs: Iterable, maxsize: int = 4) -> Iterator:
    """Produce items on a background thread and hand them over in order through a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize)
    errors: list[BaseException] = []

    def producer():
        try:
            for p in packs:
                q.put(p)
        except BaseException as err:  # re-raised on the consumer side
            errors.append(err)
        finally:
            q.put(_DONE)

    worker = threading.Thread(target=producer, daemon=True)
    worker.start()
    while True:
        item = q.get()
        if item is _DONE:
            break
        yield item
    worker.join()
    if errors:
        raise errors[0]
