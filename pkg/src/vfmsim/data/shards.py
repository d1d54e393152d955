"""Tar-shard datasets in the WebDataset layout.

A sample ``<id>`` is stored as consecutive members sharing that basename:
``<id>.json`` (metadata), ``<id>.bin`` (payload) and optionally ``<id>.npy``
(caption embedding). Shards are written with the standard ``tarfile`` module
in ustar format and read back with a strictly sequential header parser.
"""

from __future__ import annotations

import io
import json
import tarfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from ..dit import PatchSpec
from ..numerics import ContractError

BLOCK = 512


class ShardFormatError(ValueError):
    pass


@dataclass
class Sample:
    id: str
    modality: str
    t: int
    h: int
    w: int
    payload: bytes = b""
    caption_embedding: np.ndarray | None = None
    token_len: int = 0
    patch: PatchSpec = field(default_factory=PatchSpec, repr=False, compare=False)

    def __post_init__(self):
        if not self.id or "." in self.id or "/" in self.id:
            raise ContractError(f"sample id {self.id!r} must be non-empty and free of '.' and '/'")
        if self.modality not in ("image", "video"):
            raise ContractError(f"unknown modality {self.modality!r}")
        if self.modality == "image" and self.t != 1:
            raise ContractError("images have t = 1")
        expected = self.patch.tokens(self.t, self.h, self.w)
        if self.token_len and self.token_len != expected:
            raise ContractError(f"token_len {self.token_len} disagrees with extents ({expected})")
        self.token_len = expected

    def metadata(self) -> dict:
        return {"id": self.id, "modality": self.modality, "t": self.t, "h": self.h, "w": self.w, "token_len": self.token_len}

    def members(self) -> list[tuple[str, bytes]]:
        out = [(f"{self.id}.json", json.dumps(self.metadata(), sort_keys=True).encode()), (f"{self.id}.bin", bytes(self.payload))]
        if self.caption_embedding is not None:
            buf = io.BytesIO()
            np.save(buf, np.asarray(self.caption_embedding, dtype=np.float64), allow_pickle=False)
            out.append((f"{self.id}.npy", buf.getvalue()))
        return out

    def same_content(self, other: "Sample") -> bool:
        if self.metadata() != other.metadata() or self.payload != other.payload:
            return False
        a, b = self.caption_embedding, other.caption_embedding
        return (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))


def _padded(n: int) -> int:
    return -(-n // BLOCK) * BLOCK


def archived_size(sample: Sample) -> int:
    """Bytes the sample's members occupy inside a tar archive (headers plus padded data)."""
    return sum(BLOCK + _padded(len(data)) for _, data in sample.members())


# --- writer ----------------------------------------------------------------------------------

def _tar_bytes(samples: list[Sample]) -> bytes:
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w", format=tarfile.USTAR_FORMAT) as tar:
        for s in samples:
            for name, data in s.members():
                info = tarfile.TarInfo(name)
                info.size = len(data)
                info.mtime = 0
                info.mode = 0o644
                tar.addfile(info, io.BytesIO(data))
    return buf.getvalue()


def write_shards(samples: Iterable[Sample], out_dir, max_shard_bytes: int, prefix: str = "shard") -> list[Path]:
    """Greedily fill shards in input order; a sample is never split.

    ``max_shard_bytes`` bounds the archived size of the samples in a shard
    (headers and padded member data, excluding the end-of-archive trailer).
    """
    samples = list(samples)
    if not samples:
        raise ContractError("need at least one sample")
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ContractError("sample ids must be unique")
    groups: list[list[Sample]] = [[]]
    used = 0
    for s in samples:
        size = archived_size(s)
        if size > max_shard_bytes:
            raise ContractError(f"sample {s.id} needs {size} bytes, over the {max_shard_bytes}-byte shard limit")
        if groups[-1] and used + size > max_shard_bytes:
            groups.append([])
            used = 0
        groups[-1].append(s)
        used += size
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, group in enumerate(groups):
        path = out_dir / f"{prefix}-{i:06d}.tar"
        path.write_bytes(_tar_bytes(group))
        paths.append(path)
    return paths


# --- reader ----------------------------------------------------------------------------------

class SequentialReader:
    """Forward-only reader over a binary stream that logs the offset of every read."""

    def __init__(self, fh: BinaryIO, name: str = "<stream>"):
        self.fh = fh
        self.name = name
        self.offset = 0
        self.offsets: list[int] = []

    def read(self, n: int) -> bytes:
        self.offsets.append(self.offset)
        data = self.fh.read(n)
        self.offset += len(data)
        return data


def _octal(field_bytes: bytes) -> int:
    text = field_bytes.split(b"\0", 1)[0].strip()
    return int(text, 8) if text else 0


def _checksum_ok(header: bytes) -> bool:
    stored = _octal(header[148:156])
    total = sum(header[:148]) + 8 * ord(" ") + sum(header[156:])
    return stored == total


def iter_members(reader: SequentialReader) -> Iterator[tuple[str, bytes]]:
    while True:
        at = reader.offset
        header = reader.read(BLOCK)
        if len(header) == 0:
            return
        if len(header) < BLOCK:
            raise ShardFormatError(f"{reader.name}: truncated header at offset {at}")
        if header == b"\0" * BLOCK:
            return  # end-of-archive marker; trailing blocks are not read
        if not _checksum_ok(header):
            raise ShardFormatError(f"{reader.name}: bad header checksum at offset {at}")
        if header[257:262] != b"ustar":
            raise ShardFormatError(f"{reader.name}: not a ustar header at offset {at}")
        name = header[0:100].split(b"\0", 1)[0].decode()
        prefix = header[345:500].split(b"\0", 1)[0].decode()
        if prefix:
            name = f"{prefix}/{name}"
        size = _octal(header[124:136])
        kind = header[156:157]
        data = reader.read(size)
        if len(data) < size:
            raise ShardFormatError(f"{reader.name}: truncated member {name!r} at offset {at}")
        pad = _padded(size) - size
        if pad:
            reader.read(pad)
        if kind in (b"0", b"\0"):
            yield name, data


def _split_name(name: str) -> tuple[str, str]:
    base = name.rsplit("/", 1)[-1]
    if "." not in base:
        raise ShardFormatError(f"member {name!r} has no extension")
    key, ext = base.split(".", 1)
    return key, ext


def _make_sample(key: str, group: dict[str, bytes], where: str) -> Sample:
    if "json" not in group:
        raise ShardFormatError(f"{where}: member group {key!r} has no metadata member")
    meta = json.loads(group["json"].decode())
    emb = None
    if "npy" in group:
        emb = np.load(io.BytesIO(group["npy"]), allow_pickle=False)
    return Sample(meta["id"], meta["modality"], meta["t"], meta["h"], meta["w"], group.get("bin", b""), emb, meta["token_len"])


def _open(source) -> tuple[BinaryIO, str]:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return io.BytesIO(bytes(source)), "<bytes>"
    return open(source, "rb"), str(source)


def read_shards(sources: Iterable, offset_log: dict | None = None) -> Iterator[Sample]:
    """Stream samples from shards in order with one forward pass per shard.

    ``sources`` are paths or in-memory archive bytes. If ``offset_log`` is a
    dict it receives, per source, the list of file offsets of every read.
    """
    for idx, source in enumerate(sources):
        fh, name = _open(source)
        reader = SequentialReader(fh, name)
        try:
            key, group, seen = None, {}, set()
            for member, data in iter_members(reader):
                k, ext = _split_name(member)
                if key is not None and k != key:
                    yield _make_sample(key, group, name)
                    seen.add(key)
                    group = {}
                if k in seen or ext in group:
                    raise ShardFormatError(f"{name}: members of {k!r} are not contiguous")
                key = k
                group[ext] = data
            if key is not None:
                yield _make_sample(key, group, name)
        finally:
            fh.close()
            if offset_log is not None:
                offset_log[f"{idx}:{name}"] = reader.offsets


def write_manifest(paths: list[Path], path) -> dict:
    shards = []
    for p in paths:
        count = sum(1 for _ in read_shards([p]))
        shards.append({"path": str(p), "samples": count, "bytes": Path(p).stat().st_size})
    manifest = {"shards": shards, "total_samples": sum(s["samples"] for s in shards)}
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_manifest(path) -> list[Path]:
    data = json.loads(Path(path).read_text())
    return [Path(s["path"]) for s in data["shards"]]
