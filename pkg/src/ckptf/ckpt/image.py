"""Checkpoint image files.

Layout, all integers little-endian::

    magic          8 bytes  b"PSCKPT01"
    rank           u32
    generation     u32
    region_count   u32
    region*        tag_len u32, tag (utf-8), payload_len u64, payload
    table_count    u32
    table_entry*   vlid u16, vqpn u32, lid u16, qpn u32, generation u32, owned u8
    drained_count  u32
    drained*       mode u8 (0 = RC, 1 = UD), payload_len u32, payload
    crc32          u32 over every preceding byte

Regions are written in sorted tag order and nothing time-dependent is
stored, so the same state always serializes to the same bytes.
"""

from __future__ import annotations

import mmap
import os
import struct
import tempfile
import zlib
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ImageCorrupt

MAGIC = b"PSCKPT01"
ENV_DIR = "CKPTF_DIR"

_HEAD = struct.Struct("<8sIII")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_ENTRY = struct.Struct("<HIHIIB")
_DRAINED = struct.Struct("<BI")

MODE_RC, MODE_UD = 0, 1


@dataclass
class RankState:
    rank: int
    generation: int
    regions: Mapping[str, bytes] = field(default_factory=dict)
    table: list[tuple] = field(default_factory=list)
    drained: list[tuple[int, bytes]] = field(default_factory=list)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RankState):
            return NotImplemented
        return (self.rank == other.rank and self.generation == other.generation
                and dict(self.regions) == dict(other.regions)
                and [tuple(map(tuple, r[:2])) + (bool(r[2]),) for r in self.table]
                == [tuple(map(tuple, r[:2])) + (bool(r[2]),) for r in other.table]
                and [(m, bytes(p)) for m, p in self.drained]
                == [(m, bytes(p)) for m, p in other.drained])


def serialize(state: RankState) -> bytes:
    out = bytearray(_HEAD.pack(MAGIC, state.rank, state.generation, len(state.regions)))
    for tag in sorted(state.regions):
        raw_tag = tag.encode("utf-8")
        payload = state.regions[tag]
        out += _U32.pack(len(raw_tag)) + raw_tag + _U64.pack(len(payload))
        out += payload
    out += _U32.pack(len(state.table))
    for vid, addr, owned in state.table:
        out += _ENTRY.pack(vid[0], vid[1], addr[0], addr[1], addr[2], int(bool(owned)))
    out += _U32.pack(len(state.drained))
    for mode, payload in state.drained:
        out += _DRAINED.pack(mode, len(payload)) + payload
    out += _U32.pack(zlib.crc32(out))
    return bytes(out)


def _verify(buf) -> None:
    if len(buf) < _HEAD.size + 4:
        raise ImageCorrupt("image too short")
    (stored,) = _U32.unpack_from(buf, len(buf) - 4)
    body = memoryview(buf)[:-4]
    try:
        actual = zlib.crc32(body)
    finally:
        body.release()
    if stored != actual:
        raise ImageCorrupt(f"CRC mismatch: stored {stored:#010x}, computed {actual:#010x}")


def _parse(buf, copy_regions: bool):
    """Walk a CRC-verified buffer. Region payloads are copied or returned as
    (offset, length) pairs."""
    end = len(buf) - 4
    try:
        magic, rank, generation, nregions = _HEAD.unpack_from(buf, 0)
        if magic != MAGIC:
            raise ImageCorrupt(f"bad magic {magic!r}")
        pos = _HEAD.size
        regions = {}
        for _ in range(nregions):
            (n,) = _U32.unpack_from(buf, pos)
            pos += 4
            tag = bytes(buf[pos:pos + n]).decode("utf-8")
            pos += n
            (size,) = _U64.unpack_from(buf, pos)
            pos += 8
            if pos + size > end:
                raise ImageCorrupt(f"region {tag!r} runs past end of image")
            if tag in regions:
                raise ImageCorrupt(f"duplicate region tag {tag!r}")
            regions[tag] = bytes(buf[pos:pos + size]) if copy_regions else (pos, size)
            pos += size
        (ntable,) = _U32.unpack_from(buf, pos)
        pos += 4
        table = []
        for _ in range(ntable):
            vlid, vqpn, lid, qpn, gen, owned = _ENTRY.unpack_from(buf, pos)
            pos += _ENTRY.size
            table.append(((vlid, vqpn), (lid, qpn, gen), bool(owned)))
        (ndrained,) = _U32.unpack_from(buf, pos)
        pos += 4
        drained = []
        for _ in range(ndrained):
            mode, size = _DRAINED.unpack_from(buf, pos)
            pos += _DRAINED.size
            drained.append((mode, bytes(buf[pos:pos + size])))
            pos += size
    except (struct.error, UnicodeDecodeError) as exc:
        raise ImageCorrupt(f"malformed image: {exc}") from exc
    if pos != end:
        raise ImageCorrupt(f"{end - pos} unexpected bytes before trailer")
    return rank, generation, regions, table, drained


def parse(data: bytes) -> RankState:
    _verify(data)
    rank, generation, regions, table, drained = _parse(data, copy_regions=True)
    return RankState(rank, generation, regions, table, drained)


def image_path(ckpt_dir, generation: int, rank: int) -> Path:
    base = os.environ.get(ENV_DIR) or ckpt_dir
    return Path(base) / f"gen{generation}" / f"rank{rank}.img"


def write_image(path, data: bytes) -> int:
    """Write atomically: a crash mid-write leaves any previous image intact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
    return len(data)


def read_image(path) -> RankState:
    with open(path, "rb") as f:
        return parse(f.read())


class LazyRegions(Mapping):
    """Region payloads backed by a memory-mapped image, copied out on first access."""

    def __init__(self, mm: mmap.mmap, index: dict[str, tuple[int, int]]):
        self._mm = mm
        self._index = index
        self._cache: dict[str, bytes] = {}
        self.materialized_bytes = 0

    def __getitem__(self, tag: str) -> bytes:
        if tag not in self._cache:
            off, size = self._index[tag]
            self._cache[tag] = self._mm[off:off + size]
            self.materialized_bytes += size
        return self._cache[tag]

    def __iter__(self):
        return iter(self._index)

    def __len__(self) -> int:
        return len(self._index)

    @property
    def total_bytes(self) -> int:
        return sum(size for _, size in self._index.values())

    def is_materialized(self, tag: str) -> bool:
        return tag in self._cache


def open_lazy(path) -> RankState:
    """Map an image without copying region payloads.

    The CRC is still checked over the whole mapping before anything is
    trusted; only the copies into process memory are deferred.
    """
    with open(path, "rb") as f:
        size = os.fstat(f.fileno()).st_size
        if size == 0:
            raise ImageCorrupt("empty image")
        mm = mmap.mmap(f.fileno(), 0, access=mmap.ACCESS_READ)
    _verify(mm)
    rank, generation, index, table, drained = _parse(mm, copy_regions=False)
    return RankState(rank, generation, LazyRegions(mm, index), table, drained)
