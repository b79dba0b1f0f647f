"""
Parameter sets and the checkpoint file.

File = ParamSet block followed by a model block, both little-endian:

    "RLCMW001" | u32 count | per entry: u16 name_len, name, u8 rank,
               u32 extents[rank], f64 data[...] | u32 crc32(block after magic)
    "RLCMM001" | u64 gumbel_seed | u32 config_len, config JSON |
               u16 scale_count, f64 scales[...] | tables | u32 crc32(block after magic)

tables = two grids (gaussian, factorized), each u16 rows, u16 cols, then per
table: i32 s_min, u8 escape, u32 n, u16 cdf[n] (the closing 65536 is implied).
"""
import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from entropy import CDF_TOTAL, CdfTable, TableSet
from errors import CorruptionError, CrcError, MagicError, TruncatedStreamError
from tensor import Tensor

PARAMS_MAGIC = b"RLCMW001"
MODEL_MAGIC = b"RLCMM001"


class ParamSet:
    """Named parameter tensors, iterated in insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor = Tensor(value, requires_grad=True)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def group(self, prefix: str) -> list[str]:
        return [name for name in self._params if name.split(".", 1)[0] == prefix]

    def zero_grad(self):
        for tensor in self._params.values():
            tensor.grad = None

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    # ── Serialization ─────────────────────────────────────────────
    def to_bytes(self) -> bytes:
        body = bytearray(struct.pack("<I", len(self._params)))
        for name, tensor in self._params.items():
            raw = name.encode("utf-8")
            body += struct.pack("<H", len(raw)) + raw
            body += struct.pack("<B", tensor.ndim)
            body += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
            body += tensor.data.astype("<f8").tobytes()
        return PARAMS_MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["ParamSet", int]:
        """Parse a ParamSet block starting at `offset`; returns (params, end offset)."""
        reader = _Reader(data, offset)
        if reader.take(8) != PARAMS_MAGIC:
            raise MagicError("not a parameter block (bad magic)")
        start = reader.pos
        params = cls()
        (count,) = reader.unpack("<I")
        for _ in range(count):
            (name_len,) = reader.unpack("<H")
            name = reader.take(name_len).decode("utf-8")
            (rank,) = reader.unpack("<B")
            shape = reader.unpack(f"<{rank}I")
            n = int(np.prod(shape)) if rank else 1
            values = np.frombuffer(reader.take(8 * n), dtype="<f8").reshape(shape)
            params.add(name, values.astype(np.float64))
        body = data[start:reader.pos]
        (crc,) = reader.unpack("<I")
        if crc != zlib.crc32(body):
            raise CrcError("parameter block CRC mismatch")
        return params, reader.pos


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data, self.pos = data, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedStreamError(f"need {n} bytes at offset {self.pos}, file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def model_digest(param_block: bytes, config_json: str, gumbel_seed: int) -> bytes:
    """SHA-256 over parameters, configuration and the Gumbel seed (tables are derived data)."""
    h = hashlib.sha256()
    h.update(param_block)
    h.update(config_json.encode("utf-8"))
    h.update(struct.pack("<Q", gumbel_seed))
    return h.digest()


# ─────────────────────────────────────────────
# TABLES
# ─────────────────────────────────────────────
def _pack_grid(grid: list[list[CdfTable]]) -> bytes:
    rows = len(grid)
    cols = len(grid[0]) if rows else 0
    out = bytearray(struct.pack("<HH", rows, cols))
    for row in grid:
        for table in row:
            body = table.cdf[:-1].astype("<u2")
            out += struct.pack("<iBI", table.s_min, int(table.escape), len(body))
            out += body.tobytes()
    return bytes(out)


def _unpack_grid(reader: _Reader) -> list[list[CdfTable]]:
    rows, cols = reader.unpack("<HH")
    grid = []
    for _ in range(rows):
        row = []
        for _ in range(cols):
            s_min, escape, n = reader.unpack("<iBI")
            body = np.frombuffer(reader.take(2 * n), dtype="<u2").astype(np.int64)
            row.append(CdfTable(s_min=s_min, cdf=np.append(body, CDF_TOTAL), escape=bool(escape)))
        grid.append(row)
    return grid


@dataclass
class Checkpoint:
    params: ParamSet
    config_json: str
    gumbel_seed: int
    scale_table: np.ndarray
    tables: TableSet | None = None
    param_block: bytes = field(default=b"", repr=False)

    @property
    def model_hash(self) -> bytes:
        return model_digest(self.param_block or self.params.to_bytes(), self.config_json, self.gumbel_seed)


def to_bytes(ckpt: Checkpoint) -> bytes:
    config = ckpt.config_json.encode("utf-8")
    body = bytearray(struct.pack("<Q", ckpt.gumbel_seed))
    body += struct.pack("<I", len(config)) + config
    body += struct.pack("<H", len(ckpt.scale_table))
    body += np.asarray(ckpt.scale_table, dtype="<f8").tobytes()
    tables = ckpt.tables or TableSet(gaussian=[], factorized=[])
    body += _pack_grid(tables.gaussian) + _pack_grid(tables.factorized)
    model_block = MODEL_MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(body))
    return ckpt.params.to_bytes() + model_block


def from_bytes(data: bytes) -> Checkpoint:
    params, offset = ParamSet.from_bytes(data)
    param_block = data[:offset]
    reader = _Reader(data, offset)
    if reader.take(8) != MODEL_MAGIC:
        raise MagicError("missing model block (bad magic)")
    start = reader.pos
    (seed,) = reader.unpack("<Q")
    (config_len,) = reader.unpack("<I")
    config_json = reader.take(config_len).decode("utf-8")
    (scale_count,) = reader.unpack("<H")
    scales = np.frombuffer(reader.take(8 * scale_count), dtype="<f8").astype(np.float64)
    gaussian = _unpack_grid(reader)
    factorized = _unpack_grid(reader)
    body = data[start:reader.pos]
    (crc,) = reader.unpack("<I")
    if crc != zlib.crc32(body):
        raise CrcError("model block CRC mismatch")
    if reader.pos != len(data):
        raise CorruptionError(f"{len(data) - reader.pos} trailing bytes after model block")
    tables = TableSet(gaussian=gaussian, factorized=factorized) if gaussian else None
    return Checkpoint(
        params=params,
        config_json=config_json,
        gumbel_seed=seed,
        scale_table=scales,
        tables=tables,
        param_block=param_block,
    )


def save(path: str | Path, ckpt: Checkpoint):
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
