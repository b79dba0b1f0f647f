"""
Range coder over 16-bit CDF tables, and the metadata container.

Coder state is a 32-bit (low, range) pair; bytes leave the top of `low`
whenever range drops below 2^24, and a carry out of `low` is pushed back
into the bytes already written. The decoder works on the offset
code - low and reads exactly the number of bytes the encoder wrote.

Container layout (little-endian):

    "RLCM" | u16 version | u32 orig_w, orig_h, pad_w, pad_h | u8 steps
    | 32-byte model hash | f64 lambda | u16 mean_count, i16 means[...]
    | u32 len, hyper stream | steps x (u32 len, latent stream)
    | u32 crc32(everything after the magic)
"""
import struct
import zlib
from dataclasses import dataclass
from typing import List, Sequence

from pydantic import BaseModel, Field

from entropy import CDF_PRECISION, CDF_TOTAL, ChannelMeans, CdfTable, unzigzag, zigzag
from errors import (
    CorruptionError,
    CrcError,
    EscapeRangeError,
    HashMismatchError,
    MagicError,
    TruncatedStreamError,
    VersionError,
)

MASK32 = 0xFFFFFFFF
RENORM = 1 << 24
CARRY = 1 << 32

MAGIC = b"RLCM"
VERSION = 1


@dataclass(frozen=True)
class Bitstream:
    data: bytes

    @property
    def bit_length(self) -> int:
        return 8 * len(self.data)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.out = bytearray()

    def encode(self, cum: int, freq: int):
        r = self.range >> CDF_PRECISION
        self.low += r * cum
        self.range = r * freq
        if self.low >= CARRY:
            self.low -= CARRY
            i = len(self.out) - 1
            while self.out[i] == 0xFF:
                self.out[i] = 0
                i -= 1
            self.out[i] += 1
        while self.range < RENORM:
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & MASK32
            self.range <<= 8

    def encode_symbol(self, table: CdfTable, s: int):
        slot = table.slot(s)
        if slot is None:
            if not table.escape:
                raise EscapeRangeError(f"symbol {s} outside [{table.s_min}, {table.s_max}] and no escape slot")
            payload = zigzag(s)
            self.encode(*table.frequency(table.symbols))
            self.encode(payload, 1)
            return
        self.encode(*table.frequency(slot))

    def finish(self) -> Bitstream:
        for _ in range(4):
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & MASK32
        return Bitstream(bytes(self.out))


class RangeDecoder:
    def __init__(self, stream: Bitstream):
        self.data = stream.data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()
        self._r = 0

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise TruncatedStreamError(f"stream exhausted after {len(self.data)} bytes")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def target(self) -> int:
        self._r = self.range >> CDF_PRECISION
        return min(self.code // self._r, CDF_TOTAL - 1)

    def consume(self, cum: int, freq: int):
        self.code -= self._r * cum
        self.range = self._r * freq
        while self.range < RENORM:
            self.code = ((self.code << 8) | self._byte()) & MASK32
            self.range <<= 8

    def decode_symbol(self, table: CdfTable) -> int:
        target = self.target()
        slot = int(table.cdf.searchsorted(target, side="right")) - 1
        self.consume(*table.frequency(slot))
        if slot == table.symbols and table.escape:
            payload = self.target()
            self.consume(payload, 1)
            return unzigzag(payload)
        return table.s_min + slot

    def finish(self):
        if self.pos != len(self.data):
            raise CorruptionError(f"{len(self.data) - self.pos} unread bytes left in stream")


def rc_encode(symbols: Sequence[int], tables: Sequence[CdfTable]) -> Bitstream:
    encoder = RangeEncoder()
    for s, table in zip(symbols, tables, strict=True):
        encoder.encode_symbol(table, int(s))
    return encoder.finish()


def rc_decode(stream: Bitstream, tables: Sequence[CdfTable]) -> list[int]:
    decoder = RangeDecoder(stream)
    out = [decoder.decode_symbol(table) for table in tables]
    decoder.finish()
    return out


# ─────────────────────────────────────────────
# CONTAINER
# ─────────────────────────────────────────────
class MetadataContainer(BaseModel):
    version: int = VERSION
    orig_width: int
    orig_height: int
    pad_width: int
    pad_height: int
    steps: int = Field(ge=1, le=255)
    model_hash: bytes = Field(min_length=32, max_length=32)
    lmbda: float
    means: ChannelMeans
    hyper: bytes
    latents: List[bytes]

    @property
    def payload_bits(self) -> int:
        """Channel means plus every stream; framing is excluded."""
        streams = len(self.hyper) + sum(len(s) for s in self.latents)
        return 8 * (2 * len(self.means.values) + streams)

    @property
    def bpp(self) -> float:
        return bits_per_pixel(self.payload_bits, self.orig_width, self.orig_height)


def bits_per_pixel(bits: float, width: int, height: int) -> float:
    return bits / (width * height)


def container_write(c: MetadataContainer) -> bytes:
    if len(c.latents) != c.steps:
        raise ValueError(f"{len(c.latents)} latent streams for {c.steps} steps")
    body = bytearray(struct.pack("<HIIIIB", c.version, c.orig_width, c.orig_height, c.pad_width, c.pad_height, c.steps))
    body += c.model_hash
    body += struct.pack("<d", c.lmbda)
    body += struct.pack("<H", len(c.means.values))
    body += struct.pack(f"<{len(c.means.values)}h", *c.means.values)
    for stream in [c.hyper, *c.latents]:
        body += struct.pack("<I", len(stream)) + stream
    return MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(body))


def container_read(data: bytes, expected_hash: bytes | None = None) -> MetadataContainer:
    """Parse a container; checks run magic, CRC, version, then model hash."""
    if data[:4] != MAGIC:
        raise MagicError(f"bad magic {data[:4]!r}")
    if len(data) < 8:
        raise TruncatedStreamError("container shorter than its framing")
    body, (crc,) = data[4:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CrcError("container CRC mismatch")

    pos = 0

    def take(fmt: str) -> tuple:
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise TruncatedStreamError(f"container ends inside a field at offset {pos + 4}")
        out = struct.unpack_from(fmt, body, pos)
        pos += size
        return out

    (version,) = take("<H")
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}")
    ow, oh, pw, ph, steps = take("<IIIIB")
    model_hash = bytes(take("<32s")[0])
    if expected_hash is not None and model_hash != expected_hash:
        raise HashMismatchError(
            f"container was written by model {model_hash.hex()[:16]}..., loaded model is {expected_hash.hex()[:16]}..."
        )
    (lmbda,) = take("<d")
    (count,) = take("<H")
    means = list(take(f"<{count}h"))
    streams = []
    for _ in range(steps + 1):
        (length,) = take("<I")
        (chunk,) = take(f"<{length}s")
        streams.append(bytes(chunk))
    if pos != len(body):
        raise CorruptionError(f"{len(body) - pos} trailing bytes in container")
    return MetadataContainer(
        version=version,
        orig_width=ow,
        orig_height=oh,
        pad_width=pw,
        pad_height=ph,
        steps=steps,
        model_hash=model_hash,
        lmbda=lmbda,
        means=ChannelMeans(values=means),
        hyper=streams[0],
        latents=streams[1:],
    )


def dump_header(c: MetadataContainer, total_bytes: int) -> list[list]:
    """Rows for `inspect --dump-header`."""
    rows = [
        ["magic", MAGIC.decode()],
        ["version", c.version],
        ["original", f"{c.orig_width}x{c.orig_height}"],
        ["padded", f"{c.pad_width}x{c.pad_height}"],
        ["steps", c.steps],
        ["model_hash", c.model_hash.hex()],
        ["lambda", c.lmbda],
        ["means", " ".join(str(q) for q in c.means.values)],
        ["hyper_bytes", len(c.hyper)],
    ]
    rows += [[f"latent{k}_bytes", len(s)] for k, s in enumerate(c.latents)]
    rows += [
        ["payload_bits", c.payload_bits],
        ["header_bytes", total_bytes - c.payload_bits // 8],
        ["bpp", c.bpp],
    ]
    return rows

