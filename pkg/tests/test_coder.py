import struct
import zlib

import numpy as np
import pytest

from coder import (
    CARRY,
    MAGIC,
    Bitstream,
    MetadataContainer,
    RangeEncoder,
    bits_per_pixel,
    container_read,
    container_write,
    dump_header,
    rc_decode,
    rc_encode,
)
from entropy import CdfTable, ChannelMeans, table_bits
from errors import (
    CorruptionError,
    CrcError,
    EscapeRangeError,
    HashMismatchError,
    MagicError,
    TruncatedStreamError,
    VersionError,
)


def _random_case(rng: np.random.Generator, count: int, escape_rate: float = 0.0):
    """Random tables and symbols drawn from them, with occasional out-of-range symbols."""
    tables, symbols = [], []
    for _ in range(rng.integers(1, 6)):
        size = int(rng.integers(1, 40))
        pmf = rng.dirichlet(np.full(size, 0.5)) * 0.999
        tables.append((CdfTable.from_pmf(int(rng.integers(-20, 5)), pmf), pmf / pmf.sum()))
    out_tables = []
    for _ in range(count):
        table, pmf = tables[int(rng.integers(len(tables)))]
        if rng.random() < escape_rate:
            s = int(rng.integers(-32768, 32768))
            if table.slot(s) is not None:
                s = table.s_max + 1
        else:
            s = table.s_min + int(rng.choice(len(pmf), p=pmf))
        out_tables.append(table)
        symbols.append(s)
    return symbols, out_tables


class CountingEncoder(RangeEncoder):
    carries = 0

    def encode(self, cum: int, freq: int):
        if self.low + (self.range >> 16) * cum >= CARRY:
            self.carries += 1
        super().encode(cum, freq)


class TestRangeCoder:
    @pytest.mark.parametrize("seed", range(100))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        symbols, tables = _random_case(rng, int(rng.integers(0, 300)), escape_rate=0.02)
        assert rc_decode(rc_encode(symbols, tables), tables) == symbols

    def test_empty_stream(self):
        stream = rc_encode([], [])
        assert len(stream.data) == 4
        assert rc_decode(stream, []) == []

    @pytest.mark.parametrize("seed", range(5))
    def test_rate_close_to_estimate(self, seed):
        rng = np.random.default_rng(1000 + seed)
        symbols, tables = _random_case(rng, 4000)
        estimated = table_bits(tables, symbols)
        actual = rc_encode(symbols, tables).bit_length
        assert abs(actual - estimated) <= 0.005 * estimated + 64

    def test_least_probable_symbol_round_trips(self):
        table = CdfTable(s_min=0, cdf=np.array([0, 1, 65536], dtype=np.int64), escape=False)
        table.check()
        assert table.probability(0) == 2.0 ** -16
        for symbols in ([0], [1, 0, 1, 1, 0]):
            stream = rc_encode(symbols, [table] * len(symbols))
            assert rc_decode(stream, [table] * len(symbols)) == symbols
        assert rc_encode([0], [table]).bit_length <= 16 + 32

    def test_uniform_byte_stream_costs_eight_bits_per_symbol(self):
        rng = np.random.default_rng(8)
        table = CdfTable.from_pmf(0, np.full(256, 1 / 256), escape=False)
        symbols = [int(s) for s in rng.integers(0, 256, 100)]
        stream = rc_encode(symbols, [table] * 100)
        assert table_bits([table] * 100, symbols) == pytest.approx(800.0, abs=1.0)
        assert abs(stream.bit_length - 800) <= 64
        assert rc_decode(stream, [table] * 100) == symbols

    def test_carry_propagation(self):
        rng = np.random.default_rng(7)
        table = CdfTable.from_pmf(0, np.full(256, 1 / 256), escape=False)
        symbols = [int(s) for s in rng.integers(0, 256, 20000)]
        encoder = CountingEncoder()
        for s in symbols:
            encoder.encode_symbol(table, s)
        stream = encoder.finish()
        assert encoder.carries > 0
        assert rc_decode(stream, [table] * len(symbols)) == symbols

    def test_escape_extremes(self):
        table = CdfTable.from_pmf(-2, np.array([0.1, 0.2, 0.4, 0.2, 0.09]))
        symbols = [-32768, 32767, 3, -3, 0, 1000]
        assert rc_decode(rc_encode(symbols, [table] * 6), [table] * 6) == symbols

    def test_escape_bits(self):
        table = CdfTable.from_pmf(0, np.array([0.5, 0.49]))
        assert table.bits(5) >= 16

    def test_no_escape_slot(self):
        table = CdfTable.from_pmf(0, np.array([0.5, 0.5]), escape=False)
        with pytest.raises(EscapeRangeError):
            rc_encode([2], [table])

    def test_payload_overflow(self):
        table = CdfTable.from_pmf(0, np.array([0.5, 0.49]))
        with pytest.raises(EscapeRangeError):
            rc_encode([40000], [table])

    def test_truncated_stream(self):
        rng = np.random.default_rng(3)
        symbols, tables = _random_case(rng, 200)
        data = rc_encode(symbols, tables).data
        with pytest.raises(TruncatedStreamError):
            rc_decode(Bitstream(data[:-2]), tables)

    def test_trailing_bytes(self):
        table = CdfTable.from_pmf(0, np.array([0.5, 0.49]))
        data = rc_encode([0, 1, 0], [table] * 3).data
        with pytest.raises(CorruptionError):
            rc_decode(Bitstream(data + b"\x00"), [table] * 3)


def _container(**overrides) -> MetadataContainer:
    values = dict(
        orig_width=40,
        orig_height=36,
        pad_width=64,
        pad_height=64,
        steps=2,
        model_hash=bytes(range(32)),
        lmbda=0.01,
        means=ChannelMeans(values=[19, -64, 0]),
        hyper=b"\x01\x02\x03\x04\x05",
        latents=[b"\xaa" * 9, b"\xbb" * 4],
    )
    values.update(overrides)
    return MetadataContainer(**values)


class TestContainer:
    def test_round_trip(self):
        c = _container()
        data = container_write(c)
        assert data[:4] == MAGIC
        assert container_read(data, expected_hash=bytes(range(32))) == c

    def test_payload_bits_and_bpp(self):
        c = _container()
        assert c.payload_bits == 8 * (2 * 3 + 5 + 9 + 4)
        assert c.bpp == pytest.approx(c.payload_bits / (40 * 36))
        assert bits_per_pixel(100, 1000, 1000) == pytest.approx(1e-4)

    def test_stream_count_must_match_steps(self):
        with pytest.raises(ValueError):
            container_write(_container(steps=3))

    def test_bad_magic(self):
        data = container_write(_container())
        with pytest.raises(MagicError):
            container_read(b"XLCM" + data[4:])

    def test_crc(self):
        data = bytearray(container_write(_container()))
        data[20] ^= 0x01
        with pytest.raises(CrcError):
            container_read(bytes(data))

    def test_version(self):
        with pytest.raises(VersionError):
            container_read(container_write(_container(version=2)))

    def test_model_hash(self):
        data = container_write(_container())
        with pytest.raises(HashMismatchError):
            container_read(data, expected_hash=b"\xff" * 32)

    @pytest.mark.parametrize("keep", [0, 3, 6, 30])
    def test_truncation(self, keep):
        data = container_write(_container())
        with pytest.raises(CorruptionError):
            container_read(data[:keep])

    def test_field_truncated_under_valid_crc(self):
        body = container_write(_container())[4:-4][:12]
        with pytest.raises(TruncatedStreamError):
            container_read(MAGIC + body + struct.pack("<I", zlib.crc32(body)))

    def test_every_byte_flip_is_detected(self):
        data = container_write(_container())
        for i in range(len(data)):
            flipped = bytearray(data)
            flipped[i] ^= 0x40
            with pytest.raises(CorruptionError):
                container_read(bytes(flipped), expected_hash=bytes(range(32)))

    def test_dump_header(self):
        c = _container()
        data = container_write(c)
        rows = dict((k, v) for k, v in dump_header(c, len(data)))
        assert rows["original"] == "40x36"
        assert rows["steps"] == 2
        assert rows["latent1_bytes"] == 4
        assert rows["header_bytes"] == len(data) - c.payload_bits // 8
