import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radarflood.errors import (
    BadMagic,
    InconsistentStep,
    InvariantViolation,
    MalformedRow,
    NonFiniteNegative,
    TruncatedPayload,
    UnsortedRows,
)
from radarflood.grid_io import (
    HEADER_SIZE,
    GridMeta,
    LevelSeries,
    PrecipFrame,
    iter_rpg_stream,
    parse_rpg,
    read_level_csv,
    write_level_csv,
    write_rpg,
    write_rpg_stream,
)


def test_header_is_24_bytes():
    assert HEADER_SIZE == 24


def test_two_by_one_frame_layout():
    f = PrecipFrame(0, 2, 1, 1.0, [0.0, 1.5])
    data = write_rpg(f)
    assert len(data) == 32
    assert data[:4] == b"RPG1"
    assert struct.unpack("<HHqfI", data[4:24]) == (2, 1, 0, 1.0, 0)
    assert struct.unpack("<2f", data[24:]) == (0.0, 1.5)


def test_nan_is_stored_as_canonical_quiet_nan():
    data = write_rpg(PrecipFrame(5, 1, 1, 1.0, [math.nan]))
    assert len(data) == 28
    assert data[24:] == bytes.fromhex("0000c07f")
    back = parse_rpg(data)
    assert back.missing_count == 1


def test_other_nan_payloads_are_canonicalised():
    raw = bytearray(write_rpg(PrecipFrame(0, 1, 1, 1.0, [0.0])))
    raw[24:] = struct.pack("<I", 0x7FC01234)
    back = parse_rpg(bytes(raw))
    assert write_rpg(back)[24:] == bytes.fromhex("0000c07f")


def test_roundtrip_keeps_float32_values():
    rng = np.random.default_rng(3)
    vals = rng.gamma(0.5, 2.0, size=12).astype(np.float32)
    vals[4] = np.nan
    f = PrecipFrame(1_600_000_000, 4, 3, 1.0, vals)
    assert parse_rpg(write_rpg(f)) == f


def test_bad_magic_and_truncation():
    data = write_rpg(PrecipFrame(0, 2, 2, 1.0, [0, 1, 2, 3]))
    with pytest.raises(BadMagic):
        parse_rpg(b"XPG1" + data[4:])
    with pytest.raises(TruncatedPayload):
        parse_rpg(data[:-1])
    with pytest.raises(TruncatedPayload):
        parse_rpg(data + b"\0")
    with pytest.raises(TruncatedPayload):
        parse_rpg(b"RPG1abc")
    with pytest.raises(BadMagic):
        parse_rpg(b"JPG")


def test_negative_and_infinite_values_rejected_on_decode():
    for bad in (-1.0, math.inf):
        raw = bytearray(write_rpg(PrecipFrame(0, 1, 1, 1.0, [0.0])))
        raw[24:] = struct.pack("<f", bad)
        with pytest.raises(NonFiniteNegative):
            parse_rpg(bytes(raw))


def test_nonzero_reserved_rejected():
    raw = bytearray(write_rpg(PrecipFrame(0, 1, 1, 1.0, [0.0])))
    raw[20] = 1
    with pytest.raises(InvariantViolation):
        parse_rpg(bytes(raw))


def test_writer_validates():
    with pytest.raises(InvariantViolation):
        write_rpg(PrecipFrame(0, 2, 2, 1.0, [0.0, 1.0, -1.0, 0.0]))
    with pytest.raises(InvariantViolation):
        write_rpg(PrecipFrame(0, 3, 2, 1.0, [0.0] * 4))
    with pytest.raises(InvariantViolation):
        write_rpg(PrecipFrame(0, 1, 1, 0.0, [0.0]))


def test_stream_roundtrip_and_truncation():
    frames = [PrecipFrame(900 * i, 3, 2, 1.0, np.arange(6) * i) for i in range(4)]
    data = write_rpg_stream(frames)
    assert list(iter_rpg_stream(data)) == frames
    with pytest.raises(TruncatedPayload):
        list(iter_rpg_stream(data[:-3]))
    assert list(iter_rpg_stream(b"")) == []


def test_grid_meta_rejects_zero_step():
    with pytest.raises(InvariantViolation):
        GridMeta(0, 0, 0.0, 1.0)


@settings(max_examples=60, deadline=None)
@given(
    w=st.integers(0, 6),
    h=st.integers(0, 6),
    ts=st.integers(-(2**62), 2**62),
    data=st.data(),
)
def test_rpg_roundtrip_property(w, h, ts, data):
    vals = data.draw(
        st.lists(
            st.one_of(st.just(math.nan), st.floats(0, 1e6, width=32)),
            min_size=w * h,
            max_size=w * h,
        )
    )
    f = PrecipFrame(ts, w, h, 1.0, vals)
    assert parse_rpg(write_rpg(f)) == f


# --- CSV --------------------------------------------------------------------


def test_csv_regular_series():
    s = read_level_csv("timestamp,level_cm\n0,10\n900,11\n1800,12\n")
    assert s.step_s == 900 and s.start == 0
    assert s.values.tolist() == [10, 11, 12]


def test_csv_gap_becomes_nan():
    s = read_level_csv("timestamp,level_cm\n0,10\n1800,12\n")
    assert s.step_s == 900
    assert s.values[0] == 10 and math.isnan(s.values[1]) and s.values[2] == 12


def test_csv_step_falls_back_to_smallest_delta():
    s = read_level_csv("timestamp,level_cm\n0,1\n500,2\n")
    assert s.step_s == 500
    with pytest.raises(InconsistentStep):
        read_level_csv("timestamp,level_cm\n0,1\n500,2\n900,3\n")


@pytest.mark.parametrize(
    "text, err",
    [
        ("time,level\n0,1\n", MalformedRow),
        ("timestamp,level_cm\n0\n", MalformedRow),
        ("timestamp,level_cm\n0,abc\n", MalformedRow),
        ("timestamp,level_cm\n0,-1\n", MalformedRow),
        ("timestamp,level_cm\n0,inf\n", MalformedRow),
        ("timestamp,level_cm\n900,1\n0,2\n", UnsortedRows),
        ("timestamp,level_cm\n0,1\n0,2\n", UnsortedRows),
    ],
)
def test_csv_errors(text, err):
    with pytest.raises(err):
        read_level_csv(text)


def test_csv_roundtrip_with_gaps():
    s = LevelSeries("x", 1000, 900, [1.0, math.nan, 2.25, 30.0, 1 / 3])
    assert read_level_csv(write_level_csv(s), "x") == s


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.one_of(st.just(math.nan), st.floats(0, 1e4)), min_size=1, max_size=30),
    st.integers(-(10**9), 10**9),
)
def test_csv_roundtrip_property(vals, start):
    if math.isnan(vals[0]) or math.isnan(vals[-1]):
        vals = [0.0] + vals + [0.0]  # leading/trailing gaps are not representable
    s = LevelSeries("", start, 900, vals)
    assert read_level_csv(write_level_csv(s)) == s
