"""Precipitation grid files (RPG1) and water-level CSV series.

RPG1 layout, little-endian throughout::

    offset  size  field
    0       4     magic b"RPG1"
    4       2     width   (uint16)
    6       2     height  (uint16)
    8       8     timestamp, epoch seconds (int64)
    16      4     cell_km (float32)
    20      4     reserved, must be 0
    24      4*w*h values (float32), row-major, north row first

Missing cells are IEEE quiet-NaN with zero payload (``0x7FC00000``). Any NaN
bit pattern found on disk is canonicalised to that value when decoded.

Level CSV is UTF-8 with header ``timestamp,level_cm``, integer epoch seconds
and decimal centimetres. Missing samples are simply absent rows.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import (
    BadMagic,
    InconsistentStep,
    InvariantViolation,
    MalformedRow,
    NonFiniteNegative,
    TruncatedPayload,
    UnsortedRows,
)

MAGIC = b"RPG1"
HEADER = struct.Struct("<4sHHqfI")
HEADER_SIZE = HEADER.size  # 24
QNAN_BITS = np.uint32(0x7FC00000)
CSV_HEADER = "timestamp,level_cm"
MAX_SERIES_LEN = 100_000_000  # refuse to materialise absurd gaps


def _canonical(values, dtype) -> np.ndarray:
    with np.errstate(invalid="ignore"):  # signalling NaN payloads warn on cast
        arr = np.array(values, dtype=dtype).reshape(-1)
    arr[np.isnan(arr)] = np.nan
    return arr


@dataclass(frozen=True, eq=False)
class PrecipFrame:
    """One precipitation grid in mm per interval.

    ``values`` is a flat float64 array of length ``width * height`` in row-major
    order (north row first). Files store float32, so values decoded from disk
    are float32-exact; values computed in memory (sums) keep full precision
    until written.
    """

    timestamp: int
    width: int
    height: int
    cell_km: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "values", _canonical(self.values, np.float64))
        object.__setattr__(self, "timestamp", int(self.timestamp))
        object.__setattr__(self, "cell_km", float(np.float32(self.cell_km)))
        self.values.setflags(write=False)

    @classmethod
    def from_grid(cls, grid, timestamp: int, cell_km: float = 1.0) -> "PrecipFrame":
        grid = np.asarray(grid)
        if grid.ndim != 2:
            raise InvariantViolation(f"grid must be 2D, got shape {grid.shape}")
        h, w = grid.shape
        return cls(timestamp, w, h, cell_km, grid.reshape(-1))

    @property
    def grid(self) -> np.ndarray:
        return self.values.reshape(self.height, self.width)

    @property
    def missing_count(self) -> int:
        return int(np.isnan(self.values).sum())

    def validate(self) -> None:
        if not (0 <= self.width <= 0xFFFF and 0 <= self.height <= 0xFFFF):
            raise InvariantViolation("width/height must fit in uint16")
        if self.values.size != self.width * self.height:
            raise InvariantViolation(
                f"values length {self.values.size} != {self.width}x{self.height}"
            )
        if not (math.isfinite(self.cell_km) and self.cell_km > 0):
            raise InvariantViolation(f"cell_km must be > 0, got {self.cell_km}")
        if not -(2**63) <= self.timestamp < 2**63:
            raise InvariantViolation("timestamp out of int64 range")
        bad = ~np.isnan(self.values) & ~(np.isfinite(self.values) & (self.values >= 0))
        if bad.any():
            raise InvariantViolation("precipitation values must be NaN or finite >= 0")

    def __eq__(self, other) -> bool:
        if not isinstance(other, PrecipFrame):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and self.width == other.width
            and self.height == other.height
            and np.float32(self.cell_km).tobytes() == np.float32(other.cell_km).tobytes()
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True)
class GridMeta:
    """North-up affine mapping from (lat, lon) to grid indices."""

    origin_lat: float
    origin_lon: float
    lat_step: float
    lon_step: float

    def __post_init__(self):
        if self.lat_step == 0 or self.lon_step == 0:
            raise InvariantViolation("lat_step and lon_step must be nonzero")


@dataclass(frozen=True, eq=False)
class LevelSeries:
    """Regularly sampled water levels in cm; gaps are NaN."""

    sensor_id: str
    start: int
    step_s: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).reshape(-1)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "start", int(self.start))
        object.__setattr__(self, "step_s", int(self.step_s))
        if self.step_s <= 0:
            raise InvariantViolation(f"step_s must be > 0, got {self.step_s}")

    def __len__(self) -> int:
        return self.values.size

    @property
    def timestamps(self) -> np.ndarray:
        return self.start + self.step_s * np.arange(self.values.size, dtype=np.int64)

    def with_values(self, values) -> "LevelSeries":
        return LevelSeries(self.sensor_id, self.start, self.step_s, values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LevelSeries):
            return NotImplemented
        return (
            self.sensor_id == other.sensor_id
            and self.start == other.start
            and self.step_s == other.step_s
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    __hash__ = None


# --- RPG1 -------------------------------------------------------------------


def write_rpg(frame: PrecipFrame) -> bytes:
    frame.validate()
    header = HEADER.pack(
        MAGIC, frame.width, frame.height, frame.timestamp, frame.cell_km, 0
    )
    payload = _canonical(frame.values, "<f4")
    payload.view("<u4")[np.isnan(payload)] = QNAN_BITS
    return header + payload.tobytes()


def _parse_header(buf: bytes | memoryview, offset: int):
    if len(buf) - offset < HEADER_SIZE:
        if bytes(buf[offset : offset + 4]) not in (MAGIC[: len(buf) - offset], MAGIC):
            raise BadMagic("missing RPG1 magic")
        raise TruncatedPayload(
            f"need {HEADER_SIZE} header bytes, have {len(buf) - offset}"
        )
    magic, w, h, ts, cell_km, reserved = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {magic!r}")
    if reserved != 0:
        raise InvariantViolation(f"reserved header field is {reserved}, expected 0")
    if not (math.isfinite(cell_km) and cell_km > 0):
        raise InvariantViolation(f"cell_km must be > 0, got {cell_km}")
    return w, h, ts, cell_km


def _decode_values(buf, offset: int, n: int) -> np.ndarray:
    values = np.frombuffer(buf, dtype="<f4", count=n, offset=offset)
    if np.isinf(values).any() or (values < 0).any():
        raise NonFiniteNegative("precipitation must be NaN or finite >= 0")
    return values


def parse_rpg(data: bytes) -> PrecipFrame:
    """Decode exactly one RPG1 frame.

    Raises:
        BadMagic: the first four bytes are not ``RPG1``.
        TruncatedPayload: the length differs from what the header implies.
        NonFiniteNegative: a value is negative or infinite.
    """
    buf = memoryview(data)
    w, h, ts, cell_km = _parse_header(buf, 0)
    expected = HEADER_SIZE + 4 * w * h
    if len(buf) != expected:
        raise TruncatedPayload(f"header implies {expected} bytes, got {len(buf)}")
    values = _decode_values(buf, HEADER_SIZE, w * h)
    return PrecipFrame(ts, w, h, cell_km, values)


def iter_rpg_stream(data: bytes) -> Iterator[PrecipFrame]:
    """Decode a concatenation of RPG1 frames."""
    buf = memoryview(data)
    offset = 0
    while offset < len(buf):
        w, h, ts, cell_km = _parse_header(buf, offset)
        end = offset + HEADER_SIZE + 4 * w * h
        if end > len(buf):
            raise TruncatedPayload(
                f"frame at offset {offset} needs {end - offset} bytes, "
                f"{len(buf) - offset} remain"
            )
        values = _decode_values(buf, offset + HEADER_SIZE, w * h)
        yield PrecipFrame(ts, w, h, cell_km, values)
        offset = end


def write_rpg_stream(frames: Iterable[PrecipFrame]) -> bytes:
    return b"".join(write_rpg(f) for f in frames)


# --- level CSV --------------------------------------------------------------


def _format_level(v: float) -> str:
    if float(v).is_integer():
        return str(int(v))
    return repr(float(v))


def write_level_csv(series: LevelSeries) -> str:
    lines = [CSV_HEADER]
    for ts, v in zip(series.timestamps.tolist(), series.values.tolist()):
        if math.isnan(v):
            continue
        lines.append(f"{ts},{_format_level(v)}")
    return "\n".join(lines) + "\n"


def read_level_csv(text: str, sensor_id: str = "", step_s: int = 900) -> LevelSeries:
    """Parse a level CSV onto a regular time grid.

    The nominal ``step_s`` is kept when every row delta is a multiple of it, so
    a skipped sample shows up as a NaN gap. Otherwise the step falls back to
    the smallest positive delta, which every other delta must then divide.

    Raises:
        MalformedRow: bad header, wrong column count, unparsable or negative value.
        UnsortedRows: timestamps not strictly ascending.
        InconsistentStep: a delta is not an integer multiple of the step.
    """
    lines = text.splitlines()
    if not lines or lines[0].strip().lstrip("\ufeff") != CSV_HEADER:
        raise MalformedRow(f"expected header {CSV_HEADER!r}")
    times: list[int] = []
    levels: list[float] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise MalformedRow(f"line {lineno}: expected 2 columns, got {len(parts)}")
        try:
            ts = int(parts[0].strip())
            level = float(parts[1].strip())
        except ValueError as exc:
            raise MalformedRow(f"line {lineno}: {exc}") from None
        if math.isinf(level) or level < 0:
            raise MalformedRow(f"line {lineno}: level must be finite and >= 0")
        if times and ts <= times[-1]:
            raise UnsortedRows(f"line {lineno}: timestamp {ts} <= {times[-1]}")
        times.append(ts)
        levels.append(level)

    if not times:
        return LevelSeries(sensor_id, 0, step_s, [])

    t = np.asarray(times, dtype=np.int64)
    deltas = np.diff(t)
    step = int(step_s)
    if deltas.size and (deltas % step).any():
        step = int(deltas.min())
        off_grid = deltas % step != 0
        if off_grid.any():
            raise InconsistentStep(
                f"delta {int(deltas[off_grid][0])} s is not a multiple of step {step} s"
            )
    idx = (t - t[0]) // step
    if idx[-1] >= MAX_SERIES_LEN:
        raise InconsistentStep(f"series would span {int(idx[-1]) + 1} steps of {step} s")
    values = np.full(int(idx[-1]) + 1, np.nan)
    values[idx] = levels
    return LevelSeries(sensor_id, times[0], step, values)
