"""Turn raw frames and level series into model-ready samples."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DegenerateInput,
    IrregularSpacing,
    MisalignedSeries,
    OutOfBounds,
    ShapeMismatch,
    TooFewSamples,
)
from .grid_io import GridMeta, LevelSeries, PrecipFrame

log = logging.getLogger(__name__)

ABSOLUTE = "absolute"
RESIDUAL = "residual"
MODES = (ABSOLUTE, RESIDUAL)


@dataclass(frozen=True)
class ClipSpec:
    center_lat: float
    center_lon: float
    win_h: int
    win_w: int

    def __post_init__(self):
        if self.win_h < 1 or self.win_w < 1:
            raise ShapeMismatch("clip window must be at least 1x1")


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.60
    inner_train_frac: float = 0.80

    def __post_init__(self):
        for name in ("train_frac", "inner_train_frac"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Windowed (rain history, level target) pairs.

    The rain frames are stored once as ``frames[T, h, w]`` and each sample is
    the slice ending at ``issue_index[i]``. Subsets share ``frames``, so
    splitting and batching never copy the full input tensor.
    """

    frames: np.ndarray = field(repr=False)
    issue_index: np.ndarray
    issue_times: np.ndarray
    targets: np.ndarray
    anchor_levels: np.ndarray
    horizon_steps: int
    lookback_steps: int
    mode: str

    def __post_init__(self):
        n = len(self.issue_index)
        if not (len(self.targets) == len(self.anchor_levels) == len(self.issue_times) == n):
            raise ShapeMismatch("targets, anchors and issue indices must align")
        if self.horizon_steps < 1 or self.lookback_steps < 1:
            raise ValueError("horizon_steps and lookback_steps must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def __len__(self) -> int:
        return len(self.issue_index)

    @property
    def window_shape(self) -> tuple[int, int, int]:
        return (self.lookback_steps, *self.frames.shape[1:])

    def batch_inputs(self, idx) -> np.ndarray:
        """Gather ``[len(idx), L, h, w]`` inputs for the given sample indices."""
        ends = self.issue_index[np.asarray(idx, dtype=np.int64)]
        offsets = np.arange(-self.lookback_steps + 1, 1)
        return self.frames[ends[:, None] + offsets[None, :]]

    @property
    def inputs(self) -> np.ndarray:
        """All inputs as one ``[N, L, h, w]`` array (materialised on access)."""
        return self.batch_inputs(np.arange(len(self)))

    @property
    def target_levels(self) -> np.ndarray:
        if self.mode == RESIDUAL:
            return self.anchor_levels + self.targets
        return self.targets

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx) if not isinstance(idx, slice) else idx
        return replace(
            self,
            issue_index=self.issue_index[idx],
            issue_times=self.issue_times[idx],
            targets=self.targets[idx],
            anchor_levels=self.anchor_levels[idx],
        )


# --- spatial ----------------------------------------------------------------


def latlon_to_index(meta: GridMeta, lat: float, lon: float, shape=None) -> tuple[int, int]:
    """Map a coordinate to the nearest (row, col); half-way values round up.

    ``shape`` is the grid's ``(height, width)``; when omitted only negative
    indices are rejected.
    """
    row = math.floor((lat - meta.origin_lat) / meta.lat_step + 0.5)
    col = math.floor((lon - meta.origin_lon) / meta.lon_step + 0.5)
    if row < 0 or col < 0:
        raise OutOfBounds(f"({lat}, {lon}) maps to ({row}, {col}), outside the grid")
    if shape is not None and (row >= shape[0] or col >= shape[1]):
        raise OutOfBounds(f"({lat}, {lon}) maps to ({row}, {col}), grid is {shape}")
    return row, col


def window_origin(frame_shape, spec: ClipSpec, meta: GridMeta) -> tuple[int, int]:
    """Top-left (row, col) of the clip window.

    The centre cell sits at offset ``((win_h - 1) // 2, (win_w - 1) // 2)``
    inside the window, i.e. the upper-left of the middle block for even sizes.
    """
    rc, cc = latlon_to_index(meta, spec.center_lat, spec.center_lon, frame_shape)
    r0 = rc - (spec.win_h - 1) // 2
    c0 = cc - (spec.win_w - 1) // 2
    if r0 < 0 or c0 < 0 or r0 + spec.win_h > frame_shape[0] or c0 + spec.win_w > frame_shape[1]:
        raise OutOfBounds(
            f"{spec.win_h}x{spec.win_w} window at ({r0}, {c0}) exceeds grid {frame_shape}"
        )
    return r0, c0


def clip_window(frame: PrecipFrame, spec: ClipSpec, meta: GridMeta) -> PrecipFrame:
    shape = (frame.height, frame.width)
    r0, c0 = window_origin(shape, spec, meta)
    sub = frame.grid[r0 : r0 + spec.win_h, c0 : c0 + spec.win_w]
    return PrecipFrame.from_grid(sub, frame.timestamp, frame.cell_km)


# --- temporal ---------------------------------------------------------------


def _check_regular(frames: Sequence[PrecipFrame]) -> None:
    if not frames:
        return
    shape = (frames[0].height, frames[0].width)
    for f in frames:
        if (f.height, f.width) != shape:
            raise ShapeMismatch(f"frame at {f.timestamp} is {f.height}x{f.width}, expected {shape}")
    if len(frames) > 2:
        ts = np.array([f.timestamp for f in frames], dtype=np.int64)
        d = np.diff(ts)
        if (d != d[0]).any() or d[0] <= 0:
            raise IrregularSpacing("frames must be equally spaced and ascending")
    elif len(frames) == 2 and frames[1].timestamp <= frames[0].timestamp:
        raise IrregularSpacing("frames must be ascending in time")


def aggregate_temporal(frames: Sequence[PrecipFrame], k: int) -> list[PrecipFrame]:
    """Sum consecutive groups of ``k`` frames; NaN counts as 0 mm.

    Each output carries the timestamp of the last frame in its group. A
    trailing group shorter than ``k`` is dropped.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    frames = list(frames)
    _check_regular(frames)
    out = []
    for j in range(len(frames) // k):
        group = frames[j * k : (j + 1) * k]
        missing = sum(f.missing_count for f in group)
        if missing:
            log.info("frames ending %d: %d missing cells zero-filled", group[-1].timestamp, missing)
        total = np.zeros(group[0].values.size)
        for f in group:
            total += np.nan_to_num(f.values, nan=0.0)
        last = group[-1]
        out.append(PrecipFrame(last.timestamp, last.width, last.height, last.cell_km, total))
    return out


def stack_frames(frames: Sequence[PrecipFrame]) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(timestamps[T], grids[T, h, w])`` with NaN zero-filled."""
    frames = list(frames)
    _check_regular(frames)
    if not frames:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 0, 0))
    ts = np.array([f.timestamp for f in frames], dtype=np.int64)
    grids = np.stack([f.grid for f in frames])
    return ts, np.nan_to_num(grids, nan=0.0)


# --- level series -----------------------------------------------------------


def sma_smooth(series: LevelSeries, window: int) -> LevelSeries:
    """Trailing simple moving average over the non-NaN samples in each window."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    v = series.values
    if v.size == 0:
        return series
    padded = np.concatenate([np.full(window - 1, np.nan), v])
    win = sliding_window_view(padded, window)
    valid = ~np.isnan(win)
    counts = valid.sum(axis=1)
    sums = np.where(valid, win, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return series.with_values(out)


def residual_series(series: LevelSeries | np.ndarray, lag: int) -> np.ndarray:
    """``out[t] = v[t] - v[t - lag]``; the first ``lag`` entries are NaN."""
    if lag < 1:
        raise ValueError(f"lag must be >= 1, got {lag}")
    v = series.values if isinstance(series, LevelSeries) else np.asarray(series, dtype=float)
    out = np.full(v.shape, np.nan)
    out[lag:] = v[lag:] - v[:-lag]
    return out


def reconstruct_from_residuals(residuals, head, lag: int) -> np.ndarray:
    """Invert :func:`residual_series` given the first ``lag`` original values."""
    r = np.asarray(residuals, dtype=float)
    out = np.empty_like(r)
    out[:lag] = head[:lag]
    for t in range(lag, r.size):
        out[t] = out[t - lag] + r[t]
    return out


def pearson_corr(x, y) -> float:
    """Product-moment correlation over the pairwise-complete entries."""
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.shape != y.shape:
        raise DegenerateInput(f"length mismatch: {x.size} vs {y.size}")
    keep = ~(np.isnan(x) | np.isnan(y))
    x, y = x[keep], y[keep]
    if x.size < 2:
        raise DegenerateInput("need at least two pairwise-complete samples")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateInput("correlation undefined for a constant series")
    dx = x - x.mean()
    dy = y - y.mean()
    den = math.sqrt(np.dot(dx, dx)) * math.sqrt(np.dot(dy, dy))
    if den == 0:
        raise DegenerateInput("correlation undefined: variance underflows")
    r = np.dot(dx, dy) / den
    return float(min(1.0, max(-1.0, r)))


def rain_window_sum(rain_mean, window: int) -> np.ndarray:
    """Trailing sum of rain over ``window`` steps; NaN before a full window."""
    r = np.asarray(rain_mean, dtype=float)
    out = np.full(r.shape, np.nan)
    if r.size >= window:
        out[window - 1 :] = sliding_window_view(r, window).sum(axis=1)
    return out


def correlation_diagnostics(rain_mean, levels: LevelSeries, lag: int = 8) -> dict:
    """Correlate trailing rain sums with the level and with its ``lag``-step change."""
    rsum = rain_window_sum(rain_mean, lag)
    return {
        "lag": lag,
        "corr_rain_level": pearson_corr(rsum, levels.values),
        "corr_rain_delta": pearson_corr(rsum, residual_series(levels, lag)),
    }


# --- windows and splits -----------------------------------------------------


def make_windows(
    rain: Sequence[PrecipFrame] | tuple[np.ndarray, np.ndarray],
    levels: LevelSeries,
    L: int,
    H: int,
    mode: str = RESIDUAL,
) -> SampleSet:
    """Build samples issued at every time ``t`` with full history and a target.

    ``rain`` is a sequence of frames or a ``(timestamps, grids)`` pair as from
    :func:`stack_frames`. Frame ``t`` holds rain accumulated up to ``t``; the
    level sample with the same timestamp is the anchor.
    """
    if L < 1 or H < 1:
        raise ValueError("L and H must be >= 1")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if isinstance(rain, tuple):
        ts, grids = rain
        ts = np.asarray(ts, dtype=np.int64)
        if ts.size > 1 and (np.diff(ts) != levels.step_s).any():
            raise MisalignedSeries("rain timestamps must follow the level step")
    else:
        ts, grids = stack_frames(rain)
    if ts.size == 0 or levels.values.size == 0:
        raise MisalignedSeries("rain and levels must both be nonempty")
    if ts.size > 1 and ts[1] - ts[0] != levels.step_s:
        raise MisalignedSeries(
            f"rain step {int(ts[1] - ts[0])} s differs from level step {levels.step_s} s"
        )
    offset, rem = divmod(int(ts[0]) - levels.start, levels.step_s)
    if rem:
        raise MisalignedSeries("rain and level timestamps are not on the same grid")

    # issue index t is in rain coordinates; level index is t + offset
    lev = levels.values
    t = np.arange(L - 1, ts.size)
    li = t + offset
    ok = (li >= 0) & (li + H < lev.size)
    t, li = t[ok], li[ok]
    anchor = lev[li]
    future = lev[li + H]
    keep = ~(np.isnan(anchor) | np.isnan(future))
    t, anchor, future = t[keep], anchor[keep], future[keep]
    target = future - anchor if mode == RESIDUAL else future.copy()
    return SampleSet(
        frames=grids,
        issue_index=t,
        issue_times=ts[t],
        targets=target,
        anchor_levels=anchor,
        horizon_steps=H,
        lookback_steps=L,
        mode=mode,
    )


def split_sizes(n: int, spec: SplitSpec = SplitSpec()) -> tuple[int, int, int]:
    """Nested floor: ``fit = floor(train_frac*n)``, ``train = floor(inner*fit)``."""
    fit = math.floor(spec.train_frac * n + 1e-9)
    n_train = math.floor(spec.inner_train_frac * fit + 1e-9)
    return n_train, fit - n_train, n - fit


def split_dataset(
    samples: SampleSet, spec: SplitSpec = SplitSpec(), purge: bool = False
) -> tuple[SampleSet, SampleSet, SampleSet]:
    """Chronological train/validation/test split.

    With ``purge`` set, windows whose span ``[t-L+1, t+H]`` straddles a
    segment boundary are removed from both sides, so no rain frame or target
    level is shared across segments.
    """
    n = len(samples)
    if n < 10:
        raise TooFewSamples(f"need at least 10 samples, got {n}")
    order = np.argsort(samples.issue_index, kind="stable")
    if not np.array_equal(order, np.arange(n)):
        samples = samples.subset(order)
    n_train, n_val, _ = split_sizes(n, spec)
    parts = [
        samples.subset(slice(0, n_train)),
        samples.subset(slice(n_train, n_train + n_val)),
        samples.subset(slice(n_train + n_val, n)),
    ]
    if not purge:
        return tuple(parts)

    L, H = samples.lookback_steps, samples.horizon_steps
    bounds = [int(p.issue_index[0]) for p in parts[1:] if len(p)]
    purged = []
    for p in parts:
        lo = p.issue_index - L + 1
        hi = p.issue_index + H
        keep = np.ones(len(p), dtype=bool)
        for b in bounds:
            keep &= ~((lo < b) & (b <= hi))
        purged.append(p.subset(np.flatnonzero(keep)))
    return tuple(purged)


def input_scale(samples: SampleSet, q: float = 99.0, floor_mm: float = 1.0) -> float:
    """Normalisation divisor: the q-th percentile cell value over the frames the
    samples touch, floored at ``floor_mm``."""
    if len(samples) == 0:
        return floor_mm
    lo = int(samples.issue_index.min()) - samples.lookback_steps + 1
    hi = int(samples.issue_index.max()) + 1
    value = float(np.percentile(samples.frames[lo:hi], q))
    return max(floor_mm, value)
