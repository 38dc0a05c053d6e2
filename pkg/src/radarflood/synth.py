"""Synthetic storm fields and a linear-reservoir catchment.

Rain is a superposition of drifting Gaussian cells; the level responds to the
catchment-mean rain only, through ``s[t] = k * s[t-1] + gain * rain[t]`` and
``level[t] = base + s[t] + noise``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvariantViolation, TooShort
from .grid_io import LevelSeries, PrecipFrame
from .preprocess import RESIDUAL, SampleSet, make_windows, sma_smooth
from .rng import Xoshiro256, derive_seed

ATTRS_PER_STEP = 6


@dataclass(frozen=True)
class StormSpec:
    """Storm-cell generator settings.

    ``storm_rate`` is the probability that a new cell is born at a step.
    ``amplitude_mm`` is the mean peak intensity (mm per step) at a cell centre.
    """

    height: int = 16
    width: int = 16
    storm_rate: float = 0.03
    amplitude_mm: float = 4.0
    sigma_cells: float = 4.0
    drift: tuple[float, float] = (0.3, 0.4)
    lifetime_steps: int = 16
    seed: int = 1
    start: int = 0
    step_s: int = 900
    cell_km: float = 1.0

    def __post_init__(self):
        if self.amplitude_mm < 0:
            raise InvariantViolation("amplitude_mm must be >= 0")
        if self.sigma_cells <= 0:
            raise InvariantViolation("sigma_cells must be > 0")
        if not 0 <= self.storm_rate <= 1:
            raise InvariantViolation("storm_rate is a per-step probability in [0, 1]")
        if self.height < 1 or self.width < 1 or self.lifetime_steps < 1:
            raise InvariantViolation("grid and lifetime must be positive")


@dataclass(frozen=True)
class ReservoirSpec:
    k_decay: float = 0.97
    gain_cm_per_mm: float = 2.0
    base_level_cm: float = 30.0
    noise_sd_cm: float = 0.5

    def __post_init__(self):
        if not 0 < self.k_decay < 1:
            raise InvariantViolation("k_decay must lie in (0, 1)")
        if self.gain_cm_per_mm < 0 or self.base_level_cm < 0 or self.noise_sd_cm < 0:
            raise InvariantViolation("gain, base level and noise must be >= 0")


@dataclass
class _Cell:
    row: float
    col: float
    d_row: float
    d_col: float
    peak: float
    life: int
    age: int = 0


def storm_grids(spec: StormSpec, n_steps: int) -> np.ndarray:
    """``[n_steps, height, width]`` rain depths in mm per step."""
    if n_steps < 1:
        raise TooShort("n_steps must be >= 1")
    births = Xoshiro256(derive_seed(spec.seed, "births"))
    attrs = Xoshiro256(derive_seed(spec.seed, "attrs"))
    rows = np.arange(spec.height, dtype=np.float64)[:, None]
    cols = np.arange(spec.width, dtype=np.float64)[None, :]
    margin = 2.0 * spec.sigma_cells
    out = np.zeros((n_steps, spec.height, spec.width))
    cells: list[_Cell] = []
    for t in range(n_steps):
        u = births.random()
        a = [attrs.random() for _ in range(ATTRS_PER_STEP)]
        if u < spec.storm_rate:
            cells.append(
                _Cell(
                    row=-margin + a[0] * (spec.height + 2 * margin),
                    col=-margin + a[1] * (spec.width + 2 * margin),
                    d_row=spec.drift[0] * (0.5 + a[2]),
                    d_col=spec.drift[1] * (0.5 + a[3]),
                    peak=spec.amplitude_mm * 2.0 * a[4],
                    life=1 + int(a[5] * 2 * spec.lifetime_steps),
                )
            )
        grid = out[t]
        alive = []
        for c in cells:
            envelope = math.sin(math.pi * (c.age + 0.5) / c.life)
            d2 = (rows - c.row) ** 2 + (cols - c.col) ** 2
            grid += c.peak * envelope * np.exp(-d2 / (2.0 * spec.sigma_cells**2))
            c.row += c.d_row
            c.col += c.d_col
            c.age += 1
            if c.age < c.life:
                alive.append(c)
        cells = alive
    return out


def gen_storm_field(spec: StormSpec, n_steps: int) -> list[PrecipFrame]:
    """Seeded, nonnegative rain frames spaced ``spec.step_s`` apart."""
    grids = storm_grids(spec, n_steps)
    return [
        PrecipFrame.from_grid(g, spec.start + i * spec.step_s, spec.cell_km)
        for i, g in enumerate(grids)
    ]


def reservoir_states(rain_mean, k_decay: float, gain: float) -> np.ndarray:
    """Noise-free storage ``s[t] = k * s[t-1] + gain * rain[t]`` from ``s[-1] = 0``."""
    r = np.asarray(rain_mean, dtype=np.float64)
    s = np.empty_like(r)
    prev = 0.0
    for t in range(r.size):
        prev = k_decay * prev + gain * r[t]
        s[t] = prev
    return s


def linear_reservoir(
    rain_mean, spec: ReservoirSpec, seed: int, start: int = 0, step_s: int = 900
) -> LevelSeries:
    r = np.asarray(rain_mean, dtype=np.float64)
    if not np.isfinite(r).all():
        raise InvariantViolation("rain must be finite")
    level = spec.base_level_cm + reservoir_states(r, spec.k_decay, spec.gain_cm_per_mm)
    if spec.noise_sd_cm > 0:
        noise = Xoshiro256(derive_seed(seed, "noise")).normal_array(r.size)
        level = np.maximum(level + spec.noise_sd_cm * noise, 0.0)
    return LevelSeries("synthetic", start, step_s, level)


@dataclass
class SyntheticData:
    samples: SampleSet
    timestamps: np.ndarray
    grids: np.ndarray = field(repr=False)
    rain_mean: np.ndarray = field(repr=False)
    raw_levels: LevelSeries = field(repr=False)
    levels: LevelSeries = field(repr=False)


def gen_dataset(
    storm: StormSpec,
    reservoir: ReservoirSpec,
    n_steps: int,
    L: int,
    H: int,
    mode: str = RESIDUAL,
    smooth_window: int = 8,
) -> SyntheticData:
    """Storm field -> catchment mean -> reservoir -> smoothing -> windows."""
    if n_steps <= L + H:
        raise TooShort(f"n_steps={n_steps} must exceed L + H = {L + H}")
    grids = storm_grids(storm, n_steps)
    ts = storm.start + storm.step_s * np.arange(n_steps, dtype=np.int64)
    rain_mean = grids.mean(axis=(1, 2))
    raw = linear_reservoir(rain_mean, reservoir, storm.seed, storm.start, storm.step_s)
    levels = sma_smooth(raw, smooth_window) if smooth_window > 1 else raw
    samples = make_windows((ts, grids), levels, L, H, mode)
    return SyntheticData(samples, ts, grids, rain_mean, raw, levels)
