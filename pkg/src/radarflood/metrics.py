"""Forecast verification: overall skill scores and event-focused counts.

All functions take observed and predicted water levels in cm as 1D arrays of
equal length. The event framework looks only at time points where the
observed level is at or above a danger threshold and not falling.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import DegenerateInput, DegenerateObserved, InvariantViolation, LengthMismatch
from .preprocess import pearson_corr

OK = "ok"
OVER = "over"
UNDER = "under"
NOT_RELEVANT = "not_relevant"
LABELS = (OK, OVER, UNDER, NOT_RELEVANT)


def _pair(obs, pred) -> tuple[np.ndarray, np.ndarray]:
    o = np.asarray(obs, dtype=np.float64).reshape(-1)
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    if o.size != p.size:
        raise LengthMismatch(f"obs has {o.size} points, pred has {p.size}")
    if o.size == 0:
        raise LengthMismatch("empty series")
    return o, p


def _finite_pair(obs, pred) -> tuple[np.ndarray, np.ndarray]:
    o, p = _pair(obs, pred)
    if not (np.isfinite(o).all() and np.isfinite(p).all()):
        raise DegenerateInput("metrics need finite obs and pred")
    return o, p


def mse(obs, pred) -> float:
    """Mean squared error in cm^2."""
    o, p = _finite_pair(obs, pred)
    d = o - p
    return float(np.dot(d, d) / d.size)


def bp(obs, pred) -> float:
    """Pearson correlation between observed and predicted levels."""
    o, p = _finite_pair(obs, pred)
    return pearson_corr(o, p)


def nse(obs, pred) -> float:
    """Nash-Sutcliffe efficiency; 1 is perfect, 0 matches the observed mean."""
    o, p = _finite_pair(obs, pred)
    dev = o - o.mean()
    denom = float(np.dot(dev, dev))
    if denom == 0.0:
        raise DegenerateObserved("NSE undefined for a constant observed series")
    d = o - p
    return 1.0 - float(np.dot(d, d)) / denom


def ioa(obs, pred) -> float:
    """Willmott's index of agreement in [0, 1]."""
    o, p = _finite_pair(obs, pred)
    m = o.mean()
    pot = np.abs(p - m) + np.abs(o - m)
    denom = float(np.dot(pot, pot))
    if denom == 0.0:
        raise DegenerateObserved("index of agreement undefined: pred and obs both equal the observed mean")
    d = o - p
    return min(1.0, max(0.0, 1.0 - float(np.dot(d, d)) / denom))


@dataclass(frozen=True)
class EventConfig:
    min_level_cm: float = 40.0
    tolerance_b_cm: float = 10.0
    period_years: float = 1.0

    def __post_init__(self):
        if not self.min_level_cm >= 0:
            raise InvariantViolation("min_level_cm must be >= 0")
        if not self.tolerance_b_cm > 0:
            raise InvariantViolation("tolerance_b_cm must be > 0")
        if not self.period_years > 0:
            raise InvariantViolation("period_years must be > 0")

    @classmethod
    def for_steps(cls, n_steps: int, step_s: int, **kw) -> "EventConfig":
        """Config whose period covers ``n_steps`` samples of ``step_s`` seconds."""
        return cls(period_years=n_steps * step_s / (365.25 * 86400.0), **kw)


def _rising_or_equal(o: np.ndarray) -> np.ndarray:
    # index 0 has no predecessor and is never relevant
    rising = np.zeros(o.size, dtype=bool)
    rising[1:] = o[1:] >= o[:-1]
    return rising


def classify_events(obs, pred, cfg: EventConfig = EventConfig()) -> np.ndarray:
    """Label every time point as ok, over, under or not_relevant.

    A point is relevant when the observed level is at least ``min_level_cm`` and
    not below the previous observation. Relevant points are ok within
    ``tolerance_b_cm`` of the observation, over when ``pred > obs + b`` and
    under when ``pred < obs - b``.
    """
    o, p = _pair(obs, pred)
    relevant = _rising_or_equal(o) & (o >= cfg.min_level_cm)
    if not np.isfinite(p[relevant]).all():
        raise DegenerateInput("prediction missing at a relevant time point")
    b = cfg.tolerance_b_cm
    over = p > o + b
    under = p < o - b
    labels = np.full(o.size, NOT_RELEVANT, dtype=object)
    labels[relevant] = OK
    labels[relevant & over] = OVER
    labels[relevant & under] = UNDER
    return labels


@dataclass(frozen=True)
class EventReport:
    T_relevant: int
    T_not_relevant: int
    T_ok: int
    T_over: int
    T_under: int
    T_ok_avg_pct: float
    T_under_avg_pct: float
    T_over_rel_avg_pct: float
    annual_events_ok: float
    annual_events_under: float
    annual_events_over: float
    annual_events_all: float
    error_sum: float
    error_average: float
    error_max: float
    error_median: float


def event_report(obs, pred, cfg: EventConfig = EventConfig()) -> EventReport:
    """Counts, rates and miss statistics of the event-focused evaluation.

    Error statistics use absolute errors over the points labelled over or
    under; they are all 0 when there are none.
    """
    o, p = _pair(obs, pred)
    labels = classify_events(o, p, cfg)
    n_ok = int(np.count_nonzero(labels == OK))
    n_over = int(np.count_nonzero(labels == OVER))
    n_under = int(np.count_nonzero(labels == UNDER))
    n_rel = n_ok + n_over + n_under
    total = o.size
    miss = (labels == OVER) | (labels == UNDER)
    abs_err = np.abs(p[miss] - o[miss])
    if abs_err.size:
        e_sum = float(abs_err.sum())
        e_avg = e_sum / abs_err.size
        e_max = float(abs_err.max())
        e_med = float(np.median(abs_err))
    else:
        e_sum = e_avg = e_max = e_med = 0.0
    years = cfg.period_years
    return EventReport(
        T_relevant=n_rel,
        T_not_relevant=total - n_rel,
        T_ok=n_ok,
        T_over=n_over,
        T_under=n_under,
        T_ok_avg_pct=100.0 * n_ok / total,
        T_under_avg_pct=100.0 * n_under / total,
        T_over_rel_avg_pct=100.0 * n_over / total,
        annual_events_ok=n_ok / years,
        annual_events_under=n_under / years,
        annual_events_over=n_over / years,
        annual_events_all=n_rel / years,
        error_sum=e_sum,
        error_average=e_avg,
        error_max=e_max,
        error_median=e_med,
    )


SCORE_COLUMNS = ("mse", "bp", "nse", "ioa")
EVENT_COLUMNS = tuple(f.name for f in fields(EventReport))
REPORT_COLUMNS = ("model", "horizon_steps", "n") + SCORE_COLUMNS + EVENT_COLUMNS + ("flags",)


def evaluate(obs, pred, model: str, horizon_steps: int, cfg: EventConfig = EventConfig()) -> dict:
    """One report row. Undefined scores become NaN and are named in ``flags``."""
    o, p = _finite_pair(obs, pred)
    row: dict = {"model": model, "horizon_steps": int(horizon_steps), "n": int(o.size)}
    flags = []
    for name, fn in (("mse", mse), ("bp", bp), ("nse", nse), ("ioa", ioa)):
        try:
            row[name] = fn(o, p)
        except (DegenerateInput, DegenerateObserved) as exc:
            row[name] = math.nan
            flags.append(f"{name}:{exc.code}")
    row.update(asdict(event_report(o, p, cfg)))
    row["flags"] = ";".join(flags)
    return row


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_csv(rows) -> str:
    """Serialise report rows with the fixed ``REPORT_COLUMNS`` header."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def read_report_csv(text: str) -> list[dict]:
    body = "".join(ln for ln in text.splitlines(keepends=True) if not ln.startswith("#"))
    reader = csv.DictReader(io.StringIO(body))
    if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
        raise InvariantViolation("unexpected report columns")
    ints = {"horizon_steps", "n", "T_relevant", "T_not_relevant", "T_ok", "T_over", "T_under"}
    out = []
    for rec in reader:
        row = {}
        for k, v in rec.items():
            if k in ("model", "flags"):
                row[k] = v
            elif k in ints:
                row[k] = int(v)
            else:
                row[k] = float(v)
        out.append(row)
    return out


__all__ = [
    "EVENT_COLUMNS",
    "EventConfig",
    "EventReport",
    "LABELS",
    "REPORT_COLUMNS",
    "bp",
    "classify_events",
    "evaluate",
    "event_report",
    "ioa",
    "mse",
    "nse",
    "read_report_csv",
    "report_csv",
]
