"""Command-line entry point: ``radarflood {synth,ingest,train,evaluate,forecast}``.

Settings come from a flat ``key=value`` file (``--config``) overridden by
flags. Every artifact records the config hash and seed. Path-like keys are
left out of the hash so identical runs in different directories match.
Errors print as ``ERROR[Code]: message`` on stderr with exit status 2.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import grid_io, metrics, model, preprocess, synth
from .errors import (
    InsufficientHistory,
    IoError,
    MissingCheckpoint,
    MisalignedSeries,
    NonFiniteAnchor,
    PipelineError,
    TooShort,
)
from .preprocess import ABSOLUTE, MODES, RESIDUAL

log = logging.getLogger("radarflood")

RADAR_FILE = "radar.rpg"
LEVELS_FILE = "levels.csv"
MANIFEST_FILE = "manifest.json"
REPORT_FILE = "report.csv"
FORECAST_FILE = "forecast.csv"
MODEL_NAMES = {RESIDUAL: "strpmr", ABSOLUTE: "strpm"}
PATH_KEYS = frozenset({"out", "data_dir", "radar_in", "levels_in"})


@dataclass
class RunConfig:
    """Every tunable of the pipeline, flat so it maps onto ``key=value`` lines."""

    out: str = "run"
    data_dir: str = ""  # defaults to out
    seed: int = 1
    # synthetic data
    n_steps: int = 20000
    grid_h: int = 16
    grid_w: int = 16
    storm_rate: float = 0.03
    amplitude_mm: float = 4.0
    sigma_cells: float = 4.0
    drift_row: float = 0.3
    drift_col: float = 0.4
    lifetime_steps: int = 16
    start: int = 0
    step_s: int = 900
    substeps: int = 1
    k_decay: float = 0.97
    gain_cm_per_mm: float = 2.0
    base_level_cm: float = 30.0
    noise_sd_cm: float = 0.5
    # ingest
    radar_in: str = ""
    levels_in: str = ""
    origin_lat: float = 0.0
    origin_lon: float = 0.0
    lat_step: float = -0.01
    lon_step: float = 0.01
    center_lat: float = math.nan
    center_lon: float = math.nan
    win_h: int = 16
    win_w: int = 16
    aggregate_k: int = 3
    # preprocessing and model
    smooth_window: int = 8
    lookback: int = 32
    horizons: str = "8"
    mode: str = RESIDUAL
    conv_channels: str = "8,16"
    kernel: str = "3,3,3"
    pool: int = 2
    lstm_hidden: str = "128,64,32,8"
    train_frac: float = 0.6
    inner_train_frac: float = 0.8
    purge: bool = True  # drop windows straddling a split boundary
    # training
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-3
    # evaluation and forecasting
    min_level_cm: float = 40.0
    tolerance_b_cm: float = 10.0
    models: str = "auto"
    issue_time: int = -1

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir or self.out)

    def horizon_list(self) -> list[int]:
        hs = [int(h) for h in str(self.horizons).split(",") if h.strip()]
        if not hs or min(hs) < 1:
            raise ValueError(f"horizons must be positive integers, got {self.horizons!r}")
        return hs

    def canonical(self) -> str:
        lines = []
        for f in fields(self):
            if f.name in PATH_KEYS:
                continue
            lines.append(f"{f.name}={_fmt_value(getattr(self, f.name))}")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def storm_spec(self) -> synth.StormSpec:
        return synth.StormSpec(
            height=self.grid_h,
            width=self.grid_w,
            storm_rate=self.storm_rate,
            amplitude_mm=self.amplitude_mm,
            sigma_cells=self.sigma_cells,
            drift=(self.drift_row, self.drift_col),
            lifetime_steps=self.lifetime_steps,
            seed=self.seed,
            start=self.start,
            step_s=self.step_s,
        )

    def reservoir_spec(self) -> synth.ReservoirSpec:
        return synth.ReservoirSpec(self.k_decay, self.gain_cm_per_mm, self.base_level_cm, self.noise_sd_cm)

    def model_overrides(self) -> dict:
        return dict(
            conv_channels=_ints(self.conv_channels),
            kernel=_ints(self.kernel),
            pool=self.pool,
            lstm_hidden=_ints(self.lstm_hidden),
        )


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _fmt_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ValueError(f"config key {name!r}: cannot parse {raw!r}") from None
    return raw.strip()


def parse_config_text(text: str) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    defaults = {f.name: f.default for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value, defaults[key])
    return out


def build_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        values.update(parse_config_text(_read_text(Path(args.config))))
    if args.seed is not None:
        values["seed"] = args.seed
    if args.horizon:
        values["horizons"] = ",".join(str(h) for h in args.horizon)
    if args.mode is not None:
        values["mode"] = args.mode
    if args.out is not None:
        values["out"] = args.out
    if getattr(args, "issue_time", None) is not None:
        values["issue_time"] = args.issue_time
    for item in args.set or ():
        values.update(parse_config_text(item))
    cfg = RunConfig(**values)
    if cfg.mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    return cfg


# --- file helpers -------------------------------------------------------------


def _read_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror or exc}") from None


def _read_text(path: Path) -> str:
    return _read_bytes(path).decode("utf-8")


def _write(path: Path, data: bytes | str) -> str:
    """Write a file and return its sha256."""
    raw = data.encode() if isinstance(data, str) else data
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(raw)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror or exc}") from None
    return hashlib.sha256(raw).hexdigest()


def _stamp(cfg: RunConfig) -> str:
    return f"# config_hash={cfg.config_hash()} seed={cfg.seed}\n"


def _manifest(cfg: RunConfig, command: str, files: dict, extra: dict | None = None) -> str:
    body = {
        "command": command,
        "config": {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name not in PATH_KEYS},
        "config_hash": cfg.config_hash(),
        "files": files,
        "seed": cfg.seed,
    }
    if extra:
        body.update(extra)
    return json.dumps(_clean_nan(body), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _clean_nan(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean_nan(v) for k, v in obj.items()}
    return obj


# --- data loading ---------------------------------------------------------------


def load_rain(path: Path, level_step: int) -> tuple[np.ndarray, np.ndarray]:
    """Frames from an RPG1 stream file, summed up to the level step if finer."""
    frames = list(grid_io.iter_rpg_stream(_read_bytes(path)))
    if not frames:
        raise MisalignedSeries(f"{path} holds no frames")
    if len(frames) > 1:
        step = frames[1].timestamp - frames[0].timestamp
        if step != level_step:
            k, rem = divmod(level_step, step)
            if rem or k < 1:
                raise MisalignedSeries(f"frame step {step} s does not divide level step {level_step} s")
            frames = preprocess.aggregate_temporal(frames, k)
    return preprocess.stack_frames(frames)


def load_data(cfg: RunConfig):
    """``(timestamps, grids, smoothed levels)`` from the data directory."""
    d = cfg.data_path
    levels = grid_io.read_level_csv(_read_text(d / LEVELS_FILE), "levels", cfg.step_s)
    ts, grids = load_rain(d / RADAR_FILE, levels.step_s)
    if cfg.smooth_window > 1:
        levels = preprocess.sma_smooth(levels, cfg.smooth_window)
    return ts, grids, levels


def _splits(cfg: RunConfig, ts, grids, levels, horizon: int, mode: str):
    samples = preprocess.make_windows((ts, grids), levels, cfg.lookback, horizon, mode)
    split = preprocess.SplitSpec(cfg.train_frac, cfg.inner_train_frac)
    return preprocess.split_dataset(samples, split, purge=cfg.purge)


def checkpoint_path(out: Path, mode: str, horizon: int) -> Path:
    return out / f"ckpt_{mode}_h{horizon}.bin"


def _learned_models(cfg: RunConfig, horizon: int, explicit_mode: bool) -> list[str]:
    """Modes to run: ``models`` if given, else available checkpoints."""
    if cfg.models != "auto":
        names = [m.strip() for m in cfg.models.split(",") if m.strip()]
        wanted = []
        for name in names:
            if name == "baseline":
                continue
            modes = [m for m, n in MODEL_NAMES.items() if n == name]
            if not modes:
                raise ValueError(f"unknown model {name!r}")
            wanted.append(modes[0])
        return wanted
    if explicit_mode:
        return [cfg.mode]
    return [m for m in (ABSOLUTE, RESIDUAL) if checkpoint_path(Path(cfg.out), m, horizon).exists()]


def _load_params(cfg: RunConfig, mode: str, horizon: int) -> model.ModelParams:
    path = checkpoint_path(Path(cfg.out), mode, horizon)
    if not path.exists():
        raise MissingCheckpoint(f"no {MODEL_NAMES[mode]} checkpoint for horizon {horizon} at {path}")
    return model.ModelParams.from_bytes(_read_bytes(path))


# --- commands -------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> int:
    L, hs = cfg.lookback, cfg.horizon_list()
    if cfg.n_steps <= L + max(hs):
        raise TooShort(f"n_steps={cfg.n_steps} must exceed lookback + horizon = {L + max(hs)}")
    if cfg.substeps < 1 or cfg.step_s % cfg.substeps:
        raise ValueError("substeps must be a positive divisor of step_s")
    spec = cfg.storm_spec()
    grids = synth.storm_grids(spec, cfg.n_steps)
    rain_mean = grids.mean(axis=(1, 2))
    levels = synth.linear_reservoir(rain_mean, cfg.reservoir_spec(), cfg.seed, cfg.start, cfg.step_s)
    frames = []
    sub_s = cfg.step_s // cfg.substeps
    for t, g in enumerate(grids):
        t_end = cfg.start + t * cfg.step_s
        for j in range(cfg.substeps):
            ts = t_end - (cfg.substeps - 1 - j) * sub_s
            frames.append(grid_io.PrecipFrame.from_grid(g / cfg.substeps, ts))
    out = Path(cfg.out)
    files = {
        RADAR_FILE: _write(out / RADAR_FILE, grid_io.write_rpg_stream(frames)),
        LEVELS_FILE: _write(out / LEVELS_FILE, grid_io.write_level_csv(levels)),
    }
    diag = preprocess.correlation_diagnostics(rain_mean, preprocess.sma_smooth(levels, cfg.smooth_window))
    extra = {"frames": len(frames), "n_steps": cfg.n_steps, "diagnostics": diag}
    _write(out / MANIFEST_FILE, _manifest(cfg, "synth", files, extra))
    print(f"wrote {len(frames)} frames and {cfg.n_steps} levels to {out}")
    return 0


def cmd_ingest(cfg: RunConfig, args) -> int:
    if not cfg.radar_in:
        raise IoError("ingest needs radar_in (an RPG1 file or a directory of them)")
    src = Path(cfg.radar_in)
    paths = sorted(src.glob("*.rpg")) if src.is_dir() else [src]
    if not paths:
        raise IoError(f"no .rpg files under {src}")
    frames = []
    for p in paths:
        frames.extend(grid_io.iter_rpg_stream(_read_bytes(p)))
    frames.sort(key=lambda f: f.timestamp)
    if not (math.isnan(cfg.center_lat) or math.isnan(cfg.center_lon)):
        meta = grid_io.GridMeta(cfg.origin_lat, cfg.origin_lon, cfg.lat_step, cfg.lon_step)
        clip = preprocess.ClipSpec(cfg.center_lat, cfg.center_lon, cfg.win_h, cfg.win_w)
        frames = [preprocess.clip_window(f, clip, meta) for f in frames]
    if cfg.aggregate_k > 1:
        frames = preprocess.aggregate_temporal(frames, cfg.aggregate_k)
    out = Path(cfg.out)
    files = {RADAR_FILE: _write(out / RADAR_FILE, grid_io.write_rpg_stream(frames))}
    if cfg.levels_in:
        text = _read_text(Path(cfg.levels_in))
        series = grid_io.read_level_csv(text, "levels", cfg.step_s)
        files[LEVELS_FILE] = _write(out / LEVELS_FILE, grid_io.write_level_csv(series))
    _write(out / MANIFEST_FILE, _manifest(cfg, "ingest", files, {"frames": len(frames)}))
    print(f"wrote {len(frames)} frames to {out / RADAR_FILE}")
    return 0


CURVE_COLUMNS = ("epoch", "train_mse", "train_mae", "val_mse", "val_mae")


def cmd_train(cfg: RunConfig, args) -> int:
    ts, grids, levels = load_data(cfg)
    out = Path(cfg.out)
    tcfg = model.TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed)
    for h in cfg.horizon_list():
        train_set, val_set, _ = _splits(cfg, ts, grids, levels, h, cfg.mode)
        spec = model.spec_for(train_set, **cfg.model_overrides())
        log.info("training %s H=%d on %d windows", MODEL_NAMES[cfg.mode], h, len(train_set))
        result = model.train(spec, train_set, val_set, tcfg)
        params = result.params
        params.meta = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "best_epoch": result.best_epoch}
        ckpt = checkpoint_path(out, cfg.mode, h)
        _write(ckpt, params.to_bytes())
        lines = [_stamp(cfg), ",".join(CURVE_COLUMNS) + "\n"]
        for row in result.curve:
            lines.append(",".join(_fmt_value(row[c]) for c in CURVE_COLUMNS) + "\n")
        _write(out / f"curve_{cfg.mode}_h{h}.csv", "".join(lines))
        print(f"wrote {ckpt} (best epoch {result.best_epoch})")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    ts, grids, levels = load_data(cfg)
    rows = []
    for h in cfg.horizon_list():
        learned = _learned_models(cfg, h, args.mode is not None)
        params = {m: _load_params(cfg, m, h) for m in learned}
        test = _splits(cfg, ts, grids, levels, h, RESIDUAL)[2]
        obs = test.target_levels
        event_cfg = metrics.EventConfig.for_steps(
            len(test), levels.step_s, min_level_cm=cfg.min_level_cm, tolerance_b_cm=cfg.tolerance_b_cm
        )
        rows.append(metrics.evaluate(obs, test.anchor_levels, "baseline", h, event_cfg))
        for mode in learned:
            samples = test if mode == RESIDUAL else _splits(cfg, ts, grids, levels, h, ABSOLUTE)[2]
            pred, _ = model.predict_samples(params[mode], samples)
            rows.append(metrics.evaluate(obs, pred, MODEL_NAMES[mode], h, event_cfg))
    path = Path(cfg.out) / REPORT_FILE
    _write(path, _stamp(cfg) + metrics.report_csv(rows))
    for r in rows:
        print(f"{r['model']:9s} H={r['horizon_steps']:<3d} MSE={r['mse']:.4f} NSE={r['nse']:.4f}")
    return 0


FORECAST_COLUMNS = (
    "model", "issue_time", "horizon_steps", "valid_time",
    "anchor_level_cm", "predicted_residual_cm", "predicted_level_cm",
)


def cmd_forecast(cfg: RunConfig, args) -> int:
    ts, grids, levels = load_data(cfg)
    t_issue = cfg.issue_time
    hits = np.flatnonzero(ts == t_issue)
    if hits.size == 0:
        raise InsufficientHistory(f"no rain frame at issue time {t_issue}")
    idx = int(hits[0])
    if idx < cfg.lookback - 1:
        raise InsufficientHistory(f"issue time needs {cfg.lookback} frames of history, have {idx + 1}")
    li, rem = divmod(t_issue - levels.start, levels.step_s)
    if rem or not 0 <= li < levels.values.size:
        raise InsufficientHistory(f"no level observation at issue time {t_issue}")
    anchor = float(levels.values[li])
    if not math.isfinite(anchor):
        raise NonFiniteAnchor(f"level at issue time {t_issue} is missing")
    window = grids[idx - cfg.lookback + 1 : idx + 1][None]
    records = []
    for h in cfg.horizon_list():
        records.append(("baseline", model.persistence_forecast(anchor, h, t_issue)))
        for mode in _learned_models(cfg, h, args.mode is not None):
            params = _load_params(cfg, mode, h)
            if mode == RESIDUAL:
                lv, res = model.strpmr_forward(window, np.array([anchor]), params)
                fc = model.Forecast(t_issue, h, float(lv[0]), anchor, float(res[0]))
            else:
                fc = model.Forecast(t_issue, h, float(model.strpm_forward(window, params)[0]), anchor)
            records.append((MODEL_NAMES[mode], fc))
    lines = [_stamp(cfg), ",".join(FORECAST_COLUMNS) + "\n"]
    for name, fc in records:
        res = "" if fc.predicted_residual_cm is None else _fmt_value(fc.predicted_residual_cm)
        vals = (
            name, fc.issue_time, fc.horizon_steps, fc.issue_time + fc.horizon_steps * levels.step_s,
            _fmt_value(fc.anchor_level_cm), res, _fmt_value(fc.predicted_level_cm),
        )
        lines.append(",".join(str(v) for v in vals) + "\n")
    path = Path(cfg.out) / FORECAST_FILE
    _write(path, "".join(lines))
    print(f"wrote {len(records)} forecasts to {path}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "forecast": cmd_forecast,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--horizon", type=int, action="append", help="forecast horizon in steps (repeatable)")
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="radarflood", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "forecast":
            p.add_argument("--issue-time", type=int, dest="issue_time", required=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg, args)
    except PipelineError as exc:
        print(f"ERROR[{exc.code}]: {exc}", file=sys.stderr)
    except ValueError as exc:
        print(f"ERROR[InvalidConfig]: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"ERROR[IoError]: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
