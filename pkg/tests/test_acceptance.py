"""Top-level acceptance criteria, one test each.

Every test records a PASS/FAIL line that is printed in the terminal summary.
The end-to-end test trains the default architecture on the default
20,000-step synthetic set and takes roughly ten minutes on one core.
"""
import hashlib
import json
import math
import struct
import time
import zlib

import numpy as np

from _gradcases import CASES
from _oracles import (
    conv3d_direct,
    event_report_ref,
    ioa_ref,
    mse_ref,
    nse_ref,
    pearson_ref,
    random_metric_pair,
)
from conftest import ACCEPTANCE
from radarflood import tensor as T
from radarflood.cli import main
from radarflood.errors import (
    BadMagic,
    InvariantViolation,
    MalformedRow,
    NonFiniteNegative,
    PipelineError,
    TruncatedPayload,
)
from radarflood.grid_io import (
    HEADER_SIZE,
    LevelSeries,
    PrecipFrame,
    iter_rpg_stream,
    parse_rpg,
    read_level_csv,
    write_level_csv,
    write_rpg,
    write_rpg_stream,
)
from radarflood.metrics import EventConfig, bp, evaluate, event_report, ioa, mse, nse, read_report_csv
from radarflood.model import (
    Conv2Plus1DSpec,
    ForecastModelSpec,
    conv2plus1d_forward,
    init_params,
    network,
    param_count,
    predict_samples,
    spec_for,
)
from radarflood.synth import ReservoirSpec, StormSpec, gen_dataset


def _record(name, ok, detail):
    ACCEPTANCE.append((name, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, detail


def _run(*argv):
    return main([str(a) for a in argv])


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --- gradient fidelity --------------------------------------------------------


def test_gradient_fidelity():
    t0 = time.perf_counter()
    worst_op = {}
    for name, build in sorted(CASES.items()):
        rng = np.random.default_rng(zlib.crc32(b"accept-" + name.encode()))
        worst_op[name] = max(T.grad_check(*build(rng)) for _ in range(20))
    spec = ForecastModelSpec()
    params = init_params(spec, seed=3)
    rng = np.random.default_rng(3)
    x = rng.gamma(1.0, 1.0, size=(2, spec.lookback, spec.grid_h, spec.grid_w))
    y = np.array([0.7, -1.2])
    full = T.grad_check(lambda p: T.mse_loss(network(p, spec, x), y), params.tensors, max_coords=4)
    elapsed = time.perf_counter() - t0
    op_max = max(worst_op.values())
    ok = op_max < 1e-6 and full < 1e-4 and elapsed < 120
    _record(
        "gradient fidelity",
        ok,
        f"{len(worst_op)} ops x 20 trials max rel err {op_max:.2e} (< 1e-6); "
        f"full network on 2 samples {full:.2e} (< 1e-4); {elapsed:.1f}s (< 120s)",
    )


# --- (2+1)D equivalence -------------------------------------------------------


def test_separable_equivalence():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        kt, kh, kw = (int(v) for v in rng.integers(1, 4, 3))
        L = int(rng.integers(kt, kt + 5))
        H, W = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        f, g = rng.normal(size=kt), rng.normal(size=(kh, kw))
        x = rng.normal(size=(L, H, W))
        got = conv2plus1d_forward(x[..., None], g[:, :, None, None], f[:, None, None]).data[..., 0]
        ref = np.array(conv3d_direct(x.tolist(), (f[:, None, None] * g[None]).tolist()))
        worst = max(worst, float(np.max(np.abs(got - ref))))
    _record("(2+1)D equivalence", worst < 1e-9, f"50 rank-1 kernels, max abs err {worst:.2e} (< 1e-9)")


# --- parameter halving --------------------------------------------------------


def test_parameter_halving():
    counts = [param_count(Conv2Plus1DSpec(3, 3, 3, c, c)) for c in range(1, 9)]
    ok = all(counts[c - 1] == (12 * c * c, 27 * c * c) for c in range(1, 9))
    _record("parameter halving", ok, "c=1..8: " + " ".join(f"{a}/{b}" for a, b in counts))


# --- metric oracle equivalence ------------------------------------------------


def test_metric_oracle_equivalence():
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(200):
        obs, pred = random_metric_pair(rng, 500)
        diffs = [
            mse(obs, pred) - mse_ref(obs, pred),
            bp(obs, pred) - pearson_ref(obs, pred),
            nse(obs, pred) - nse_ref(obs, pred),
            ioa(obs, pred) - ioa_ref(obs, pred),
        ]
        got = event_report(obs, pred, EventConfig(period_years=2.5))
        ref = event_report_ref(obs, pred, years=2.5)
        diffs += [getattr(got, k) - v for k, v in ref.items()]
        worst = max(worst, max(abs(d) for d in diffs))
    # published row: error_sum 11877.39, T_over 0, T_under 262, error_average 45.333
    product = 45.333 * (0 + 262)
    identity_err = abs(product - 11877.39)
    ok = worst < 1e-9 and identity_err <= 0.1
    _record(
        "metric oracle equivalence",
        ok,
        f"200 pairs max abs err {worst:.2e} (< 1e-9); "
        f"45.333*262 = {product:.3f} vs 11877.39, off by {identity_err:.3f} (<= 0.1)",
    )


# --- baseline identity --------------------------------------------------------


def test_baseline_identity():
    checked = 0
    ok = True
    for seed in range(4):
        storm = StormSpec(height=8 + 4 * seed, width=8 + 4 * seed, seed=seed, storm_rate=0.05)
        data = gen_dataset(storm, ReservoirSpec(), 800, 16, 2 + 3 * seed)
        s = data.samples
        params = init_params(spec_for(s), seed).zeros_like()
        params.input_scale, params.target_scale = 1.0 + seed, 0.5 + seed
        levels, _ = predict_samples(params, s)
        base, _ = predict_samples(None, s, "baseline")
        obs = s.target_levels
        row_m = evaluate(obs, levels, "x", s.horizon_steps)
        row_b = evaluate(obs, base, "x", s.horizon_steps)
        ok &= levels.tobytes() == base.tobytes() and repr(row_m) == repr(row_b)
        checked += len(s)
    _record("baseline identity", ok, f"zero-parameter predictions bitwise equal on {checked} windows, rows equal")


# --- end-to-end synthetic skill -----------------------------------------------


def test_end_to_end_synthetic_skill(tmp_path):
    settings = ["--set", "epochs=5", "--set", "lr=0.003"]
    t0 = time.perf_counter()
    assert _run("synth", "--out", tmp_path, "--horizon", 8, "--horizon", 16) == 0
    assert _run("train", "--out", tmp_path, "--horizon", 8, "--horizon", 16, "--mode", "residual", *settings) == 0
    assert _run("evaluate", "--out", tmp_path, "--horizon", 8, "--horizon", 16, *settings) == 0
    elapsed = time.perf_counter() - t0
    rows = {(r["model"], r["horizon_steps"]): r for r in read_report_csv((tmp_path / "report.csv").read_text())}
    diag = json.loads((tmp_path / "manifest.json").read_text())["diagnostics"]
    parts, ok = [], True
    for h in (8, 16):
        m, b = rows[("strpmr", h)]["mse"], rows[("baseline", h)]["mse"]
        ok &= m < b
        parts.append(f"H={h} MSE {m:.2f} vs persistence {b:.2f} NSE {rows[('strpmr', h)]['nse']:.3f}")
    ok &= rows[("strpmr", 8)]["nse"] > 0.9
    ok &= elapsed < 15 * 60
    ok &= diag["corr_rain_delta"] > diag["corr_rain_level"]
    parts.append(f"corr(rain,dh) {diag['corr_rain_delta']:.3f} > corr(rain,h) {diag['corr_rain_level']:.3f}")
    parts.append(f"{elapsed:.0f}s (< 900s)")
    _record("end-to-end synthetic skill", ok, "; ".join(parts))


# --- determinism --------------------------------------------------------------


def test_determinism(tmp_path):
    settings = ["--seed", 11, "--horizon", 8, "--set", "n_steps=1500", "--set", "epochs=2"]
    names = ("radar.rpg", "levels.csv", "manifest.json", "ckpt_residual_h8.bin", "curve_residual_h8.csv")
    digests = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert _run("synth", "--out", out, *settings) == 0
        assert _run("train", "--out", out, *settings) == 0
        digests.append([_sha(out / n) for n in names])
    _record("determinism", digests[0] == digests[1], f"{len(names)} files byte-identical across two runs")


# --- format robustness --------------------------------------------------------


def _random_frame(rng):
    w, h = int(rng.integers(0, 7)), int(rng.integers(0, 7))
    vals = rng.gamma(0.5, 2.0, w * h).astype(np.float32).astype(np.float64)
    vals[rng.random(w * h) < 0.1] = np.nan
    vals[rng.random(w * h) < 0.2] = 0.0
    ts = int(rng.integers(-(2**62), 2**62))
    return PrecipFrame(ts, w, h, float(rng.uniform(0.1, 5.0)), vals)


def _raises(code, fn, *args):
    try:
        fn(*args)
    except PipelineError as exc:
        return type(exc) is code
    return False


def _rpg_corruption_ok(rng, frame, data):
    """Flip one byte and check the outcome against the byte's role."""
    raw = bytearray(data)
    pos = int(rng.integers(0, len(raw)))
    raw[pos] ^= int(rng.integers(1, 256))
    try:
        back = parse_rpg(bytes(raw))
    except PipelineError as exc:
        got = type(exc)
    else:
        got = None
    if pos < 4:
        return got is BadMagic
    if pos < 8:
        w, h = struct.unpack_from("<HH", raw, 4)
        return got is (None if w * h == frame.width * frame.height else TruncatedPayload)
    if pos < 16:
        return got is None and back.timestamp != frame.timestamp
    if pos < 20:
        cell = struct.unpack_from("<f", raw, 16)[0]
        return got is (None if math.isfinite(cell) and cell > 0 else InvariantViolation)
    if pos < HEADER_SIZE:
        return got is InvariantViolation
    v = struct.unpack_from("<f", raw, pos - (pos - HEADER_SIZE) % 4)[0]
    return got is (NonFiniteNegative if math.isinf(v) or v < 0 else None)


def _random_series(rng):
    n = int(rng.integers(2, 40))
    vals = np.round(rng.uniform(0, 400, n), int(rng.integers(0, 4)))
    gaps = rng.random(n) < 0.15
    gaps[[0, -1]] = False
    vals[gaps] = np.nan
    return LevelSeries("", int(rng.integers(0, 10**9)) * 900, 900, vals)


def _csv_cut_ok(text, cut):
    prefix = text[:cut]
    lines = prefix.split("\n")
    try:
        got = read_level_csv(prefix)
    except PipelineError as exc:
        got = exc
    if cut < len("timestamp,level_cm"):
        return isinstance(got, MalformedRow)
    last = lines[-1] if len(lines) > 1 else ""
    if last and "," not in last:
        return isinstance(got, MalformedRow)
    if last:
        try:
            float(last.split(",")[1])
        except ValueError:
            return isinstance(got, MalformedRow)
    if isinstance(got, Exception):
        return False
    full = read_level_csv(text)
    complete = [ln for ln in lines[1:] if ln]
    if not complete:
        return len(got) == 0
    ts_last = int(complete[-1].split(",")[0])
    k = (ts_last - full.start) // 900 + 1
    head_ok = np.array_equal(got.values[:-1], full.values[: k - 1], equal_nan=True)
    return got.start == full.start and len(got) == k and head_ok


def test_format_robustness():
    rng = np.random.default_rng(4242)
    failures = {}

    def check(kind, ok):
        if not ok:
            failures[kind] = failures.get(kind, 0) + 1

    cases = 0
    while cases < 10_000:
        kind = cases % 5
        if kind == 0:
            frames = [_random_frame(rng) for _ in range(int(rng.integers(1, 4)))]
            data = write_rpg_stream(frames)
            back = list(iter_rpg_stream(data))
            check("rpg roundtrip", back == frames and write_rpg_stream(back) == data)
        elif kind == 1:
            frames = [_random_frame(rng) for _ in range(int(rng.integers(1, 4)))]
            data = write_rpg_stream(frames)
            cut = int(rng.integers(0, len(data)))
            bounds = np.cumsum([0] + [len(write_rpg(f)) for f in frames])
            whole = int(np.searchsorted(bounds, cut, side="right")) - 1
            got = []
            try:
                for f in iter_rpg_stream(data[:cut]):
                    got.append(f)
                err = None
            except PipelineError as exc:
                err = type(exc)
            expect = None if cut == bounds[whole] else TruncatedPayload
            check("rpg truncation", err is expect and got == frames[:whole])
            one = write_rpg(frames[0])
            check("rpg single trailing", _raises(TruncatedPayload, parse_rpg, one + b"\0" * int(rng.integers(1, 9))))
        elif kind == 2:
            frame = _random_frame(rng)
            check("rpg corruption", _rpg_corruption_ok(rng, frame, write_rpg(frame)))
        elif kind == 3:
            s = _random_series(rng)
            text = write_level_csv(s)
            back = read_level_csv(text)
            check("csv roundtrip", back == s and write_level_csv(back) == text)
        else:
            text = write_level_csv(_random_series(rng))
            check("csv truncation", _csv_cut_ok(text, int(rng.integers(0, len(text)))))
        cases += 1
    detail = f"{cases} cases, " + (
        "no crashes, expected error codes" if not failures else f"mismatches {failures}"
    )
    _record("format robustness", not failures, detail)
