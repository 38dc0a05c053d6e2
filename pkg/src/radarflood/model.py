"""(2+1)D convolution + stacked LSTM water-level forecasters.

Two variants share one network body:

* absolute mode predicts the level ``h[t+H]`` directly;
* residual mode predicts ``dh = h[t+H] - h[t]`` and reconstructs the level
  as ``anchor + dh`` with the observed level at issue time as anchor.

The persistence baseline returns the anchor unchanged.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import DivergedLoss, EmptyDataset, NonFiniteAnchor, ShapeMismatch
from .preprocess import ABSOLUTE, MODES, RESIDUAL, SampleSet, input_scale
from .rng import Xoshiro256, derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Conv2Plus1DSpec:
    t_k: int = 3
    h_k: int = 3
    w_k: int = 3
    c_in: int = 1
    c_out: int = 8
    padding: str = "same"  # spatial; the temporal pass is always 'valid'

    def __post_init__(self):
        if min(self.t_k, self.h_k, self.w_k, self.c_in, self.c_out) < 1:
            raise ShapeMismatch("kernel extents and channel counts must be >= 1")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")


def param_count(spec: Conv2Plus1DSpec) -> tuple[int, int]:
    """``(factorised, full_3d)`` kernel weight counts, biases excluded."""
    spatial = spec.h_k * spec.w_k * spec.c_in * spec.c_out
    temporal = spec.t_k * spec.c_out * spec.c_out
    full = spec.t_k * spec.h_k * spec.w_k * spec.c_in * spec.c_out
    return spatial + temporal, full


@dataclass(frozen=True)
class ForecastModelSpec:
    """Architecture descriptor. Stored in every checkpoint."""

    grid_h: int = 16
    grid_w: int = 16
    lookback: int = 32
    horizon: int = 8
    mode: str = RESIDUAL
    conv_channels: tuple[int, ...] = (8, 16)
    kernel: tuple[int, int, int] = (3, 3, 3)
    pool: int = 2
    lstm_hidden: tuple[int, ...] = (128, 64, 32, 8)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.lstm_hidden:
            raise ValueError("lstm_hidden must be nonempty")
        if self.lookback < 1 or self.horizon < 1:
            raise ValueError("lookback and horizon must be >= 1")
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "kernel", tuple(self.kernel))
        object.__setattr__(self, "lstm_hidden", tuple(self.lstm_hidden))
        if self.seq_len < 1:
            raise ShapeMismatch(
                f"lookback {self.lookback} too short for {len(self.conv_channels)} "
                f"temporal kernels of {self.kernel[0]}"
            )

    def conv_specs(self) -> list[Conv2Plus1DSpec]:
        t_k, h_k, w_k = self.kernel
        specs, c_in = [], 1
        for c in self.conv_channels:
            specs.append(Conv2Plus1DSpec(t_k, h_k, w_k, c_in, c, "same"))
            c_in = c
        return specs

    @property
    def seq_len(self) -> int:
        return self.lookback - len(self.conv_channels) * (self.kernel[0] - 1)

    @property
    def feature_size(self) -> int:
        h, w = self.grid_h, self.grid_w
        c = 1
        for c in self.conv_channels:
            if self.pool > 1 and h >= self.pool and w >= self.pool:
                h, w = h // self.pool, w // self.pool
        return h * w * c

    def to_descriptor(self) -> dict:
        d = asdict(self)
        for k in ("conv_channels", "kernel", "lstm_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_descriptor(cls, d: dict) -> "ForecastModelSpec":
        fields = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**fields)


@dataclass
class ModelParams:
    """Trained tensors plus everything needed to run them.

    Rain windows are divided by ``input_scale`` before the network; its output
    ``y`` maps to cm as ``target_shift + target_scale * y``. With all tensors
    zero the prediction is exactly ``target_shift``. ``meta`` is free-form
    provenance (config hash, seed) stored in the checkpoint descriptor.
    """

    spec: ForecastModelSpec
    tensors: dict = field(repr=False)
    input_scale: float = 1.0
    target_shift: float = 0.0
    target_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return replace(self, tensors={k: v.copy() for k, v in self.tensors.items()}, meta=dict(self.meta))

    def zeros_like(self) -> "ModelParams":
        return replace(self, tensors={k: np.zeros_like(v) for k, v in self.tensors.items()}, meta=dict(self.meta))

    def to_bytes(self) -> bytes:
        desc = self.spec.to_descriptor()
        desc["target_shift"] = self.target_shift
        desc["target_scale"] = self.target_scale
        if self.meta:
            desc["meta"] = self.meta
        return T.dump_checkpoint(self.tensors, desc, self.input_scale)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParams":
        tensors, desc, scale = T.load_checkpoint(data)
        spec = ForecastModelSpec.from_descriptor(desc)
        if set(tensors) != set(param_shapes(spec)):
            raise ShapeMismatch("checkpoint tensors do not match its architecture")
        return cls(
            spec,
            tensors,
            scale,
            float(desc.get("target_shift", 0.0)),
            float(desc.get("target_scale", 1.0)),
            dict(desc.get("meta", {})),
        )

    def to_cm(self, y: np.ndarray) -> np.ndarray:
        return self.target_shift + self.target_scale * y


def param_shapes(spec: ForecastModelSpec) -> dict:
    """Ordered ``name -> (shape, fan_in)`` for every trainable tensor."""
    shapes = {}
    for i, cs in enumerate(spec.conv_specs()):
        shapes[f"conv{i}.spatial.w"] = ((cs.h_k, cs.w_k, cs.c_in, cs.c_out), cs.h_k * cs.w_k * cs.c_in)
        shapes[f"conv{i}.spatial.b"] = ((cs.c_out,), None)
        shapes[f"conv{i}.temporal.w"] = ((cs.t_k, cs.c_out, cs.c_out), cs.t_k * cs.c_out)
        shapes[f"conv{i}.temporal.b"] = ((cs.c_out,), None)
    n_in = spec.feature_size
    for j, hn in enumerate(spec.lstm_hidden):
        shapes[f"lstm{j}.w_x"] = ((n_in, 4 * hn), n_in)
        shapes[f"lstm{j}.w_h"] = ((hn, 4 * hn), hn)
        shapes[f"lstm{j}.b"] = ((4 * hn,), None)
        n_in = hn
    shapes["head.w"] = ((n_in, 1), n_in)
    shapes["head.b"] = ((1,), None)
    return shapes


def init_params(spec: ForecastModelSpec, seed: int, scale: float = 1.0) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, LSTM forget bias 1."""
    rng = Xoshiro256(derive_seed(seed, "init"))
    tensors = {}
    for name, (shape, fan_in) in param_shapes(spec).items():
        if fan_in is None:
            arr = np.zeros(shape)
            if name.startswith("lstm"):
                hn = shape[0] // 4
                arr[hn : 2 * hn] = 1.0
        else:
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform_array(shape, -bound, bound)
        tensors[name] = arr
    return ModelParams(spec, tensors, scale)


# --- building blocks --------------------------------------------------------


def conv2plus1d_forward(
    x, w_spatial, w_temporal, b_spatial=None, b_temporal=None, padding="same", pool=1
):
    """Spatial (1, h, w) convolution followed by temporal (t, 1, 1) convolution.

    ``x`` is ``[B, L, H, W, C_in]`` (or unbatched ``[L, H, W, C_in]``). There is
    no nonlinearity between the two passes. With ``pool > 1`` the output is
    average-pooled spatially; since pooling commutes with the temporal pass it
    is fused into the spatial one.
    """
    x = T.as_tensor(x)
    unbatched = x.ndim == 4
    if unbatched:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 5:
        raise ShapeMismatch(f"expected [B, L, H, W, C], got {x.shape}")
    y = T.conv2d_spatial(x, w_spatial, b_spatial, padding, pool=pool)
    y = T.conv1d_temporal(y, w_temporal, b_temporal, "valid")
    if unbatched:
        y = T.reshape(y, y.shape[1:])
    return y


def lstm_cell(x, h, c, w_x, w_h, b):
    """One LSTM step built from elementwise primitives; returns ``(h, c)``."""
    hn = T.as_tensor(w_h).shape[0]
    z = T.add(T.add(T.matmul(x, w_x), T.matmul(h, w_h)), b)
    i = T.sigmoid(T.take_last(z, 0, hn))
    f = T.sigmoid(T.take_last(z, hn, 2 * hn))
    g = T.tanh(T.take_last(z, 2 * hn, 3 * hn))
    o = T.sigmoid(T.take_last(z, 3 * hn, 4 * hn))
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    return T.mul(o, T.tanh(c_new)), c_new


def lstm_layer_reference(x, w_x, w_h, b):
    """Unfused equivalent of :func:`radarflood.tensor.lstm_layer`."""
    x = T.as_tensor(x)
    B, L, _ = x.shape
    hn = T.as_tensor(w_h).shape[0]
    h = T.Tensor(np.zeros((B, hn)))
    c = T.Tensor(np.zeros((B, hn)))
    outs = []
    for t in range(L):
        h, c = lstm_cell(T.slice_time(x, t), h, c, w_x, w_h, b)
        outs.append(h)
    return T.stack(outs, axis=1)


def lstm_stack_forward(seq, layers, fused: bool = True):
    """Run stacked LSTM layers; return the last layer's final hidden state.

    Args:
        seq: ``[B, L, F]`` or unbatched ``[L, F]``.
        layers: sequence of ``(w_x, w_h, b)`` triples.
    """
    seq = T.as_tensor(seq)
    unbatched = seq.ndim == 2
    if unbatched:
        seq = T.reshape(seq, (1,) + seq.shape)
    if seq.ndim != 3 or seq.shape[1] < 1:
        raise ShapeMismatch(f"expected [B, L, F] with L >= 1, got {seq.shape}")
    layer_fn = T.lstm_layer if fused else lstm_layer_reference
    h = seq
    for w_x, w_h, b in layers:
        h = layer_fn(h, w_x, w_h, b)
    last = T.slice_time(h, h.shape[1] - 1)
    if unbatched:
        last = T.reshape(last, last.shape[1:])
    return last


def network(params: dict, spec: ForecastModelSpec, x, fused: bool = True):
    """Raw network output ``[B]`` for normalised inputs ``x`` of shape ``[B, L, h, w]``.

    Each block is (2+1)D conv -> 2x2 average pool -> tanh; the last LSTM
    hidden state feeds a linear head.
    """
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[1:] != (spec.lookback, spec.grid_h, spec.grid_w):
        raise ShapeMismatch(
            f"expected [B, {spec.lookback}, {spec.grid_h}, {spec.grid_w}], got {x.shape}"
        )
    B = x.shape[0]
    y = T.reshape(x, x.shape + (1,))
    for i in range(len(spec.conv_channels)):
        pool = spec.pool if spec.pool > 1 and min(y.shape[2:4]) >= spec.pool else 1
        y = conv2plus1d_forward(
            y,
            params[f"conv{i}.spatial.w"],
            params[f"conv{i}.temporal.w"],
            params[f"conv{i}.spatial.b"],
            params[f"conv{i}.temporal.b"],
            pool=pool,
        )
        y = T.tanh(y)
    y = T.reshape(y, (B, y.shape[1], -1))
    layers = [
        (params[f"lstm{j}.w_x"], params[f"lstm{j}.w_h"], params[f"lstm{j}.b"])
        for j in range(len(spec.lstm_hidden))
    ]
    h = lstm_stack_forward(y, layers, fused=fused)
    out = T.linear(h, params["head.w"], params["head.b"])
    return T.reshape(out, (B,))


# --- forecasts --------------------------------------------------------------


@dataclass(frozen=True)
class Forecast:
    issue_time: int
    horizon_steps: int
    predicted_level_cm: float
    anchor_level_cm: float
    predicted_residual_cm: float | None = None


def _check_anchor(anchor) -> np.ndarray:
    a = np.asarray(anchor, dtype=np.float64)
    if not np.isfinite(a).all():
        raise NonFiniteAnchor("anchor level must be finite")
    return a


def _outputs_cm(params: ModelParams, gather, n: int, batch: int = 512) -> np.ndarray:
    out = np.empty(n)
    with T.no_grad():
        for lo in range(0, n, batch):
            idx = np.arange(lo, min(lo + batch, n))
            xb = gather(idx) / params.input_scale
            out[idx] = params.to_cm(network(params.tensors, params.spec, xb).data)
    return out


def raw_outputs(params: ModelParams, inputs, batch: int = 512) -> np.ndarray:
    """Model outputs in cm for unnormalised rain windows ``[N, L, h, w]``."""
    inputs = np.asarray(inputs, dtype=np.float64)
    return _outputs_cm(params, lambda idx: inputs[idx], inputs.shape[0], batch)


def strpm_forward(inputs, params: ModelParams) -> np.ndarray:
    """Absolute-level prediction for each rain window."""
    return raw_outputs(params, inputs)


def strpmr_forward(inputs, anchors, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Residual prediction; returns ``(levels, residuals)`` with
    ``levels = anchors + residuals``."""
    anchors = _check_anchor(anchors)
    residuals = raw_outputs(params, inputs)
    if residuals.shape != anchors.shape:
        raise ShapeMismatch(f"{residuals.shape[0]} windows vs {anchors.size} anchors")
    return anchors + residuals, residuals


def persistence_forecast(anchor: float, horizon_steps: int, issue_time: int = 0) -> Forecast:
    a = float(_check_anchor(anchor))
    return Forecast(issue_time, horizon_steps, a, a)


def persistence_series(values, horizon_steps: int) -> np.ndarray:
    """Persistence predictions aligned to target times: ``out[t] = v[t - H]``."""
    v = np.asarray(values, dtype=np.float64)
    out = np.full(v.shape, np.nan)
    out[horizon_steps:] = v[:-horizon_steps]
    return out


def predict_samples(params: ModelParams | None, samples: SampleSet, model: str = "auto"):
    """Predicted levels for every sample.

    ``model`` is ``"baseline"`` (persistence), or a learned model whose mode is
    taken from ``params.spec``. Returns ``(levels, residuals or None)``.
    """
    if model == "baseline" or params is None:
        return _check_anchor(samples.anchor_levels).copy(), None
    raw = _outputs_cm(params, samples.batch_inputs, len(samples))
    if params.spec.mode == RESIDUAL:
        anchors = _check_anchor(samples.anchor_levels)
        return anchors + raw, raw
    return raw, None


def forecasts_for(params: ModelParams | None, samples: SampleSet, model: str = "auto") -> list[Forecast]:
    levels, residuals = predict_samples(params, samples, model)
    out = []
    for i in range(len(samples)):
        out.append(
            Forecast(
                int(samples.issue_times[i]),
                samples.horizon_steps,
                float(levels[i]),
                float(samples.anchor_levels[i]),
                None if residuals is None else float(residuals[i]),
            )
        )
    return out


# --- training ---------------------------------------------------------------


def target_normalisation(samples: SampleSet) -> tuple[float, float]:
    """``(shift, scale)`` mapping training targets to roughly unit size.

    Residual targets keep shift 0 so that a zero network still means
    persistence; the scale is their root mean square. Absolute targets are
    standardised. A degenerate scale falls back to 1.
    """
    y = np.asarray(samples.targets, dtype=np.float64)
    if samples.mode == RESIDUAL or y.size == 0:
        shift = 0.0
    else:
        shift = float(y.mean())
    scale = float(np.sqrt(np.mean((y - shift) ** 2))) if y.size else 0.0
    return shift, (scale if scale > 1e-12 and math.isfinite(scale) else 1.0)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


@dataclass
class TrainResult:
    params: ModelParams
    curve: list = field(default_factory=list)
    best_epoch: int = 0


def train(
    spec: ForecastModelSpec,
    train_set: SampleSet,
    val_set: SampleSet | None = None,
    config: TrainConfig = TrainConfig(),
    init: ModelParams | None = None,
) -> TrainResult:
    """Fit the network with MSE loss and Adam.

    Training windows are reshuffled every epoch with the seeded generator.
    The returned parameters are those of the epoch with the lowest validation
    MSE (training MSE when there is no validation set). Curve entries hold
    per-epoch train/val MSE and MAE on the predicted target (level or residual).
    """
    if len(train_set) == 0:
        raise EmptyDataset("training set is empty")
    if train_set.mode != spec.mode:
        raise ValueError(f"samples are {train_set.mode!r} but model is {spec.mode!r}")
    params = init.copy() if init is not None else init_params(spec, config.seed)
    if init is None:
        params.input_scale = input_scale(train_set)
        params.target_shift, params.target_scale = target_normalisation(train_set)
    state = T.AdamState(config.lr, config.beta1, config.beta2, config.eps)
    shuffler = Xoshiro256(derive_seed(config.seed, "shuffle"))

    curve = []
    best, best_score, best_epoch = params.copy(), math.inf, 0
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = shuffler.permutation(n)
        sq_sum = abs_sum = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            xb = train_set.batch_inputs(idx) / params.input_scale
            yb = train_set.targets[idx]
            leaves = {k: T.Tensor(v, requires_grad=True) for k, v in params.tensors.items()}
            out = network(leaves, spec, xb)
            loss = T.mse_loss(out, (yb - params.target_shift) / params.target_scale)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergedLoss(f"loss became {value} at epoch {epoch}, batch starting {lo}")
            loss.backward()
            grads = {k: t.grad for k, t in leaves.items()}
            T.adam_step(params.tensors, grads, state)
            err = params.to_cm(out.data) - yb
            sq_sum += float(np.dot(err, err))
            abs_sum += float(np.abs(err).sum())
        row = {"epoch": epoch, "train_mse": sq_sum / n, "train_mae": abs_sum / n}
        if val_set is not None and len(val_set):
            row["val_mse"], row["val_mae"] = _evaluate_targets(params, val_set)
            score = row["val_mse"]
        else:
            row["val_mse"] = row["val_mae"] = math.nan
            score = row["train_mse"]
        row["seconds"] = time.perf_counter() - t0
        curve.append(row)
        log.info(
            "epoch %d train_mse %.4f val_mse %.4f (%.1fs)",
            epoch, row["train_mse"], row["val_mse"], row["seconds"],
        )
        if score < best_score:
            best, best_score, best_epoch = params.copy(), score, epoch
    return TrainResult(best, curve, best_epoch)


def _evaluate_targets(params: ModelParams, samples: SampleSet) -> tuple[float, float]:
    err = _outputs_cm(params, samples.batch_inputs, len(samples)) - samples.targets
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))


def spec_for(samples: SampleSet, **overrides) -> ForecastModelSpec:
    """Architecture matching a sample set's window shape and mode."""
    L, h, w = samples.window_shape
    kw = dict(grid_h=h, grid_w=w, lookback=L, horizon=samples.horizon_steps, mode=samples.mode)
    kw.update(overrides)
    return ForecastModelSpec(**kw)


__all__ = [
    "ABSOLUTE",
    "RESIDUAL",
    "Conv2Plus1DSpec",
    "Forecast",
    "ForecastModelSpec",
    "ModelParams",
    "TrainConfig",
    "TrainResult",
    "conv2plus1d_forward",
    "forecasts_for",
    "init_params",
    "lstm_cell",
    "lstm_layer_reference",
    "lstm_stack_forward",
    "network",
    "param_count",
    "persistence_forecast",
    "persistence_series",
    "predict_samples",
    "spec_for",
    "target_normalisation",
    "strpm_forward",
    "strpmr_forward",
    "train",
]
