"""Randomised gradient-check cases, one builder per differentiable op.

Each builder takes a numpy Generator and returns ``(f, params)`` where ``f``
maps a dict of Tensors to a scalar. Outputs are contracted with a fixed random
weight so every output coordinate contributes to the checked gradient.
"""
import numpy as np

from radarflood import tensor as T
from radarflood.model import lstm_cell


def _dim(rng, lo=1, hi=6):
    return int(rng.integers(lo, hi + 1))


def _contract(out, rng):
    w = rng.normal(size=out.shape)
    return T.sum(T.mul(out, w))


def _unary(op, shift_from_zero=False):
    def build(rng):
        shape = tuple(_dim(rng) for _ in range(int(rng.integers(1, 4))))
        x = rng.normal(size=shape)
        if shift_from_zero:
            x = np.where(np.abs(x) < 0.1, x + np.sign(x + 1e-12) * 0.2, x)
        w = rng.normal(size=shape)
        return (lambda p: T.sum(T.mul(op(p["x"]), w))), {"x": x}

    return build


def _binary(op):
    def build(rng):
        shape = (_dim(rng), _dim(rng), _dim(rng))
        bshape = shape[int(rng.integers(0, 3)) :]  # trailing broadcast
        a, b = rng.normal(size=shape), rng.normal(size=bshape)
        w = rng.normal(size=shape)
        return (lambda p: T.sum(T.mul(op(p["a"], p["b"]), w))), {"a": a, "b": b}

    return build


def _sum_axis(rng):
    x = rng.normal(size=(_dim(rng), _dim(rng), _dim(rng)))
    axis = int(rng.integers(0, 3))
    w = rng.normal(size=np.delete(x.shape, axis))
    return (lambda p: T.sum(T.mul(T.sum(p["x"], axis), w))), {"x": x}


def _mean(rng):
    x = rng.normal(size=(_dim(rng), _dim(rng)))
    return (lambda p: T.mul(T.mean(T.tanh(p["x"])), 3.0)), {"x": x}


def _reshape_flatten(rng):
    x = rng.normal(size=(_dim(rng), _dim(rng), _dim(rng)))
    w = rng.normal(size=(x.shape[0], x.shape[1] * x.shape[2]))

    def f(p):
        y = T.flatten(T.tanh(p["x"]), 1)
        return T.sum(T.mul(T.reshape(y, w.shape), w))

    return f, {"x": x}


def _slicing(rng):
    x = rng.normal(size=(_dim(rng), _dim(rng, 2), _dim(rng, 2)))
    t = int(rng.integers(0, x.shape[1]))
    stop = int(rng.integers(1, x.shape[2] + 1))
    start = int(rng.integers(0, stop))

    def f(p):
        a = T.slice_time(p["x"], t)
        b = T.take_last(p["x"], start, stop)
        return T.add(_contract(a, np.random.default_rng(1)), _contract(b, np.random.default_rng(2)))

    return f, {"x": x}


def _stack(rng):
    n = _dim(rng, 1, 4)
    shape = (_dim(rng), _dim(rng))
    xs = {f"x{i}": rng.normal(size=shape) for i in range(n)}
    w = rng.normal(size=(shape[0], n, shape[1]))
    return (lambda p: T.sum(T.mul(T.stack([p[k] for k in sorted(p)], axis=1), w))), xs


def _matmul(rng):
    a = rng.normal(size=(_dim(rng), _dim(rng), _dim(rng)))
    b = rng.normal(size=(a.shape[-1], _dim(rng)))
    return (lambda p: _contract(T.matmul(p["a"], p["b"]), np.random.default_rng(3))), {"a": a, "b": b}


def _linear(rng):
    x = rng.normal(size=(_dim(rng), _dim(rng)))
    w = rng.normal(size=(x.shape[1], _dim(rng)))
    b = rng.normal(size=w.shape[1])
    return (lambda p: _contract(T.tanh(T.linear(p["x"], p["w"], p["b"])), np.random.default_rng(4))), {
        "x": x, "w": w, "b": b,
    }


def _conv2d(rng):
    pad = "same" if rng.random() < 0.5 else "valid"
    pool = int(rng.integers(1, 3))
    kh, kw = _dim(rng, 1, 3), _dim(rng, 1, 3)
    H = _dim(rng, kh + pool - 1 if pad == "valid" else pool, 6)
    W = _dim(rng, kw + pool - 1 if pad == "valid" else pool, 6)
    x = rng.normal(size=(_dim(rng, 1, 2), _dim(rng, 1, 3), H, W, _dim(rng, 1, 3)))
    w = rng.normal(size=(kh, kw, x.shape[-1], _dim(rng, 1, 3)))
    b = rng.normal(size=w.shape[-1])
    seed = int(rng.integers(1 << 30))

    def f(p):
        out = T.conv2d_spatial(p["x"], p["w"], p["b"], pad, pool)
        return _contract(T.tanh(out), np.random.default_rng(seed))

    return f, {"x": x, "w": w, "b": b}


def _conv1d(rng):
    pad = "same" if rng.random() < 0.5 else "valid"
    kt = _dim(rng, 1, 3)
    x = rng.normal(size=(_dim(rng, 1, 3), _dim(rng, kt, 6), _dim(rng, 1, 3), _dim(rng, 1, 3)))
    w = rng.normal(size=(kt, x.shape[-1], _dim(rng, 1, 3)))
    b = rng.normal(size=w.shape[-1])
    seed = int(rng.integers(1 << 30))

    def f(p):
        return _contract(T.tanh(T.conv1d_temporal(p["x"], p["w"], p["b"], pad)), np.random.default_rng(seed))

    return f, {"x": x, "w": w, "b": b}


def _avg_pool(rng):
    x = rng.normal(size=(_dim(rng, 1, 3), _dim(rng, 2), _dim(rng, 2), _dim(rng, 1, 3)))
    seed = int(rng.integers(1 << 30))
    return (lambda p: _contract(T.avg_pool2d(p["x"], 2), np.random.default_rng(seed))), {"x": x}


def _lstm_params(rng, F, Hn):
    return {
        "w_x": rng.normal(size=(F, 4 * Hn)) * 0.5,
        "w_h": rng.normal(size=(Hn, 4 * Hn)) * 0.5,
        "b": rng.normal(size=4 * Hn) * 0.5,
    }


def _lstm_layer(rng):
    B, Tn, F, Hn = _dim(rng, 1, 3), _dim(rng), _dim(rng), _dim(rng)
    p = {"x": rng.normal(size=(B, Tn, F)), **_lstm_params(rng, F, Hn)}
    seed = int(rng.integers(1 << 30))
    return (lambda q: _contract(T.lstm_layer(q["x"], q["w_x"], q["w_h"], q["b"]), np.random.default_rng(seed))), p


def _lstm_cell(rng):
    B, F, Hn = _dim(rng, 1, 3), _dim(rng), _dim(rng)
    p = {
        "x": rng.normal(size=(B, F)),
        "h": rng.normal(size=(B, Hn)) * 0.5,
        "c": rng.normal(size=(B, Hn)),
        **_lstm_params(rng, F, Hn),
    }
    seed = int(rng.integers(1 << 30))

    def f(q):
        h, c = lstm_cell(q["x"], q["h"], q["c"], q["w_x"], q["w_h"], q["b"])
        r = np.random.default_rng(seed)
        return T.add(_contract(h, r), _contract(c, r))

    return f, p


def _losses(rng):
    pred = rng.normal(size=_dim(rng, 2, 6))
    target = pred + np.where(rng.random(pred.size) < 0.5, -1.0, 1.0) * rng.uniform(0.2, 1.0, pred.size)
    return (lambda p: T.add(T.mse_loss(p["pred"], target), T.mae(p["pred"], target))), {"pred": pred}


CASES = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "neg": _unary(T.neg),
    "tanh": _unary(T.tanh),
    "sigmoid": _unary(T.sigmoid),
    "absolute": _unary(T.absolute, shift_from_zero=True),
    "sum_axis": _sum_axis,
    "mean": _mean,
    "reshape_flatten": _reshape_flatten,
    "slice_time_take_last": _slicing,
    "stack": _stack,
    "matmul": _matmul,
    "linear": _linear,
    "conv2d_spatial": _conv2d,
    "conv1d_temporal": _conv1d,
    "avg_pool2d": _avg_pool,
    "lstm_layer": _lstm_layer,
    "lstm_cell": _lstm_cell,
    "mse_mae": _losses,
}
