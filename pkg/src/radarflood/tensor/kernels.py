"""Convolution, pooling and recurrent kernels with hand-written backward passes.

Tensor layout is channels-last: spatial ops act on ``[..., H, W, C]`` and the
temporal op on ``[B, T, ..., C]``. Convolutions gather patches into one column
matrix and do a single GEMM, so the reduction order is fixed.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeMismatch
from .autograd import Tensor, _result, _sigmoid, as_tensor


def _same_pad(k: int) -> tuple[int, int]:
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def _pooled_kernel(w: np.ndarray, p: int) -> np.ndarray:
    """Kernel of ``avg_pool(conv(x, w), p)`` seen as one stride-``p`` conv."""
    kh, kw = w.shape[:2]
    out = np.zeros((kh + p - 1, kw + p - 1) + w.shape[2:])
    for i in range(p):
        for j in range(p):
            out[i : i + kh, j : j + kw] += w
    return out / (p * p)


def _unpool_kernel_grad(g_eff: np.ndarray, kh: int, kw: int, p: int) -> np.ndarray:
    g = np.zeros((kh, kw) + g_eff.shape[2:])
    for i in range(p):
        for j in range(p):
            g += g_eff[i : i + kh, j : j + kw]
    return g / (p * p)


def conv2d_spatial(x, w, b=None, padding: str = "same", pool: int = 1) -> Tensor:
    """Per-frame 2D convolution, optionally fused with average pooling.

    Args:
        x: ``[..., H, W, C_in]``.
        w: ``[kh, kw, C_in, C_out]``.
        b: optional ``[C_out]``.
        padding: ``"same"`` (zero padding, output H x W) or ``"valid"``.
        pool: when > 1 the result equals ``avg_pool2d(conv2d_spatial(x, w, b,
            padding), pool)``, computed as a single strided convolution.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim < 3 or w.ndim != 4 or x.shape[-1] != w.shape[2]:
        raise ShapeMismatch(f"conv2d_spatial input {x.shape} with kernel {w.shape}")
    kh, kw, cin, cout = w.shape
    lead = x.shape[:-3]
    H, W = x.shape[-3:-1]
    if padding == "same":
        (pt, pb), (pl, pr) = _same_pad(kh), _same_pad(kw)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    Hc, Wc = H + pt + pb - kh + 1, W + pl + pr - kw + 1  # unpooled output extent
    if Hc < 1 or Wc < 1:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than input {H}x{W}")
    p = int(pool)
    Ho, Wo = Hc // p, Wc // p
    if Ho < 1 or Wo < 1:
        raise ShapeMismatch(f"pool {p} larger than conv output {Hc}x{Wc}")
    w_eff = _pooled_kernel(w.data, p) if p > 1 else w.data
    eh, ew = w_eff.shape[:2]

    x4 = x.data.reshape((-1, H, W, cin))
    n = x4.shape[0]
    xp = np.pad(x4, [(0, 0), (pt, pb), (pl, pr), (0, 0)]) if (pt or pb or pl or pr) else x4
    win = sliding_window_view(xp, (eh, ew), axis=(1, 2))[:, : (Ho - 1) * p + 1 : p, : (Wo - 1) * p + 1 : p]
    # win: [n, Ho, Wo, C, eh, ew] -> cols ordered (eh, ew, C) to match w_eff
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * Ho * Wo, eh * ew * cin)
    w2 = w_eff.reshape(eh * ew * cin, cout)
    out = cols @ w2
    if b is not None:
        b = as_tensor(b)
        out += b.data
    out = out.reshape(lead + (Ho, Wo, cout))
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = None
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(w_eff.shape)
            if p > 1:
                gw = _unpool_kernel_grad(gw, kh, kw, p)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(n, Ho, Wo, eh, ew, cin)
            gxp = np.zeros_like(xp)
            for dy in range(eh):
                for dx in range(ew):
                    gxp[:, dy : dy + (Ho - 1) * p + 1 : p, dx : dx + (Wo - 1) * p + 1 : p] += gcols[:, :, :, dy, dx]
            gx = gxp[:, pt : pt + H, pl : pl + W].reshape(x.shape)
        grads = (gx, gw)
        if b is not None:
            grads = grads + (g2.sum(axis=0),)
        return grads

    return _result(out, parents, back)


def conv1d_temporal(x, w, b=None, padding: str = "valid") -> Tensor:
    """Convolution along axis 1 (time), applied independently at every site.

    Args:
        x: ``[B, T, ..., C_in]``.
        w: ``[kt, C_in, C_out]``.
        b: optional ``[C_out]``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim < 3 or w.ndim != 3 or x.shape[-1] != w.shape[1]:
        raise ShapeMismatch(f"conv1d_temporal input {x.shape} with kernel {w.shape}")
    kt, cin, cout = w.shape
    B, T = x.shape[:2]
    site = x.shape[2:-1]
    if padding == "same":
        lo, hi = _same_pad(kt)
    elif padding == "valid":
        lo = hi = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    To = T + lo + hi - kt + 1
    if To < 1:
        raise ShapeMismatch(f"temporal kernel {kt} longer than sequence {T}")
    x4 = x.data.reshape(B, T, -1, cin)
    S = x4.shape[2]
    xp = np.pad(x4, [(0, 0), (lo, hi), (0, 0), (0, 0)]) if (lo or hi) else x4
    win = sliding_window_view(xp, kt, axis=1)  # [B, To, S, C, kt]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 3)).reshape(B * To * S, kt * cin)
    w2 = w.data.reshape(kt * cin, cout)
    out = cols @ w2
    if b is not None:
        b = as_tensor(b)
        out += b.data
    out = out.reshape((B, To) + site + (cout,))
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(B, To, S, kt, cin)
            gxp = np.zeros_like(xp)
            for k in range(kt):
                gxp[:, k : k + To] += gcols[:, :, :, k]
            gx = gxp[:, lo : lo + T].reshape(x.shape)
        grads = (gx, gw)
        if b is not None:
            grads = grads + (g2.sum(axis=0),)
        return grads

    return _result(out, parents, back)


def avg_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping average pooling over ``[..., H, W, C]``.

    Trailing rows/columns that do not fill a full block are dropped.
    """
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeMismatch(f"avg_pool2d needs [..., H, W, C], got {x.shape}")
    H, W, C = x.shape[-3:]
    Ho, Wo = H // size, W // size
    if Ho < 1 or Wo < 1:
        raise ShapeMismatch(f"pool size {size} larger than {H}x{W}")
    lead = x.shape[:-3]
    crop = x.data[..., : Ho * size, : Wo * size, :]
    blocks = crop.reshape(lead + (Ho, size, Wo, size, C))
    out = blocks.mean(axis=(-4, -2))
    scale = 1.0 / (size * size)

    def back(g):
        gx = np.zeros_like(x.data)
        up = np.broadcast_to(
            (g * scale)[..., :, None, :, None, :], lead + (Ho, size, Wo, size, C)
        )
        gx[..., : Ho * size, : Wo * size, :] = up.reshape(lead + (Ho * size, Wo * size, C))
        return (gx,)

    return _result(out, (x,), back)


def lstm_layer(x, w_x, w_h, b) -> Tensor:
    """One LSTM layer over a whole sequence, returning every hidden state.

    Gate order along the last weight axis is input, forget, candidate, output.

    Args:
        x: ``[B, T, F]``.
        w_x: ``[F, 4H]``.
        w_h: ``[H, 4H]``.
        b: ``[4H]``.

    Returns:
        ``[B, T, H]`` hidden states (zero initial state).
    """
    x, w_x, w_h, b = (as_tensor(t) for t in (x, w_x, w_h, b))
    if x.ndim != 3 or w_x.ndim != 2 or x.shape[2] != w_x.shape[0]:
        raise ShapeMismatch(f"lstm_layer input {x.shape} with W_x {w_x.shape}")
    Hn = w_h.shape[0]
    if w_x.shape[1] != 4 * Hn or w_h.shape != (Hn, 4 * Hn) or b.shape != (4 * Hn,):
        raise ShapeMismatch(f"inconsistent LSTM weights {w_x.shape}, {w_h.shape}, {b.shape}")
    B, T, F = x.shape
    x2 = x.data.reshape(B * T, F)
    # internal buffers are time-major so each step touches contiguous memory
    xw = np.ascontiguousarray((x2 @ w_x.data + b.data).reshape(B, T, 4 * Hn).transpose(1, 0, 2))
    wh = w_h.data
    gates = xw  # activated i, f, g, o, overwritten in place
    cells = np.zeros((T + 1, B, Hn))  # cells[t + 1] is c_t
    hs = np.zeros((T + 1, B, Hn))  # hs[t + 1] is h_t
    tanh_c = np.empty((T, B, Hn))
    for t in range(T):
        a = gates[t]
        a += hs[t] @ wh
        g_blk = np.tanh(a[:, 2 * Hn : 3 * Hn])
        a *= 0.5
        np.tanh(a, out=a)
        a *= 0.5
        a += 0.5
        a[:, 2 * Hn : 3 * Hn] = g_blk
        i, f, o = a[:, :Hn], a[:, Hn : 2 * Hn], a[:, 3 * Hn :]
        c = cells[t + 1]
        np.multiply(f, cells[t], out=c)
        c += i * g_blk
        np.tanh(c, out=tanh_c[t])
        np.multiply(o, tanh_c[t], out=hs[t + 1])

    def back(g_out):
        g_tm = g_out.transpose(1, 0, 2)
        dz = np.empty((T, B, 4 * Hn))
        dh_next = np.zeros((B, Hn))
        dc_next = np.zeros((B, Hn))
        wh_t = np.ascontiguousarray(wh.T)
        for t in range(T - 1, -1, -1):
            a = gates[t]
            i, f, gg, o = a[:, :Hn], a[:, Hn : 2 * Hn], a[:, 2 * Hn : 3 * Hn], a[:, 3 * Hn :]
            tc = tanh_c[t]
            dh = g_tm[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            d = dz[t]
            d[:, :Hn] = dc * gg * i * (1.0 - i)
            d[:, Hn : 2 * Hn] = dc * cells[t] * f * (1.0 - f)
            d[:, 2 * Hn : 3 * Hn] = dc * i * (1.0 - gg * gg)
            d[:, 3 * Hn :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = d @ wh_t
        dz_bt = dz.transpose(1, 0, 2).reshape(B * T, 4 * Hn)
        gx = (dz_bt @ w_x.data.T).reshape(B, T, F) if x.requires_grad else None
        gwx = x2.T @ dz_bt
        dz2 = dz.reshape(T * B, 4 * Hn)
        gwh = hs[:T].reshape(T * B, Hn).T @ dz2
        gb = dz2.sum(axis=0)
        return gx, gwx, gwh, gb

    return _result(np.ascontiguousarray(hs[1:].transpose(1, 0, 2)), (x, w_x, w_h, b), back)
