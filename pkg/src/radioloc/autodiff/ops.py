"""Differentiable layers: conv, pooling, upsampling, activations, CoM, losses.

All image tensors are ``(N, C, H, W)``.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor, _result


class DegenerateHeatmapError(ValueError):
    """Heatmap mass too close to zero for a center of mass."""


COM_EPS = 1e-12


def same_padding(k: int) -> tuple[int, int]:
    """(before, after) zero padding keeping the size; even kernels pad more before."""
    before = k // 2
    return before, k - 1 - before


# --------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with same zero padding.

    The padded input is laid out as one ``(C, N*Hp*Wp)`` matrix; shifting it
    by ``i*Wp + j`` aligns kernel tap ``(i, j)`` with every output position,
    so each tap is a single matrix product on a strided view.  Positions
    that straddle a row or image boundary are computed and then cropped.
    """
    N, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ValueError(f"conv expects {Cw} input channels, got {C}")
    if b is not None and b.shape != (O,):
        raise ValueError(f"bias shape {b.shape} != ({O},)")
    pt, pb = same_padding(kh)
    pl, pr = same_padding(kw)
    Hp, Wp = H + kh - 1, W + kw - 1
    L = N * Hp * Wp
    tail = (kh - 1) * Wp + (kw - 1)
    dt = x.data.dtype
    Xe = np.zeros((C, L + tail), dt)
    Xe[:, :L].reshape(C, N, Hp, Wp)[:, :, pt:pt + H, pl:pl + W] = x.data.transpose(1, 0, 2, 3)
    wd = w.data
    # per-tap weight matrices must be contiguous or matmul leaves BLAS
    wt = np.ascontiguousarray(wd.transpose(2, 3, 0, 1))
    out_full = np.zeros((O, L), dt)
    for i in range(kh):
        for j in range(kw):
            off = i * Wp + j
            out_full += wt[i, j] @ Xe[:, off:off + L]
    out = out_full.reshape(O, N, Hp, Wp)[:, :, :H, :W].transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        G = np.zeros((O, N, Hp, Wp), dt)
        G[:, :, :H, :W] = g.transpose(1, 0, 2, 3)
        G = G.reshape(O, L)
        if w.requires_grad:
            dwt = np.empty((kh, kw, O, C), dt)
            for i in range(kh):
                for j in range(kw):
                    off = i * Wp + j
                    dwt[i, j] = G @ Xe[:, off:off + L].T
            w._accum(dwt.transpose(2, 3, 0, 1))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dX = np.zeros((C, L + tail), dt)
            wT = np.ascontiguousarray(wd.transpose(2, 3, 1, 0))
            for i in range(kh):
                for j in range(kw):
                    off = i * Wp + j
                    dX[:, off:off + L] += wT[i, j] @ G
            dx = dX[:, :L].reshape(C, N, Hp, Wp)[:, :, pt:pt + H, pl:pl + W].transpose(1, 0, 2, 3)
            x._accum(dx)

    return _result(out, parents, bw)


# --------------------------------------------------------------------------
# resampling


def avgpool2(x: Tensor) -> Tensor:
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"avgpool2 needs even spatial dims, got {H}x{W}")
    out = x.data.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def bw(g):
        x._accum(np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)

    return _result(out, (x,), bw)


def bilinear_up2_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """(2n, n) interpolation matrix, half-pixel centers, edge-clamped.

    Output ``o`` samples source coordinate ``(o + 0.5) / 2 - 0.5``: even
    outputs weigh their source pixel 0.75 and the previous one 0.25, odd
    outputs the source pixel 0.75 and the next one 0.25.
    """
    U = np.zeros((2 * n, n), dtype)
    for o in range(2 * n):
        s = (o + 0.5) / 2.0 - 0.5
        lo = math.floor(s)
        f = s - lo
        U[o, min(max(lo, 0), n - 1)] += 1.0 - f
        U[o, min(max(lo + 1, 0), n - 1)] += f
    return U


def upsample2(x: Tensor) -> Tensor:
    N, C, H, W = x.shape
    Uh = bilinear_up2_matrix(H, x.data.dtype)
    Uw = bilinear_up2_matrix(W, x.data.dtype)
    out = np.matmul(np.matmul(Uh, x.data), Uw.T)

    def bw(g):
        x._accum(np.matmul(np.matmul(Uh.T, g), Uw))

    return _result(out, (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = np.concatenate([t.data for t in xs], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        for t, part in zip(xs, np.split(g, sizes, axis=axis)):
            t._accum(part)

    return _result(out, tuple(xs), bw)


# --------------------------------------------------------------------------
# activations


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    d = x.data
    pos = d > 0
    out = np.where(pos, d, slope * d)
    return _result(out, (x,), lambda g: x._accum(np.where(pos, g, slope * g)))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0).astype(x.data.dtype), (x,), lambda g: x._accum(g * pos))


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(s, (x,), lambda g: x._accum(g * s * (1.0 - s)))


def softmax2d(x: Tensor) -> Tensor:
    """Softmax over each ``H x W`` plane."""
    d = x.data
    m = d.max(axis=(2, 3), keepdims=True)
    e = np.exp(d - m)
    s = e / e.sum(axis=(2, 3), keepdims=True)

    def bw(g):
        x._accum(s * (g - (g * s).sum(axis=(2, 3), keepdims=True)))

    return _result(s, (x,), bw)


ACTIVATIONS = {
    "leaky-relu": leaky_relu,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax2d,
}


# --------------------------------------------------------------------------
# center of mass and losses


def heatmap_mass(H: np.ndarray) -> np.ndarray:
    return H.reshape(H.shape[0], -1).sum(axis=1)


def com_readout(H: Tensor, skip_degenerate: bool = False):
    """Center of mass ``(mu_x, mu_y)`` of each ``1 x h x w`` heatmap.

    Coordinates run ``1..w`` along x (columns) and ``1..h`` along y (rows).
    Returns an ``(N, 2)`` tensor.  A heatmap whose mass has magnitude below
    ``1e-12`` raises ``DegenerateHeatmapError``; with ``skip_degenerate``
    those rows are instead returned as ``(0, 0)`` with no gradient and the
    call returns ``(tensor, valid_mask)``.
    """
    N, C, h, w = H.shape
    if C != 1:
        raise ValueError(f"com_readout expects one channel, got {C}")
    d = H.data[:, 0]
    xs = np.arange(1, w + 1, dtype=d.dtype)
    ys = np.arange(1, h + 1, dtype=d.dtype)
    S = d.sum(axis=(1, 2))
    valid = np.abs(S) >= COM_EPS
    if not skip_degenerate and not valid.all():
        raise DegenerateHeatmapError(f"heatmap mass {S[~valid][0]!r} below {COM_EPS}")
    Ss = np.where(valid, S, 1.0)
    Ax = (d * xs[None, None, :]).sum(axis=(1, 2))
    Ay = (d * ys[None, :, None]).sum(axis=(1, 2))
    mx = np.where(valid, Ax / Ss, 0.0)
    my = np.where(valid, Ay / Ss, 0.0)
    out = np.stack([mx, my], axis=1)

    def bw(g):
        gx = (g[:, 0] * valid / Ss)[:, None, None]
        gy = (g[:, 1] * valid / Ss)[:, None, None]
        dH = gx * (xs[None, None, :] - mx[:, None, None]) + gy * (ys[None, :, None] - my[:, None, None])
        H._accum(dH[:, None].astype(d.dtype))

    res = _result(out, (H,), bw)
    return (res, valid) if skip_degenerate else res


def _check_pairs(pred: Tensor, truth) -> np.ndarray:
    t = np.asarray(truth, dtype=pred.data.dtype).reshape(-1, 2)
    if pred.shape != t.shape:
        raise ValueError(f"pred {pred.shape} vs truth {t.shape}")
    if len(t) == 0:
        raise ValueError("empty batch")
    return t


def aed_loss(pred: Tensor, truth, mask: np.ndarray | None = None) -> Tensor:
    """Mean Euclidean distance; the gradient at coincident points is zero."""
    t = _check_pairs(pred, truth)
    m = np.ones(len(t), bool) if mask is None else np.asarray(mask, bool)
    n = int(m.sum())
    if n == 0:
        raise ValueError("empty batch")
    diff = pred.data - t
    dist = np.sqrt((diff ** 2).sum(axis=1))
    val = dist[m].sum() / n

    def bw(g):
        safe = np.where(dist > 0, dist, 1.0)
        grad = np.where((dist > 0)[:, None], diff / safe[:, None], 0.0) * m[:, None] / n
        pred._accum(g * grad)

    return _result(np.asarray(val), (pred,), bw)


def ased_loss(pred: Tensor, truth, mask: np.ndarray | None = None) -> Tensor:
    t = _check_pairs(pred, truth)
    m = np.ones(len(t), bool) if mask is None else np.asarray(mask, bool)
    n = int(m.sum())
    if n == 0:
        raise ValueError("empty batch")
    diff = pred.data - t
    val = ((diff ** 2).sum(axis=1) * m).sum() / n
    return _result(np.asarray(val), (pred,), lambda g: pred._accum(g * 2.0 * diff * m[:, None] / n))


def mse_loss(pred: Tensor, target) -> Tensor:
    t = np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise ValueError(f"pred {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    return _result(np.asarray((diff ** 2).mean()), (pred,), lambda g: pred._accum(g * 2.0 * diff / diff.size))
