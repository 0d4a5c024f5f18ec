"""Convolution, normalization, activation, resampling and loss primitives.

Each op returns a fresh array and, given a tape, records its backward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Param, maybe_record


class ShapeError(ValueError):
    """Channel, group or spatial geometry mismatch."""


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    k: int = 1
    s: int = 1
    g: int = 1
    padding: int | None = None
    bias: bool = False

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.k, self.s, self.g) < 1:
            raise ShapeError(f"non-positive conv hyperparameter in {self}")
        if self.c_in % self.g or self.c_out % self.g:
            raise ShapeError(f"groups {self.g} must divide c_in {self.c_in} and c_out {self.c_out}")
        if self.padding is None:
            object.__setattr__(self, "padding", self.k // 2)

    @property
    def weight_shape(self):
        return (self.c_out, self.c_in // self.g, self.k, self.k)

    def out_hw(self, h, w):
        p, k, s = self.padding, self.k, self.s
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def he_uniform(shape, rng, dtype=np.float64):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _windows(xp, k, s, ho, wo):
    # (n, c, ho, wo, k, k) strided view
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]


def conv2d(x, w: Param, spec: ConvSpec, b: Param | None = None, tape=None):
    """Grouped 2-D convolution (cross-correlation) with zero padding."""
    n, c, h, wd = x.shape
    if c != spec.c_in:
        raise ShapeError(f"input has {c} channels, conv expects {spec.c_in}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {w.shape} != {spec.weight_shape}")
    k, s, p, g = spec.k, spec.s, spec.padding, spec.g
    ho, wo = spec.out_hw(h, wd)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv output would be empty for input {h}x{wd}")
    cg, og = c // g, spec.c_out // g
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    W = w.value

    if cg == 1 and og == 1:
        # depthwise: k*k shifted multiply-adds
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                out += W[None, :, 0, i, j, None, None] * xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
        cols = None
    else:
        if k == 1 and s == 1 and p == 0:
            cols = x.reshape(n, g, cg, h * wd)
        else:
            win = _windows(xp, k, s, ho, wo)
            cols = win.reshape(n, g, cg, ho, wo, k, k).transpose(0, 1, 2, 5, 6, 3, 4)
            cols = cols.reshape(n, g, cg * k * k, ho * wo)
        out = (W.reshape(g, og, cg * k * k) @ cols).reshape(n, spec.c_out, ho, wo)
    if b is not None:
        out = out + b.value[None, :, None, None]

    def vjp(dout):
        dW = np.zeros_like(W)
        dxp = np.zeros_like(xp)
        if cols is None:
            for i in range(k):
                for j in range(k):
                    sl = (slice(None), slice(None), slice(i, i + s * ho, s), slice(j, j + s * wo, s))
                    dW[:, 0, i, j] = np.einsum("nchw,nchw->c", dout, xp[sl])
                    dxp[sl] += W[None, :, 0, i, j, None, None] * dout
        else:
            D = dout.reshape(n, g, og, ho * wo)
            dW[...] = (D @ cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(W.shape)
            dcols = W.reshape(g, og, cg * k * k).transpose(0, 2, 1) @ D
            dcols = dcols.reshape(n, c, k, k, ho, wo)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, i, j]
        dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
        db = dout.sum(axis=(0, 2, 3)) if b is not None else None
        return np.ascontiguousarray(dx), dW, db

    return maybe_record(tape, out, (x, w, b), vjp)


class BatchNorm:
    """Per-channel batch normalization with running statistics."""

    def __init__(self, c, *, eps=1e-5, momentum=0.1, dtype=np.float64, name="bn"):
        self.c = c
        self.eps = eps
        self.momentum = momentum
        self.gamma = Param(np.ones(c, dtype=dtype), f"{name}.gamma")
        self.beta = Param(np.zeros(c, dtype=dtype), f"{name}.beta")
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.training = True

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def batch_norm(x, bn: BatchNorm, tape=None):
    n, c, h, w = x.shape
    if c != bn.c:
        raise ShapeError(f"batch_norm over {bn.c} channels got {c}")
    gamma = bn.gamma.value[None, :, None, None]
    beta = bn.beta.value[None, :, None, None]
    m = n * h * w
    if bn.training:
        if m < 2:
            raise ShapeError("train-mode batch_norm needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        mom = bn.momentum
        bn.running_mean[...] = (1 - mom) * bn.running_mean + mom * mean
        bn.running_var[...] = (1 - mom) * bn.running_var + mom * var * (m / (m - 1))
    else:
        mean, var = bn.running_mean, bn.running_var
    inv_std = (1.0 / np.sqrt(var + bn.eps))[None, :, None, None]
    xhat = (x - mean[None, :, None, None]) * inv_std
    out = gamma * xhat + beta
    training = bn.training

    def vjp(dout):
        dgamma = np.einsum("nchw,nchw->c", dout, xhat)
        dbeta = dout.sum(axis=(0, 2, 3))
        dxhat = dout * gamma
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = inv_std / m * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return maybe_record(tape, out, (x, bn.gamma, bn.beta), vjp)


def prelu(x, a: Param, tape=None):
    """Channel-wise parametric ReLU."""
    if a.shape != (x.shape[1],):
        raise ShapeError(f"PReLU slopes {a.shape} do not match {x.shape[1]} channels")
    slope = a.value[None, :, None, None]
    pos = x > 0
    out = np.where(pos, x, slope * x)

    def vjp(dout):
        dx = np.where(pos, dout, slope * dout)
        da = np.einsum("nchw,nchw->c", np.where(pos, 0.0, x), dout)
        return dx, da

    return maybe_record(tape, out, (x, a), vjp)


def relu(x, tape=None):
    pos = x > 0
    out = np.where(pos, x, 0).astype(x.dtype)

    def vjp(dout):
        return (np.where(pos, dout, 0).astype(dout.dtype),)

    return maybe_record(tape, out, (x,), vjp)


def _interp_matrix(n_in, factor, dtype):
    """Rows map output samples to inputs with half-pixel centers, edge clamped."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    A = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(A, (np.arange(n_out), i0), 1 - lam)
    np.add.at(A, (np.arange(n_out), i1), lam)
    return A


def bilinear_upsample(x, factor=4, tape=None):
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"upsampling factor must be a positive integer, got {factor}")
    n, c, h, w = x.shape
    Ah = _interp_matrix(h, factor, x.dtype)
    Aw = _interp_matrix(w, factor, x.dtype)
    out = np.ascontiguousarray(Ah @ x @ Aw.T)

    def vjp(dout):
        return (Ah.T @ dout @ Aw,)

    return maybe_record(tape, out, (x,), vjp)


def mse_loss(pred, target, tape=None):
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    out = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def vjp(g):
        return (g * (2.0 / diff.size) * diff, None)

    return maybe_record(tape, out, (pred, target), vjp)


def pixel_softmax_ce(pred, labels, block_size=1, tape=None):
    """Mean per-pixel softmax cross-entropy.

    ``pred`` has ``classes * block_size**2`` channels grouped into contiguous
    blocks of ``classes``; ``labels`` has shape ``(n, block_size**2, h, w)``
    (or ``(n, h, w)`` when ``block_size == 1``) holding one label per block.
    """
    n, ch, h, w = pred.shape
    nb = block_size * block_size
    if ch % nb:
        raise ShapeError(f"{ch} channels not divisible into {nb} blocks")
    classes = ch // nb
    labels = np.asarray(labels)
    if labels.ndim == 3:
        labels = labels[:, None]
    if labels.shape != (n, nb, h, w):
        raise ShapeError(f"labels shape {labels.shape} != {(n, nb, h, w)}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label outside [0, {classes})")
    z = pred.reshape(n, nb, classes, h, w)
    zmax = z.max(axis=2, keepdims=True)
    e = np.exp(z - zmax)
    se = e.sum(axis=2, keepdims=True)
    logp = z - zmax - np.log(se)
    lab = labels[:, :, None].astype(np.intp)
    picked = np.take_along_axis(logp, lab, axis=2)
    count = n * nb * h * w
    out = np.asarray(-picked.sum() / count, dtype=pred.dtype)

    def vjp(g):
        d = e / se
        np.put_along_axis(d, lab, np.take_along_axis(d, lab, axis=2) - 1.0, axis=2)
        return (g * d.reshape(pred.shape) / count, None)

    return maybe_record(tape, out, (pred, labels), vjp)
