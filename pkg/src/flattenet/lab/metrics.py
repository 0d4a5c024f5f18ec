"""Keypoint decoding, PCKh and mean IoU."""

from __future__ import annotations

import numpy as np


def decode_keypoints(heatmaps):
    """Argmax per heatmap plus a quarter-pixel shift toward the stronger neighbor.

    ``heatmaps`` is ``(n, K, h, w)``; returns ``(n, K, 2)`` as (row, col) in
    heatmap pixels.  Argmax ties go to the lowest flat index.  Each axis is
    shifted by ``0.25 * sign(next - previous)`` using the two neighbors along
    that axis; equal neighbors, or a neighbor outside the map, give no shift
    on that axis.
    """
    hm = np.asarray(heatmaps, dtype=np.float64)
    n, k, h, w = hm.shape
    flat = hm.reshape(n, k, h * w)
    idx = flat.argmax(axis=2)
    r, c = np.divmod(idx, w)
    coords = np.stack([r, c], axis=-1).astype(np.float64)
    ni, ki = np.meshgrid(np.arange(n), np.arange(k), indexing="ij")
    inner_r = (r > 0) & (r < h - 1)
    inner_c = (c > 0) & (c < w - 1)
    rp, rm = np.minimum(r + 1, h - 1), np.maximum(r - 1, 0)
    cp, cm = np.minimum(c + 1, w - 1), np.maximum(c - 1, 0)
    dr = np.sign(hm[ni, ki, rp, c] - hm[ni, ki, rm, c]) * inner_r
    dc = np.sign(hm[ni, ki, r, cp] - hm[ni, ki, r, cm]) * inner_c
    coords[..., 0] += 0.25 * dr
    coords[..., 1] += 0.25 * dc
    return coords


def pckh(pred, truth, head_len, alpha=0.5, visible=None):
    """Percentage of keypoints closer than ``alpha * head_len`` to the truth."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.shape[-1] != 2:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    head_len = np.broadcast_to(np.asarray(head_len, dtype=np.float64), pred.shape[:-1])
    if np.any(head_len <= 0):
        raise ValueError("head length must be positive")
    mask = np.ones(pred.shape[:-1], dtype=bool) if visible is None else np.asarray(visible, dtype=bool)
    if not mask.any():
        raise ValueError("no keypoints to evaluate")
    dist = np.linalg.norm(pred - truth, axis=-1)
    hits = (dist < alpha * head_len) & mask
    return 100.0 * hits.sum() / mask.sum()


def pckh_auc(pred, truth, head_len, visible=None, step=0.01, upto=0.5):
    """Mean PCKh over alpha in (0, upto] on a ``step`` grid."""
    alphas = np.arange(1, int(round(upto / step)) + 1) * step
    return float(np.mean([pckh(pred, truth, head_len, a, visible) for a in alphas]))


def confusion_matrix(pred, truth, classes, ignore_index=None):
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth sizes differ")
    if ignore_index is not None:
        keep = truth != ignore_index
        pred, truth = pred[keep], truth[keep]
    if truth.size == 0:
        raise ValueError("no labelled pixels")
    if pred.min() < 0 or pred.max() >= classes or truth.min() < 0 or truth.max() >= classes:
        raise ValueError(f"labels outside [0, {classes})")
    return np.bincount(truth * classes + pred, minlength=classes * classes).reshape(classes, classes)


def miou(pred, truth, classes, ignore_index=None):
    """Mean IoU over classes that occur in prediction or truth."""
    if classes < 1:
        raise ValueError("need at least one class")
    cm = confusion_matrix(pred, truth, classes, ignore_index)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    present = union > 0
    return float(np.mean(inter[present] / union[present]))
