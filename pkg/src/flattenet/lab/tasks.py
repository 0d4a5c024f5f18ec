"""Seeded synthetic dense-prediction tasks.

Keypoints: each keypoint is a colored Gaussian blob on a noisy image; its
target is a Gaussian heatmap rendered directly at ``size / s1``.  Keypoint
centers lie on heatmap pixel centers, so the heatmap peak is exactly 1 at
the true location.

Segmentation: colored rectangles and disks on a noisy background; targets
are integer label maps (0 is background).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# distinct blob colors; keypoint k uses PALETTE[k % len(PALETTE)]
PALETTE = np.array(
    [[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [1, 0, 1], [0, 1, 1], [1, 0.5, 0], [0.5, 0, 1]],
    dtype=np.float64,
)


@dataclass(frozen=True)
class SyntheticTask:
    kind: str = "keypoints"
    image_size: int = 64
    num: int = 2  # keypoints K, or classes C (background included)
    sigma: float = 1.0  # heatmap Gaussian sigma in heatmap pixels
    s1: int = 4
    seed: int = 0
    noise: float = 0.1
    blob_sigma: float = 2.0  # image-space blob radius

    def __post_init__(self):
        if self.kind not in ("keypoints", "segmentation"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.num < 1:
            raise ValueError("task needs at least one keypoint or class")
        if self.image_size % self.s1:
            raise ValueError(f"image size {self.image_size} not divisible by s1={self.s1}")

    @property
    def heatmap_size(self) -> int:
        return self.image_size // self.s1

    @property
    def head_length(self) -> float:
        return self.image_size / 10


def heatmap_to_image(coords, s1):
    """Map heatmap pixel coordinates to image pixel coordinates (pixel centers)."""
    return (np.asarray(coords, dtype=np.float64) + 0.5) * s1 - 0.5


def render_heatmaps(centers, size, sigma, dtype=np.float64):
    """``centers`` (n, K, 2) as (row, col) in heatmap pixels -> (n, K, size, size)."""
    centers = np.asarray(centers, dtype=np.float64)
    n, k, _ = centers.shape
    grid = np.arange(size, dtype=np.float64)
    if sigma == 0:
        out = np.zeros((n, k, size, size), dtype=dtype)
        r = np.clip(np.rint(centers[..., 0]).astype(int), 0, size - 1)
        c = np.clip(np.rint(centers[..., 1]).astype(int), 0, size - 1)
        ni, ki = np.meshgrid(np.arange(n), np.arange(k), indexing="ij")
        out[ni, ki, r, c] = 1
        return out
    dr = grid[None, None, :] - centers[..., 0:1]
    dc = grid[None, None, :] - centers[..., 1:2]
    g = np.exp(-(dr[..., :, None] ** 2 + dc[..., None, :] ** 2) / (2 * sigma * sigma))
    return g.astype(dtype)


def _rng(task, batch, n):
    return np.random.default_rng([task.seed, batch, n])


def gen_keypoints(task: SyntheticTask, n, batch=0, dtype=np.float64):
    rng = _rng(task, batch, n)
    hs = task.heatmap_size
    margin = 1 if hs > 4 else 0
    centers = rng.integers(margin, hs - margin, size=(n, task.num, 2)).astype(np.float64)
    size = task.image_size
    images = rng.normal(0.0, task.noise, size=(n, 3, size, size))
    img_centers = heatmap_to_image(centers, task.s1)
    blobs = render_heatmaps(img_centers, size, task.blob_sigma)
    colors = PALETTE[np.arange(task.num) % len(PALETTE)]
    images += np.einsum("nkhw,kc->nchw", blobs, colors)
    heatmaps = render_heatmaps(centers, hs, task.sigma)
    return images.astype(dtype), heatmaps.astype(dtype), centers


def gen_segmentation(task: SyntheticTask, n, batch=0, dtype=np.float64, shapes=3):
    rng = _rng(task, batch, n)
    size = task.image_size
    labels = np.zeros((n, size, size), dtype=np.int64)
    yy, xx = np.mgrid[:size, :size]
    for i in range(n):
        for _ in range(shapes):
            cls = int(rng.integers(1, task.num)) if task.num > 1 else 0
            cy, cx = rng.uniform(0.15, 0.85, size=2) * size
            rad = rng.uniform(0.1, 0.25) * size
            if rng.random() < 0.5:
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad
            else:
                mask = (np.abs(yy - cy) <= rad) & (np.abs(xx - cx) <= rad * 0.7)
            labels[i][mask] = cls
    palette = np.vstack([np.zeros(3), PALETTE])
    colors = palette[np.arange(task.num) % len(palette)]
    images = colors[labels].transpose(0, 3, 1, 2) + rng.normal(0.0, task.noise, size=(n, 3, size, size))
    return images.astype(dtype), labels


def gen_task(task: SyntheticTask, n=8, batch=0, dtype=np.float64):
    """Return ``(images, targets, extra)``; identical for identical arguments.

    Keypoints: targets are heatmaps ``(n, K, size/s1, size/s1)`` and extra the
    heatmap-pixel centers ``(n, K, 2)``.  Segmentation: targets are label maps
    ``(n, size, size)`` and extra is ``None``.
    """
    if n < 1:
        raise ValueError("batch size must be positive")
    if task.kind == "keypoints":
        return gen_keypoints(task, n, batch, dtype)
    images, labels = gen_segmentation(task, n, batch, dtype)
    return images, labels, None
