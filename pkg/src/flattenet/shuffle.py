"""Depth-to-space and channel permutations, and group-connectivity analysis.

Every op here is a fixed permutation of tensor elements, so each backward is
the inverse permutation applied to the output gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import ShapeError
from .tensor import maybe_record

REARRANGE_KINDS = ("cs+ps", "ps-only", "randperm+ps")


def _pixel_shuffle(x, r):
    n, c, h, w = x.shape
    co = c // (r * r)
    y = x.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(n, co, h * r, w * r))


def _pixel_unshuffle(x, r):
    n, c, h, w = x.shape
    y = x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(n, c * r * r, h // r, w // r))


def _channel_shuffle(x, g):
    n, c, h, w = x.shape
    y = x.reshape(n, g, c // g, h, w).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(y.reshape(n, c, h, w))


def _check_ps(x, r):
    if r < 1 or x.shape[1] % (r * r):
        raise ShapeError(f"pixel_shuffle: {x.shape[1]} channels not divisible by r^2={r * r}")


def _check_pu(x, r):
    if r < 1 or x.shape[2] % r or x.shape[3] % r:
        raise ShapeError(f"pixel_unshuffle: spatial {x.shape[2:]} not divisible by {r}")


def _check_cs(x, g):
    if g < 1 or x.shape[1] % g:
        raise ShapeError(f"channel_shuffle: {x.shape[1]} channels not divisible by {g} groups")


def pixel_shuffle(x, r, tape=None):
    """``out[n, c, h*r+i, w*r+j] = x[n, c*r*r + i*r + j, h, w]``."""
    _check_ps(x, r)
    out = _pixel_shuffle(x, r)
    return maybe_record(tape, out, (x,), lambda g: (_pixel_unshuffle(g, r),))


def pixel_unshuffle(x, r, tape=None):
    _check_pu(x, r)
    out = _pixel_unshuffle(x, r)
    return maybe_record(tape, out, (x,), lambda g: (_pixel_shuffle(g, r),))


def channel_shuffle(x, g, tape=None):
    """Transpose the ``(g, c/g)`` channel view: out channel ``j*g + i`` = in ``i*(c/g) + j``."""
    _check_cs(x, g)
    c = x.shape[1]
    out = _channel_shuffle(x, g)
    return maybe_record(tape, out, (x,), lambda d: (_channel_shuffle(d, c // g),))


def permute_channels(x, perm, tape=None):
    """``out[:, i] = x[:, perm[i]]``."""
    perm = np.asarray(perm)
    if perm.shape != (x.shape[1],):
        raise ShapeError(f"permutation of length {perm.size} for {x.shape[1]} channels")
    inv = np.argsort(perm)
    out = np.ascontiguousarray(x[:, perm])
    return maybe_record(tape, out, (x,), lambda d: (np.ascontiguousarray(d[:, inv]),))


@dataclass(frozen=True)
class RearrangeSpec:
    """Geometry of the depth-to-space rearrangement.

    ``s2`` is the grid side (upscaling factor) and ``c_tilde`` the channels
    of each pixelwise descriptor.  ``kind`` selects the channel permutation
    that precedes the pixel shuffle; ``seed`` fixes the random one.
    """

    s2: int
    c_tilde: int
    kind: str = "cs+ps"
    seed: int = 0

    def __post_init__(self):
        if self.s2 < 1 or self.c_tilde < 1:
            raise ShapeError(f"invalid rearrangement geometry s2={self.s2}, c_tilde={self.c_tilde}")
        if self.kind not in REARRANGE_KINDS:
            raise ValueError(f"unknown rearrangement {self.kind!r}; expected one of {REARRANGE_KINDS}")

    @property
    def channels(self) -> int:
        return self.c_tilde * self.s2 * self.s2

    def channel_perm(self) -> np.ndarray:
        """Channel permutation applied before the pixel shuffle (``out[:, i] = in[:, perm[i]]``)."""
        c, nb = self.channels, self.s2 * self.s2
        if self.kind == "ps-only":
            return np.arange(c)
        if self.kind == "randperm+ps":
            return np.random.default_rng(self.seed).permutation(c)
        # channel shuffle with s2^2 groups: out j*nb + i <- in i*c_tilde + j
        i, j = np.divmod(np.arange(c), self.c_tilde)
        perm = np.empty(c, dtype=np.intp)
        perm[j * nb + i] = np.arange(c)
        return perm

    def grid_stacking_perm(self) -> np.ndarray:
        """Permutation taking this layout to the grid-stacked one.

        In the grid-stacked layout the descriptor for grid cell ``(bi, bj)``
        occupies channels ``(bi*s2 + bj)*c_tilde ... + c_tilde``.  It is the
        identity for ``cs+ps``.
        """
        canonical = RearrangeSpec(self.s2, self.c_tilde).channel_perm()
        # R = PS . P_self and R = PS . P_cs . sigma  =>  sigma = P_cs^-1 . P_self
        return self.channel_perm()[np.argsort(canonical)]


def _check_R(x, spec: RearrangeSpec):
    if x.shape[1] != spec.channels:
        raise ShapeError(f"rearrangement expects {spec.channels} channels, got {x.shape[1]}")


def rearrange(x, spec: RearrangeSpec, tape=None):
    """Move each grid cell's descriptor from channels to its spatial position."""
    _check_R(x, spec)
    if spec.kind == "cs+ps":
        y = channel_shuffle(x, spec.s2 * spec.s2, tape=tape)
    else:
        y = permute_channels(x, spec.channel_perm(), tape=tape)
    return pixel_shuffle(y, spec.s2, tape=tape)


def rearrange_inv(y, spec: RearrangeSpec, tape=None):
    """Inverse of :func:`rearrange`; folds a map of ``c_tilde`` channels."""
    if y.shape[1] != spec.c_tilde:
        raise ShapeError(f"inverse rearrangement expects {spec.c_tilde} channels, got {y.shape[1]}")
    _check_pu(y, spec.s2)
    x = pixel_unshuffle(y, spec.s2, tape=tape)
    if spec.kind == "cs+ps":
        return channel_shuffle(x, spec.c_tilde, tape=tape)
    return permute_channels(x, np.argsort(spec.channel_perm()), tape=tape)


def to_grid_stacked(x, spec: RearrangeSpec, tape=None):
    if spec.kind == "cs+ps":
        return x
    return permute_channels(x, spec.grid_stacking_perm(), tape=tape)


def _group_matrix(c, g):
    blk = np.arange(c) // (c // g)
    return blk[:, None] == blk[None, :]


def _shuffle_matrix(c, g):
    m = np.zeros((c, c), dtype=bool)
    i, j = np.divmod(np.arange(c), c // g)
    m[j * g + i, np.arange(c)] = True
    return m


def _check_groups(g1, g2, g3, c):
    for name, g in (("g1", g1), ("g2", g2), ("g3", g3)):
        if g < 1 or c % g:
            raise ShapeError(f"{name}={g} does not divide {c} channels")


def connectivity_matrix(g1, g2, g3, c):
    """Boolean dependency matrix (out x in) of pointwise(g3) . shuffle(g2) . pointwise(g1).

    Dense O(c^3) product; meant for small ``c``.
    """
    _check_groups(g1, g2, g3, c)
    a = _group_matrix(c, g1).astype(np.float64)
    s = _shuffle_matrix(c, g2).astype(np.float64)
    b = _group_matrix(c, g3).astype(np.float64)
    return (b @ s @ a) > 0


def connectivity_check(g1, g2, g3, c) -> bool:
    """True when every output channel depends on every input channel.

    Output group ``m`` of the second pointwise conv reads shuffled positions
    ``m*c/g3 ...``; it is fully connected iff those positions draw from all
    ``g1`` groups of the first pointwise conv.
    """
    _check_groups(g1, g2, g3, c)
    pos = np.arange(c)
    j, i = np.divmod(pos, g2)  # position j*g2 + i holds channel i*(c/g2) + j
    src = i * (c // g2) + j
    src_group = src // (c // g1)
    out_group = pos // (c // g3)
    covered = np.zeros((g3, g1), dtype=bool)
    covered[out_group, src_group] = True
    return bool(covered.all())
