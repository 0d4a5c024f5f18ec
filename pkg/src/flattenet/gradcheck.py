"""Central finite-difference check of the tape's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Param, Tape


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_input: list[float] = field(default_factory=list)
    coords_checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _rel_error(analytic, numeric, floor):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(op, inputs, eps=1e-5, tol=1e-4, *, seed=0, floor=1e-6, max_coords=None):
    """Compare analytic and central-difference gradients of ``op``.

    ``op(*inputs, tape=tape)`` must return an array.  ``inputs`` may mix
    ndarrays and :class:`Param` objects; both are perturbed coordinate by
    coordinate.  The op output is reduced to a scalar with seeded uniform
    weights so that every output element contributes.  Errors are relative,
    with ``floor`` as the smallest denominator.

    ``max_coords`` limits the number of coordinates per input (a seeded
    subset); ``None`` checks them all.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-6, 1e-3]")
    arrays = [p.value if isinstance(p, Param) else p for p in inputs]
    for a in arrays:
        if not isinstance(a, np.ndarray) or a.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
        if not a.flags.c_contiguous:
            raise ValueError("grad_check perturbs inputs in place; pass C-contiguous arrays")

    rng = np.random.default_rng(seed)
    out = op(*inputs, tape=None)
    weights = rng.uniform(-1.0, 1.0, size=np.shape(out))

    def scalar():
        return float(np.sum(np.asarray(op(*inputs, tape=None)) * weights))

    for p in inputs:
        if isinstance(p, Param):
            p.zero_grad()
    tape = Tape()
    out = op(*inputs, tape=tape)
    grads = tape.backward(out, np.asarray(weights, dtype=out.dtype))
    analytic = []
    for p in inputs:
        if isinstance(p, Param):
            analytic.append(p.grad.copy())
        else:
            analytic.append(grads.get(id(p), np.zeros_like(p)))

    per_input = []
    total = 0
    for arr, ga in zip(arrays, analytic):
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = scalar()
            flat[i] = orig - eps
            fm = scalar()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * eps)
        err = _rel_error(ga.reshape(-1)[idx], numeric, floor)
        per_input.append(float(err.max()) if err.size else 0.0)
        total += idx.size
    return GradCheckReport(max(per_input, default=0.0), tol, per_input, total)
