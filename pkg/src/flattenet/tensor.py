"""Rank-4 tensors, learnable parameters, the backward tape and the FLT1 container.

Tensors are plain ``numpy.ndarray`` objects of shape ``(n, c, h, w)`` in
C order.  Every differentiable op takes an optional :class:`Tape` and, when
one is given, records a vector-Jacobian closure for its output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
FLT1_MAGIC = b"FLT1"


class TensorError(ValueError):
    """Raised for malformed tensor construction or I/O."""


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise TensorError(f"unknown dtype {dtype!r}, expected f32 or f64") from None
    dt = np.dtype(dtype)
    if dt not in _DTYPE_CODES:
        raise TensorError(f"unsupported dtype {dt}")
    return dt


def tensor_new(dims, fill="zeros", *, values=None, value=0.0, a=1.0, seed=None, dtype="f64"):
    """Create a contiguous ``(n, c, h, w)`` tensor.

    ``fill`` is one of ``zeros``, ``ones``, ``constant`` (uses ``value``),
    ``uniform`` (seeded, in ``[-a, a]``) or ``values`` (uses ``values``).
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4 or any(d < 0 for d in dims):
        raise TensorError(f"dims must be four non-negative integers, got {dims}")
    dt = resolve_dtype(dtype)
    size = int(np.prod(dims))
    if values is not None:
        fill = "values"
    if fill == "zeros":
        return np.zeros(dims, dtype=dt)
    if fill == "ones":
        return np.ones(dims, dtype=dt)
    if fill == "constant":
        return np.full(dims, value, dtype=dt)
    if fill == "uniform":
        if seed is None:
            raise TensorError("seeded-uniform fill requires a seed")
        rng = np.random.default_rng(seed)
        return rng.uniform(-a, a, size=dims).astype(dt)
    if fill == "values":
        flat = np.asarray(values, dtype=dt).ravel()
        if flat.size != size:
            raise TensorError(f"{flat.size} values supplied for dims {dims} ({size} expected)")
        return np.ascontiguousarray(flat.reshape(dims))
    raise TensorError(f"unknown fill {fill!r}")


def assert_finite(x: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise FloatingPointError(f"{what} contains {bad} non-finite values")


@dataclass(eq=False)
class Param:
    """A learnable tensor with an accumulated-gradient slot."""

    value: np.ndarray
    name: str = ""
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise TensorError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0


Node = tuple  # (output, inputs, vjp)


class Tape:
    """Records per-op backward closures and replays them in reverse.

    Gradients of plain arrays are keyed by object identity; the tape holds a
    reference to every recorded array so identities stay unique.  Gradients of
    :class:`Param` inputs are accumulated straight into ``param.grad``.
    """

    def __init__(self):
        self._nodes: list[Node] = []

    def __len__(self):
        return len(self._nodes)

    def record(self, out: np.ndarray, inputs: Sequence, vjp: Callable) -> np.ndarray:
        if any(out is inp for inp in inputs):
            out = out.copy()
        self._nodes.append((out, tuple(inputs), vjp))
        return out

    def backward(self, out: np.ndarray, grad: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Propagate ``grad`` (default ones) from ``out``; returns array-gradients by id."""
        if grad is None:
            grad = np.ones_like(out)
        grads = {id(out): np.asarray(grad, dtype=out.dtype)}
        for node_out, inputs, vjp in reversed(self._nodes):
            g = grads.get(id(node_out))
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or inp is None:
                    continue
                if isinstance(inp, Param):
                    inp.grad += gi
                else:
                    key = id(inp)
                    grads[key] = grads[key] + gi if key in grads else gi
        return grads


def maybe_record(tape: Tape | None, out, inputs, vjp):
    if tape is None:
        return out
    return tape.record(out, inputs, vjp)


def write_flt1(path, x: np.ndarray) -> None:
    Path(path).write_bytes(encode_flt1(x))


def encode_flt1(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.ndim != 4:
        raise TensorError(f"FLT1 stores rank-4 tensors, got rank {x.ndim}")
    code = _DTYPE_CODES.get(x.dtype)
    if code is None:
        raise TensorError(f"FLT1 cannot store dtype {x.dtype}")
    header = FLT1_MAGIC + struct.pack("<B4I", code, *x.shape)
    return header + np.ascontiguousarray(x, dtype=x.dtype.newbyteorder("<")).tobytes()


def decode_flt1(buf: bytes) -> np.ndarray:
    if len(buf) < 21 or buf[:4] != FLT1_MAGIC:
        raise TensorError("not an FLT1 tensor (bad magic)")
    code, *dims = struct.unpack("<B4I", buf[4:21])
    if code not in _CODE_DTYPES:
        raise TensorError(f"unknown FLT1 dtype code {code}")
    dt = _CODE_DTYPES[code].newbyteorder("<")
    count = int(np.prod(dims))
    if len(buf) - 21 != count * dt.itemsize:
        raise TensorError(f"FLT1 payload is {len(buf) - 21} bytes, expected {count * dt.itemsize}")
    data = np.frombuffer(buf, dtype=dt, offset=21, count=count)
    return data.astype(dt.newbyteorder("="), copy=True).reshape(dims)


def read_flt1(path) -> np.ndarray:
    return decode_flt1(Path(path).read_bytes())
