"""Reusable verification routines behind ``flattenet gradcheck`` and ``flattenet selftest``."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .gradcheck import grad_check
from .head import ConfigError, DwsgConv, DwsgConvSpec, FlatteningModuleSpec, Predictor, PredictorSpec, load_config
from .head import predict_affine, predict_folded, shipped_configs
from .layers import (
    BatchNorm,
    ConvSpec,
    batch_norm,
    bilinear_upsample,
    conv2d,
    mse_loss,
    pixel_softmax_ce,
    prelu,
    relu,
)
from .model import FlatteNet, end_to_end_loss
from .shuffle import (
    RearrangeSpec,
    channel_shuffle,
    connectivity_check,
    pixel_shuffle,
    pixel_unshuffle,
    rearrange,
    rearrange_inv,
)
from .tensor import Param


def _away_from_zero(x, margin=1e-2):
    # keeps finite differences on one side of the ReLU/PReLU kink
    return np.where(np.abs(x) < margin, np.copysign(margin, x) + x, x)


def _conv_cases(rng, depthwise=False):
    shapes = [(1, 4, 6, 6, 3, 1), (2, 4, 5, 5, 3, 2), (1, 8, 3, 3, 5, 1)] if depthwise else \
        [(1, 3, 4, 5, 3, 1, 1, 1), (2, 4, 8, 4, 3, 2, 2, 1), (1, 6, 4, 3, 1, 1, 2, 0)]
    for shape in shapes:
        if depthwise:
            n, c, h, w, k, s = shape
            spec = ConvSpec(c, c, k=k, s=s, g=c)
        else:
            n, c, co, h, k, s, g, bias = shape
            w = h
            spec = ConvSpec(c, co, k=k, s=s, g=g, bias=bool(bias))
        x = rng.standard_normal((n, c, h, w))
        wt = Param(rng.standard_normal(spec.weight_shape))
        if spec.bias:
            b = Param(rng.standard_normal(spec.c_out))
            yield x.shape, (lambda x, w, b, tape, spec=spec: conv2d(x, w, spec, b, tape)), [x, wt, b]
        else:
            yield x.shape, (lambda x, w, tape, spec=spec: conv2d(x, w, spec, tape=tape)), [x, wt]


def _bn_cases(rng, training):
    for shape in [(4, 2, 3, 3), (2, 3, 2, 5), (8, 1, 1, 1)]:
        bn = BatchNorm(shape[1])
        bn.gamma.value[:] = rng.uniform(0.5, 2.0, shape[1])
        bn.beta.value[:] = rng.standard_normal(shape[1])
        bn.running_mean[:] = rng.standard_normal(shape[1])
        bn.running_var[:] = rng.uniform(0.5, 2.0, shape[1])
        bn.training = training
        yield shape, (lambda x, g, b, tape, bn=bn: batch_norm(x, bn, tape)), [rng.standard_normal(shape), bn.gamma, bn.beta]


_SHAPES = [(2, 3, 4, 4), (1, 5, 2, 3), (3, 2, 1, 6)]


def _unary(fn, shapes=_SHAPES, kink=False):
    def cases(rng):
        for shape in shapes:
            x = rng.standard_normal(shape)
            yield shape, (lambda x, tape: fn(x, tape)), [_away_from_zero(x) if kink else x]
    return cases


def _prelu_cases(rng):
    for shape in _SHAPES:
        a = Param(rng.uniform(0.0, 0.5, shape[1]))
        yield shape, (lambda x, a, tape: prelu(x, a, tape)), [_away_from_zero(rng.standard_normal(shape)), a]


def _mse_cases(rng):
    for shape in _SHAPES:
        t = rng.standard_normal(shape)
        yield shape, (lambda x, tape, t=t: mse_loss(x, t, tape)), [rng.standard_normal(shape)]


def _ce_cases(rng, block):
    for classes, hw in [(2, 3), (3, 2), (5, 1)]:
        x = rng.standard_normal((2, classes * block * block, hw, hw))
        labels = rng.integers(0, classes, size=(2, block * block, hw, hw))
        yield x.shape, (lambda x, tape, lab=labels: pixel_softmax_ce(x, lab, block, tape)), [x]


def _rearrange_cases(rng, inverse):
    for s2, ct, hw, kind in [(2, 3, 2, "cs+ps"), (3, 2, 1, "ps-only"), (2, 2, 3, "randperm+ps")]:
        spec = RearrangeSpec(s2, ct, kind, seed=1)
        if inverse:
            x = rng.standard_normal((1, ct, hw * s2, hw * s2))
            yield x.shape, (lambda x, tape, spec=spec: rearrange_inv(x, spec, tape)), [x]
        else:
            x = rng.standard_normal((2, ct * s2 * s2, hw, hw))
            yield x.shape, (lambda x, tape, spec=spec: rearrange(x, spec, tape)), [x]


def _predictor_cases(rng, folded):
    for ct, classes, s2 in [(3, 2, 2), (4, 1, 1), (2, 3, 3)]:
        pred = Predictor(PredictorSpec(ct, classes), rng)
        pred.bias.value[:] = rng.standard_normal(classes)
        rs = RearrangeSpec(s2, ct)
        if folded:
            x = rng.standard_normal((2, ct * s2 * s2, 2, 2))
            yield x.shape, (lambda x, w, b, tape, p=pred, rs=rs: predict_folded(x, p, rs, tape)), [x, pred.weight, pred.bias]
        else:
            x = rng.standard_normal((2, ct, 3, 2))
            yield x.shape, (lambda x, w, b, tape, p=pred: predict_affine(x, p, tape)), [x, pred.weight, pred.bias]


def _dwsg_cases(rng):
    for spec, hw in [(DwsgConvSpec(4, k=3, g1=2, g2=2, g3=2), 3),
                     (DwsgConvSpec(4, k=3, s=2, g1=2, g2=2, g3=4, expand=2), 4),
                     (DwsgConvSpec(6, k=5, g1=3, g2=2, g3=3, prelu=False), 3)]:
        layer = DwsgConv(spec, rng)
        if layer.slope is not None:
            layer.slope.value[:] = rng.uniform(0.1, 0.5, spec.c_in)
        params = layer.params()
        if hw == 4:
            for bn in layer.batchnorms():
                bn.running_var[:] = rng.uniform(0.5, 2.0, bn.c)
                bn.training = False
        else:
            # in train mode dw.bn beta feeds a linear map and another batch-norm, so its
            # true gradient is exactly zero and finite differences only see rounding
            params.remove(layer.bn_dw.beta)
        x = rng.standard_normal((2, spec.c_in, hw, hw))
        yield x.shape, (lambda x, *ps, tape, layer=layer: layer.forward(x, tape)), [x, *params]


GRADCHECK_OPS = {
    "conv2d": lambda rng: _conv_cases(rng),
    "depthwise_conv2d": lambda rng: _conv_cases(rng, depthwise=True),
    "batch_norm_train": lambda rng: _bn_cases(rng, True),
    "batch_norm_eval": lambda rng: _bn_cases(rng, False),
    "prelu": _prelu_cases,
    "relu": _unary(relu, kink=True),
    "bilinear_upsample": _unary(lambda x, tape: bilinear_upsample(x, 4, tape)),
    "mse_loss": _mse_cases,
    "softmax_ce": lambda rng: _ce_cases(rng, 1),
    "softmax_ce_block": lambda rng: _ce_cases(rng, 2),
    "pixel_shuffle": _unary(lambda x, tape: pixel_shuffle(x, 2, tape), [(1, 4, 2, 2), (2, 8, 1, 3), (1, 16, 2, 1)]),
    "pixel_unshuffle": _unary(lambda x, tape: pixel_unshuffle(x, 2, tape), [(1, 1, 4, 4), (2, 2, 2, 6), (1, 3, 4, 2)]),
    "channel_shuffle": _unary(lambda x, tape: channel_shuffle(x, 2, tape), [(1, 4, 2, 2), (2, 6, 1, 3), (1, 8, 3, 1)]),
    "rearrange": lambda rng: _rearrange_cases(rng, False),
    "rearrange_inv": lambda rng: _rearrange_cases(rng, True),
    "predict_affine": lambda rng: _predictor_cases(rng, False),
    "predict_folded": lambda rng: _predictor_cases(rng, True),
    "dwsg_conv": _dwsg_cases,
}


@dataclass
class CheckRow:
    name: str
    status: str  # pass | fail | error | info
    detail: str = ""
    value: float | None = None

    def to_json(self):
        return {"name": self.name, "status": self.status, "detail": self.detail, "value": self.value}


def run_gradcheck(names=None, *, seed=0, eps=1e-5, tol=1e-4) -> list[CheckRow]:
    """One row per (op, shape) with the maximum relative error."""
    names = list(GRADCHECK_OPS) if names is None else list(names)
    unknown = [n for n in names if n not in GRADCHECK_OPS]
    if unknown:
        raise KeyError(f"unknown op(s) {unknown}; choose from {sorted(GRADCHECK_OPS)}")
    rows = []
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, i])
        for shape, op, inputs in GRADCHECK_OPS[name](rng):
            rep = grad_check(op, inputs, eps=eps, tol=tol, seed=seed)
            rows.append(CheckRow(f"{name}{tuple(shape)}", "pass" if rep.passed else "fail",
                                 f"max rel err {rep.max_rel_error:.3e}", rep.max_rel_error))
    return rows


def equivalence_check(spec: FlatteningModuleSpec, *, seed=0, kind="mse", n=2, s1=4):
    """Largest |loss_A - loss_B| and parameter-gradient gap on seeded inputs (f64)."""
    rng = np.random.default_rng(seed)
    model = FlatteNet(spec, seed=seed)
    model.predictor.bias.value[:] = rng.standard_normal(spec.classes)
    h, w = spec.feature_hw
    x = rng.standard_normal((n, spec.c_in, h, w))
    oh, ow = spec.output_hw(h, w)
    if kind == "mse":
        labels = rng.standard_normal((n, spec.classes, oh * s1, ow * s1))
    else:
        labels = rng.integers(0, spec.classes, size=(n, oh * s1, ow * s1))
    la, lb, ga, gb = end_to_end_loss(x, labels, model, s1=s1, kind=kind, grads=True)
    gap = max(float(np.abs(ga[k] - gb[k]).max()) for k in ga)
    return abs(la - lb), gap


def bijection_rows(seed=0) -> list[CheckRow]:
    rng = np.random.default_rng(seed)
    rows = []
    count = 0
    ok = True
    for r in (1, 2, 4):
        for c in range(r * r, 33, r * r):
            for h, w in itertools.product((1, 2, 3), repeat=2):
                x = rng.standard_normal((1, c, h, w))
                ok &= pixel_unshuffle(pixel_shuffle(x, r), r).tobytes() == x.tobytes()
                g = [d for d in range(1, c + 1) if c % d == 0]
                for gi in g:
                    ok &= channel_shuffle(channel_shuffle(x, gi), c // gi).tobytes() == x.tobytes()
                count += 1
    rows.append(CheckRow("shuffle round-trips", "pass" if ok else "fail", f"{count} shapes, c<=32, r in 1,2,4"))
    x = rng.standard_normal((1, 32 * 64, 8, 8))
    spec = RearrangeSpec(8, 32)
    same = rearrange_inv(rearrange(x, spec), spec).tobytes() == x.tobytes()
    rows.append(CheckRow("R^-1 o R bytewise (1,2048,8,8) s2=8", "pass" if same else "fail"))
    return rows


def density_rows(label, spec: FlatteningModuleSpec) -> list[CheckRow]:
    rows = []
    for i, layer in enumerate(spec.layers):
        dense = connectivity_check(layer.g1, layer.g2, layer.g3, layer.c_in)
        name = f"density {label} layer {i} (g1={layer.g1}, g2={layer.g2}, g3={layer.g3}, c={layer.c_in})"
        if spec.claims_dense is False or (spec.claims_dense is None and dense):
            rows.append(CheckRow(name, "info", "dense" if dense else "not dense"))
        else:
            rows.append(CheckRow(name, "pass" if dense else "fail", "dense" if dense else "NOT DENSE"))
    return rows


def load_specs(paths=None):
    """``[(label, spec or ConfigError)]`` for the shipped configs and any extra paths."""
    out = []
    for name in shipped_configs() if paths is None else paths:
        try:
            out.append((str(name), load_config(name)))
        except (ValueError, OSError) as exc:
            out.append((str(name), ConfigError(str(exc))))
    return out


def selftest(paths=None, *, seed=0, tol_loss=1e-12, tol_grad=1e-10) -> list[CheckRow]:
    rows = bijection_rows(seed)
    for label, spec in load_specs(paths):
        if isinstance(spec, Exception):
            rows.append(CheckRow(f"config {label}", "error", str(spec)))
            continue
        rows.extend(density_rows(label, spec))
        kinds = ("mse", "ce") if spec.classes > 1 else ("mse",)
        for kind in kinds:
            dl, dg = equivalence_check(spec, seed=seed, kind=kind)
            good = dl <= tol_loss and dg <= tol_grad
            rows.append(CheckRow(f"equivalence {label} ({kind})", "pass" if good else "fail",
                                 f"|dloss|={dl:.2e} |dgrad|={dg:.2e}", max(dl, dg)))
    return rows


def exit_code(rows) -> int:
    if any(r.status == "error" for r in rows):
        return 2
    return 1 if any(r.status == "fail" for r in rows) else 0
