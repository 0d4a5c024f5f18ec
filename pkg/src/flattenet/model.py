"""Backbone + flattening head + predictor, with the two equivalent loss paths.

Path A rearranges the head output into a high-resolution descriptor map and
applies the affine predictor per pixel, then compares with downsampled
labels.  Path B applies the same predictor to each grid cell's descriptor
while still stacked in channels, and compares with folded labels.
"""

from __future__ import annotations

import numpy as np

from .head import FlatteningModule, FlatteningModuleSpec, Predictor, fold_targets, predict_affine, predict_folded
from .layers import bilinear_upsample, mse_loss, pixel_softmax_ce
from .tensor import Tape


class FlatteNet:
    def __init__(self, head_spec: FlatteningModuleSpec, backbone=None, *, seed=0, dtype=np.float64,
                 predictor_init_std=None):
        rng = np.random.default_rng(seed)
        self.backbone = backbone
        self.head = FlatteningModule(head_spec, rng, dtype)
        self.predictor = Predictor(head_spec.predictor, rng, dtype, init_std=predictor_init_std)
        self.dtype = np.dtype(dtype)

    @classmethod
    def build(cls, head_spec, backbone_spec=None, *, seed=0, dtype=np.float64, predictor_init_std=None):
        from .lab.backbone import ToyBackbone

        backbone = None
        if backbone_spec is not None:
            backbone = ToyBackbone(backbone_spec, np.random.default_rng([seed, 1]), dtype)
        return cls(head_spec, backbone, seed=seed, dtype=dtype, predictor_init_std=predictor_init_std)

    @property
    def spec(self) -> FlatteningModuleSpec:
        return self.head.spec

    def params(self):
        bb = self.backbone.params() if self.backbone is not None else []
        return bb + self.head.params() + self.predictor.params()

    def batchnorms(self):
        bb = self.backbone.batchnorms() if self.backbone is not None else []
        return bb + self.head.batchnorms()

    def named_state(self) -> dict[str, np.ndarray]:
        state = {p.name: p.value for p in self.params()}
        for bn in self.batchnorms():
            prefix = bn.gamma.name.removesuffix(".gamma")
            state[f"{prefix}.running_mean"] = bn.running_mean
            state[f"{prefix}.running_var"] = bn.running_var
        return state

    def train(self, mode=True):
        for bn in self.batchnorms():
            bn.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def features(self, x, tape=None):
        return self.backbone.forward(x, tape) if self.backbone is not None else x

    def forward_a(self, x, tape=None):
        """Low-resolution prediction map ``(n, classes, H~, W~)``."""
        return predict_affine(self.head.forward(self.features(x, tape), tape), self.predictor, tape)

    def forward_b(self, x, tape=None):
        """Folded prediction ``(n, classes * s2^2, H^, W^)``."""
        z = self.head.features(self.features(x, tape), tape)
        return predict_folded(z, self.predictor, self.head.rspec, tape)

    def predict_full(self, x, s1=4, tape=None):
        return bilinear_upsample(self.forward_a(x, tape), s1, tape)


def _loss(kind, pred, target, block_size, tape):
    if kind == "mse":
        return mse_loss(pred, target, tape)
    if kind == "ce":
        return pixel_softmax_ce(pred, target, block_size, tape)
    raise ValueError(f"unknown loss {kind!r}")


def loss_a(model: FlatteNet, x, target_small, kind="mse", tape=None):
    return _loss(kind, model.forward_a(x, tape), target_small, 1, tape)


def loss_b(model: FlatteNet, x, target_folded, kind="mse", tape=None):
    return _loss(kind, model.forward_b(x, tape), target_folded, model.spec.s2, tape)


def end_to_end_loss(x, labels, model: FlatteNet, *, s1=4, kind="mse", target_kind=None, grads=False):
    """Loss through both paths on the same parameters.

    ``labels`` are full-resolution: ``(n, C, H, W)`` for ``mse`` or
    ``(n, H, W)`` integer maps for ``ce``.  BN layers see identical batches in
    both paths, but their running statistics are updated twice.

    Returns ``(loss_a, loss_b)``, or with ``grads=True``
    ``(loss_a, loss_b, grads_a, grads_b)`` where the grads are dicts keyed by
    parameter name.
    """
    from .head import downsample_targets

    labels = np.asarray(labels)
    if target_kind is None:
        target_kind = "continuous" if kind == "mse" else "discrete"
    lab4 = labels[:, None] if labels.ndim == 3 else labels
    small = downsample_targets(lab4, s1, target_kind)
    folded = fold_targets(lab4, s1, model.spec.s2, target_kind)
    if kind == "ce":
        small = small[:, 0]

    results = []
    for fn, target in ((loss_a, small), (loss_b, folded)):
        tape = Tape() if grads else None
        if grads:
            model.zero_grad()
        loss = fn(model, x, target, kind, tape)
        g = None
        if grads:
            tape.backward(loss)
            g = {p.name: p.grad.copy() for p in model.params()}
        results.append((float(loss), g))
    (la, ga), (lb, gb) = results
    if grads:
        return la, lb, ga, gb
    return la, lb
