"""A small strided-convolution feature extractor standing in for ResNet."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..layers import BatchNorm, ConvSpec, batch_norm, conv2d, he_uniform, relu
from ..tensor import Param

DEFAULT_WIDTHS = (64, 128, 256, 256, 512)


@dataclass(frozen=True)
class ToyBackboneSpec:
    """``stages`` stride-2 conv+BN+ReLU stages; output is ``input / 2**stages``."""

    widths: tuple[int, ...] = DEFAULT_WIDTHS
    k: int = 3
    c_in: int = 3
    convs_per_stage: int = 1
    stages: int | None = None
    c_out: int | None = None

    def __post_init__(self):
        stages = len(self.widths) if self.stages is None else self.stages
        if stages < 1:
            raise ValueError("a backbone needs at least one stage")
        widths = list(self.widths[:stages])
        widths += [widths[-1]] * (stages - len(widths))
        if self.c_out is not None:
            widths[-1] = self.c_out
        object.__setattr__(self, "widths", tuple(widths))
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "c_out", widths[-1])

    @property
    def kernels(self):
        return (self.k,) * self.stages

    @property
    def reduction(self) -> int:
        return 2 ** self.stages

    def output_hw(self, h, w):
        if h % self.reduction or w % self.reduction:
            raise ValueError(f"input {h}x{w} not divisible by {self.reduction}")
        return h // self.reduction, w // self.reduction


class ToyBackbone:
    def __init__(self, spec: ToyBackboneSpec, rng, dtype=np.float64):
        self.spec = spec
        self.blocks = []
        c = spec.c_in
        for i, width in enumerate(spec.widths):
            for j in range(spec.convs_per_stage):
                cs = ConvSpec(c, width, k=spec.k, s=2 if j == 0 else 1)
                w = Param(he_uniform(cs.weight_shape, rng, dtype), f"backbone.{i}.{j}.weight")
                self.blocks.append((cs, w, BatchNorm(width, dtype=dtype, name=f"backbone.{i}.{j}.bn")))
                c = width

    def params(self):
        return [p for _, w, bn in self.blocks for p in (w, *bn.params())]

    def batchnorms(self):
        return [bn for _, _, bn in self.blocks]

    def forward(self, x, tape=None):
        for cs, w, bn in self.blocks:
            x = relu(batch_norm(conv2d(x, w, cs, tape=tape), bn, tape), tape)
        return x
