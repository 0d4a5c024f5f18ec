"""Analytic parameter and multiply-add counting over symbolic architectures.

Counting convention (``conv+bn-affine+prelu``):

* conv: ``c_out * (c_in/g) * k * k`` weights, plus ``c_out`` when it has a bias;
  MACs are the weight count times the output area.
* batch norm: ``2 * c`` (scale and shift); running statistics are buffers.
* channel-wise PReLU: ``c`` slopes.
* shuffles, pooling, ReLU and residual additions: no parameters.
* only convolutions (and the affine predictor) contribute MACs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources

from .head import FlatteningModuleSpec, load_config
from .layers import ShapeError

CONVENTION = "conv+bn-affine+prelu; macs=conv-only"


@dataclass
class LayerCount:
    name: str
    kind: str
    section: str
    in_shape: tuple
    out_shape: tuple
    params: int
    macs: int


@dataclass
class ComplexityReport:
    layers: list[LayerCount] = field(default_factory=list)
    convention: str = CONVENTION

    @property
    def params(self) -> int:
        return sum(r.params for r in self.layers)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.layers)

    def section(self, name) -> tuple[int, int]:
        rows = [r for r in self.layers if r.section == name]
        return sum(r.params for r in rows), sum(r.macs for r in rows)

    def sections(self) -> dict[str, dict[str, int]]:
        out = {}
        for r in self.layers:
            s = out.setdefault(r.section, {"params": 0, "macs": 0})
            s["params"] += r.params
            s["macs"] += r.macs
        return out

    def to_json(self) -> dict:
        return {
            "convention": self.convention,
            "total": {"params": self.params, "macs": self.macs},
            "sections": self.sections(),
            "layers": [asdict(r) for r in self.layers],
        }

    def format_text(self) -> str:
        lines = [f"{'layer':<34}{'kind':<12}{'output':<20}{'params':>12}{'MACs':>16}"]
        for r in self.layers:
            shape = "x".join(str(d) for d in r.out_shape)
            lines.append(f"{r.name:<34}{r.kind:<12}{shape:<20}{r.params:>12,}{r.macs:>16,}")
        lines.append("-" * 94)
        for name, s in self.sections().items():
            lines.append(f"{'[' + name + ']':<66}{s['params']:>12,}{s['macs']:>16,}")
        lines.append(f"{'total':<66}{self.params:>12,}{self.macs:>16,}")
        lines.append(f"params {self.params / 1e6:.2f}M  GMACs {self.macs / 1e9:.3f}  ({self.convention})")
        return "\n".join(lines)


# symbolic layers -------------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    name: str
    c_out: int
    k: int = 1
    s: int = 1
    g: int = 1
    bias: bool = False
    padding: int | None = None

    def apply(self, c, h, w, section):
        p = self.k // 2 if self.padding is None else self.padding
        if c % self.g or self.c_out % self.g:
            raise ShapeError(f"{self.name}: groups {self.g} do not divide {c}->{self.c_out}")
        ho, wo = (h + 2 * p - self.k) // self.s + 1, (w + 2 * p - self.k) // self.s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: empty output for {h}x{w} input")
        weights = self.c_out * (c // self.g) * self.k * self.k
        params = weights + (self.c_out if self.bias else 0)
        row = LayerCount(self.name, "conv", section, (c, h, w), (self.c_out, ho, wo), params, weights * ho * wo)
        return [row], (self.c_out, ho, wo)


@dataclass(frozen=True)
class BN:
    name: str

    def apply(self, c, h, w, section):
        return [LayerCount(self.name, "bn", section, (c, h, w), (c, h, w), 2 * c, 0)], (c, h, w)


@dataclass(frozen=True)
class Act:
    name: str
    kind: str = "relu"

    def apply(self, c, h, w, section):
        params = c if self.kind == "prelu" else 0
        return [LayerCount(self.name, self.kind, section, (c, h, w), (c, h, w), params, 0)], (c, h, w)


@dataclass(frozen=True)
class ChannelShuffle:
    name: str
    g: int

    def apply(self, c, h, w, section):
        if c % self.g:
            raise ShapeError(f"{self.name}: {c} channels not divisible by {self.g}")
        return [LayerCount(self.name, "shuffle", section, (c, h, w), (c, h, w), 0, 0)], (c, h, w)


@dataclass(frozen=True)
class PixelShuffle:
    name: str
    r: int

    def apply(self, c, h, w, section):
        if c % (self.r * self.r):
            raise ShapeError(f"{self.name}: {c} channels not divisible by {self.r}^2")
        out = (c // (self.r * self.r), h * self.r, w * self.r)
        return [LayerCount(self.name, "pixshuffle", section, (c, h, w), out, 0, 0)], out


@dataclass(frozen=True)
class Pool:
    name: str
    k: int
    s: int
    padding: int = 0

    def apply(self, c, h, w, section):
        ho = (h + 2 * self.padding - self.k) // self.s + 1
        wo = (w + 2 * self.padding - self.k) // self.s + 1
        return [LayerCount(self.name, "pool", section, (c, h, w), (c, ho, wo), 0, 0)], (c, ho, wo)


@dataclass(frozen=True)
class Bottleneck:
    """ResNet bottleneck (stride on the 3x3 conv) with projection shortcut when needed."""

    name: str
    width: int
    s: int = 1
    expansion: int = 4

    def apply(self, c, h, w, section):
        c_out = self.width * self.expansion
        body = [
            Conv(f"{self.name}.conv1", self.width), BN(f"{self.name}.bn1"), Act(f"{self.name}.relu1"),
            Conv(f"{self.name}.conv2", self.width, k=3, s=self.s), BN(f"{self.name}.bn2"), Act(f"{self.name}.relu2"),
            Conv(f"{self.name}.conv3", c_out), BN(f"{self.name}.bn3"),
        ]
        rows, shape = _run(body, (c, h, w), section)
        if self.s != 1 or c != c_out:
            short, sshape = _run([Conv(f"{self.name}.downsample", c_out, s=self.s), BN(f"{self.name}.downsample.bn")],
                                 (c, h, w), section)
            if sshape != shape:
                raise ShapeError(f"{self.name}: shortcut {sshape} != body {shape}")
            rows += short
        rows.append(LayerCount(f"{self.name}.add_relu", "add", section, shape, shape, 0, 0))
        return rows, shape


def _run(layers, shape, section):
    rows = []
    for layer in layers:
        r, shape = layer.apply(*shape, section)
        rows.extend(r)
    return rows, shape


@dataclass
class ArchDescriptor:
    """Ordered symbolic layers grouped in named sections, with input geometry (c, h, w)."""

    input_shape: tuple[int, int, int]
    sections: list[tuple[str, list]] = field(default_factory=list)
    name: str = ""

    def add(self, section, layers):
        self.sections.append((section, list(layers)))
        return self


def analyze(desc: ArchDescriptor) -> ComplexityReport:
    shape = tuple(desc.input_shape)
    rows = []
    for section, layers in desc.sections:
        r, shape = _run(layers, shape, section)
        rows.extend(r)
    return ComplexityReport(rows)


def count_params(desc: ArchDescriptor) -> ComplexityReport:
    return analyze(desc)


def count_macs(desc: ArchDescriptor) -> ComplexityReport:
    return analyze(desc)


# descriptor builders ----------------------------------------------------------

def head_layers(spec: FlatteningModuleSpec, *, include_rearrange=True):
    layers = []
    for i, l in enumerate(spec.layers):
        p = f"head.{i}"
        layers += [
            Conv(f"{p}.dw", l.c_in, k=l.k, s=l.s, g=l.c_in), BN(f"{p}.dw.bn"),
            Conv(f"{p}.pw1", l.c_in, g=l.g1), BN(f"{p}.pw1.bn"), Act(f"{p}.act", "prelu" if l.prelu else "relu"),
            ChannelShuffle(f"{p}.cs", l.g2),
            Conv(f"{p}.pw2", l.c_out, g=l.g3), BN(f"{p}.pw2.bn"), Act(f"{p}.relu"),
        ]
    if include_rearrange:
        layers += [ChannelShuffle("rearrange.cs", spec.s2 * spec.s2), PixelShuffle("rearrange.ps", spec.s2)]
    return layers


def predictor_layers(spec: FlatteningModuleSpec):
    return [Conv("predictor", spec.classes, k=1, bias=True)]


def head_descriptor(spec: FlatteningModuleSpec, feature_hw=None, *, predictor=True) -> ArchDescriptor:
    h, w = feature_hw or spec.feature_hw
    desc = ArchDescriptor((spec.c_in, h, w), name=spec.name).add("head", head_layers(spec))
    if predictor:
        desc.add("predictor", predictor_layers(spec))
    return desc


def baseline_conv_descriptor(c_in, c_out, k, hw=(8, 8), *, bn=True) -> ArchDescriptor:
    """A single regular conv (+BN+ReLU) replacing the DWSGConv layer."""
    layers = [Conv("conv", c_out, k=k)]
    if bn:
        layers += [BN("conv.bn"), Act("conv.relu")]
    return ArchDescriptor((c_in, *hw), name=f"conv{k}x{k}").add("head", layers)


def _arch_data(name):
    path = resources.files("flattenet") / "configs" / f"{name}.json"
    if not path.is_file():
        raise ValueError(f"unknown backbone {name!r}")
    return json.loads(path.read_text())


def resnet_layers(name="resnet50"):
    data = _arch_data(name)
    stem = data["stem"]
    layers = [Conv("stem.conv", stem["c_out"], k=stem["k"], s=stem["s"]), BN("stem.bn"), Act("stem.relu")]
    mp = data["maxpool"]
    layers.append(Pool("stem.maxpool", mp["k"], mp["s"], mp.get("padding", mp["k"] // 2)))
    for si, (blocks, width, stride) in enumerate(data["stages"], start=1):
        for b in range(blocks):
            layers.append(Bottleneck(f"layer{si}.{b}", width, stride if b == 0 else 1, data["expansion"]))
    return layers


def toy_backbone_layers(spec):
    layers = []
    for i, (c_out, k) in enumerate(zip(spec.widths, spec.kernels)):
        layers += [Conv(f"stage{i}.conv", c_out, k=k, s=2), BN(f"stage{i}.bn"), Act(f"stage{i}.relu")]
        for j in range(1, spec.convs_per_stage):
            layers += [Conv(f"stage{i}.conv{j}", c_out, k=k), BN(f"stage{i}.bn{j}"), Act(f"stage{i}.relu{j}")]
    return layers


def describe(config, backbone=None, input_hw=None, *, predictor=True, toy_spec=None) -> ComplexityReport:
    """Complexity of a head config, optionally mounted on a backbone.

    Without a backbone ``input_hw`` is the feature-map size fed to the head
    (default: the config's ``feature_hw``); with one it is the image size
    (default 256x256).
    """
    spec = config if isinstance(config, FlatteningModuleSpec) else load_config(config)
    if backbone is None:
        return analyze(head_descriptor(spec, input_hw, predictor=predictor))
    h, w = input_hw or (256, 256)
    if backbone == "toy":
        from .lab.backbone import ToyBackboneSpec

        toy_spec = toy_spec or ToyBackboneSpec(c_out=spec.c_in)
        bb = toy_backbone_layers(toy_spec)
    else:
        bb = resnet_layers(backbone)
    desc = ArchDescriptor((3, h, w), name=f"{backbone}+{spec.name}").add("backbone", bb)
    desc.add("head", head_layers(spec))
    if predictor:
        desc.add("predictor", predictor_layers(spec))
    return analyze(desc)
