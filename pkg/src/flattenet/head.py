"""The DWSGConv layer, the flattening head, the pixelwise predictor and target folding."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .layers import BatchNorm, ConvSpec, ShapeError, batch_norm, conv2d, he_uniform, prelu, relu
from .shuffle import (
    REARRANGE_KINDS,
    RearrangeSpec,
    channel_shuffle,
    connectivity_check,
    rearrange,
    rearrange_inv,
    to_grid_stacked,
)
from .tensor import Param, maybe_record

PREDICTOR_MODES = ("affine", "fc")


class ConfigError(ValueError):
    """An invalid or inconsistent head configuration."""


@dataclass(frozen=True)
class DwsgConvSpec:
    c_in: int
    k: int = 3
    s: int = 1
    g1: int = 32
    g2: int = 32
    g3: int = 64
    expand: int = 1
    prelu: bool = True

    def __post_init__(self):
        if min(self.c_in, self.k, self.s, self.g1, self.g2, self.g3, self.expand) < 1:
            raise ConfigError(f"non-positive hyperparameter in {self}")
        for name in ("g1", "g2", "g3"):
            if self.c_in % getattr(self, name):
                raise ConfigError(f"{name}={getattr(self, name)} does not divide c_in={self.c_in}")
        if self.c_out % self.g3:
            raise ConfigError(f"g3={self.g3} does not divide c_out={self.c_out}")

    @property
    def c_out(self) -> int:
        return self.expand * self.c_in

    @property
    def dense(self) -> bool:
        return connectivity_check(self.g1, self.g2, self.g3, self.c_in)

    def conv_specs(self):
        c = self.c_in
        return (
            ConvSpec(c, c, k=self.k, s=self.s, g=c),
            ConvSpec(c, c, k=1, g=self.g1),
            ConvSpec(c, self.c_out, k=1, g=self.g3),
        )


@dataclass(frozen=True)
class PredictorSpec:
    c_tilde: int
    classes: int
    mode: str = "affine"

    def __post_init__(self):
        if self.c_tilde < 1 or self.classes < 1:
            raise ConfigError(f"invalid predictor {self}")
        if self.mode not in PREDICTOR_MODES:
            raise ConfigError(f"predictor mode {self.mode!r} not in {PREDICTOR_MODES}")


@dataclass(frozen=True)
class FlatteningModuleSpec:
    layers: tuple[DwsgConvSpec, ...]
    s2: int
    rearrange: str = "cs+ps"
    classes: int = 1
    mode: str = "affine"
    name: str = ""
    c_in: int = 2048
    feature_hw: tuple[int, int] = (8, 8)
    perm_seed: int = 0
    claims_dense: bool | None = None

    def __post_init__(self):
        if self.rearrange not in REARRANGE_KINDS:
            raise ConfigError(f"rearrange {self.rearrange!r} not in {REARRANGE_KINDS}")
        if self.s2 < 1:
            raise ConfigError(f"s2 must be positive, got {self.s2}")
        c = self.c_in
        for i, layer in enumerate(self.layers):
            if layer.c_in != c:
                raise ConfigError(f"layer {i} expects {layer.c_in} channels but receives {c}")
            c = layer.c_out
        if c % (self.s2 * self.s2):
            raise ConfigError(f"final channels {c} not divisible by s2^2={self.s2 ** 2}")
        PredictorSpec(self.c_tilde, self.classes, self.mode)

    @property
    def c_final(self) -> int:
        return self.layers[-1].c_out if self.layers else self.c_in

    @property
    def c_tilde(self) -> int:
        return self.c_final // (self.s2 * self.s2)

    @property
    def stride(self) -> int:
        return int(np.prod([layer.s for layer in self.layers])) if self.layers else 1

    @property
    def rearrange_spec(self) -> RearrangeSpec:
        return RearrangeSpec(self.s2, self.c_tilde, self.rearrange, self.perm_seed)

    @property
    def predictor(self) -> PredictorSpec:
        return PredictorSpec(self.c_tilde, self.classes, self.mode)

    def feature_out_hw(self, h, w):
        """Spatial size after the DWSGConv stack (before rearrangement)."""
        if h % self.stride or w % self.stride:
            raise ShapeError(f"feature map {h}x{w} not divisible by accumulated stride {self.stride}")
        return h // self.stride, w // self.stride

    def output_hw(self, h, w):
        fh, fw = self.feature_out_hw(h, w)
        return fh * self.s2, fw * self.s2

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "c_in": self.c_in,
            "feature_hw": list(self.feature_hw),
            "layers": [
                {k: v for k, v in asdict(layer).items() if k != "c_in"} for layer in self.layers
            ],
            "s2": self.s2,
            "rearrange": self.rearrange,
            "perm_seed": self.perm_seed,
            "predictor": {"classes": self.classes, "mode": self.mode},
            **({} if self.claims_dense is None else {"claims_dense": self.claims_dense}),
        }


_LAYER_KEYS = {"k", "s", "g1", "g2", "g3", "expand", "prelu"}
_TOP_KEYS = {"name", "description", "source", "c_in", "feature_hw", "layers", "s2",
             "rearrange", "perm_seed", "predictor", "claims_dense"}


def spec_from_json(data: dict, *, name: str = "") -> FlatteningModuleSpec:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("layers", "s2"):
        if key not in data:
            raise ConfigError(f"config missing {key!r}")
    c = int(data.get("c_in", 2048))
    layers = []
    try:
        for i, raw in enumerate(data["layers"]):
            extra = set(raw) - _LAYER_KEYS
            if extra:
                raise ConfigError(f"layer {i}: unknown keys {sorted(extra)}")
            layer = DwsgConvSpec(c_in=c, **{k: raw[k] for k in raw})
            layers.append(layer)
            c = layer.c_out
        pred = data.get("predictor", {})
        return FlatteningModuleSpec(
            layers=tuple(layers),
            s2=int(data["s2"]),
            rearrange=data.get("rearrange", "cs+ps"),
            classes=int(pred.get("classes", 1)),
            mode=pred.get("mode", "affine"),
            name=data.get("name", name),
            c_in=int(data.get("c_in", 2048)),
            feature_hw=tuple(data.get("feature_hw", (8, 8))),
            perm_seed=int(data.get("perm_seed", 0)),
            claims_dense=data.get("claims_dense"),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def shipped_configs() -> list[str]:
    root = resources.files("flattenet") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json") and not p.name.startswith("resnet"))


def read_config_json(name_or_path) -> dict:
    path = Path(name_or_path)
    if not path.exists():
        shipped = resources.files("flattenet") / "configs" / f"{path.stem}.json"
        if path.parent != Path(".") or not shipped.is_file():
            raise ConfigError(f"no such config: {name_or_path}")
        text = shipped.read_text()
    else:
        text = path.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{name_or_path}: invalid JSON ({exc})") from None


def load_config(name_or_path) -> FlatteningModuleSpec:
    """Load a config by shipped name (``table1``) or by path."""
    return spec_from_json(read_config_json(name_or_path), name=Path(str(name_or_path)).stem)


class DwsgConv:
    """Depthwise conv+BN, pointwise group conv+BN+PReLU, channel shuffle, pointwise group conv+BN+ReLU."""

    def __init__(self, spec: DwsgConvSpec, rng, dtype=np.float64, name="dwsg"):
        self.spec = spec
        dw, pw1, pw2 = self.convs = spec.conv_specs()
        self.w_dw = Param(he_uniform(dw.weight_shape, rng, dtype), f"{name}.dw.weight")
        self.bn_dw = BatchNorm(spec.c_in, dtype=dtype, name=f"{name}.dw.bn")
        self.w_pw1 = Param(he_uniform(pw1.weight_shape, rng, dtype), f"{name}.pw1.weight")
        self.bn_pw1 = BatchNorm(spec.c_in, dtype=dtype, name=f"{name}.pw1.bn")
        self.slope = Param(np.ones(spec.c_in, dtype=dtype), f"{name}.prelu") if spec.prelu else None
        self.w_pw2 = Param(he_uniform(pw2.weight_shape, rng, dtype), f"{name}.pw2.weight")
        self.bn_pw2 = BatchNorm(spec.c_out, dtype=dtype, name=f"{name}.pw2.bn")

    def batchnorms(self):
        return [self.bn_dw, self.bn_pw1, self.bn_pw2]

    def params(self):
        ps = [self.w_dw, *self.bn_dw.params(), self.w_pw1, *self.bn_pw1.params()]
        if self.slope is not None:
            ps.append(self.slope)
        return ps + [self.w_pw2, *self.bn_pw2.params()]

    def forward(self, x, tape=None):
        return dwsg_forward(x, self, tape)


def dwsg_forward(x, layer: DwsgConv, tape=None):
    spec = layer.spec
    dw, pw1, pw2 = layer.convs
    y = batch_norm(conv2d(x, layer.w_dw, dw, tape=tape), layer.bn_dw, tape)
    y = batch_norm(conv2d(y, layer.w_pw1, pw1, tape=tape), layer.bn_pw1, tape)
    y = prelu(y, layer.slope, tape) if spec.prelu else relu(y, tape)
    y = channel_shuffle(y, spec.g2, tape)
    y = batch_norm(conv2d(y, layer.w_pw2, pw2, tape=tape), layer.bn_pw2, tape)
    return relu(y, tape)


class FlatteningModule:
    def __init__(self, spec: FlatteningModuleSpec, rng, dtype=np.float64):
        self.spec = spec
        self.layers = [DwsgConv(s, rng, dtype, name=f"head.{i}") for i, s in enumerate(spec.layers)]
        self.rspec = spec.rearrange_spec

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def batchnorms(self):
        return [bn for layer in self.layers for bn in layer.batchnorms()]

    def features(self, x, tape=None):
        """DWSGConv stack output: per-cell descriptors stacked along channels."""
        if x.shape[1] != self.spec.c_in:
            raise ShapeError(f"head expects {self.spec.c_in} channels, got {x.shape[1]}")
        self.spec.feature_out_hw(*x.shape[2:])
        for layer in self.layers:
            x = layer.forward(x, tape)
        return x

    def forward(self, x, tape=None):
        return rearrange(self.features(x, tape), self.rspec, tape)


def flatten_forward(features, head: FlatteningModule, tape=None):
    return head.forward(features, tape)


def _channel_linear(x, W: Param, b: Param | None, blocks: int, tape=None):
    n, ch, h, w = x.shape
    c_out, c_in = W.shape
    if ch != blocks * c_in:
        raise ShapeError(f"predictor expects {blocks}x{c_in} channels, got {ch}")
    xr = x.reshape(n, blocks, c_in, h * w)
    out = W.value @ xr
    if b is not None:
        out = out + b.value[:, None]
    out = out.reshape(n, blocks * c_out, h, w)

    def vjp(d):
        dr = d.reshape(n, blocks, c_out, h * w)
        dx = (W.value.T @ dr).reshape(x.shape)
        dW = np.einsum("nboh,nbch->oc", dr, xr)
        db = dr.sum(axis=(0, 1, 3)) if b is not None else None
        return dx, dW, db

    return maybe_record(tape, out, (x, W, b), vjp)


class Predictor:
    """Per-site affine map from ``c_tilde`` descriptor channels to ``classes`` outputs."""

    def __init__(self, spec: PredictorSpec, rng, dtype=np.float64, init_std=None):
        self.spec = spec
        shape = (spec.classes, spec.c_tilde)
        if init_std is None:
            w = he_uniform(shape, rng, dtype)
        else:
            w = (rng.standard_normal(shape) * init_std).astype(dtype)
        self.weight = Param(w, "predictor.weight")
        self.bias = Param(np.zeros(spec.classes, dtype=dtype), "predictor.bias")

    def params(self):
        return [self.weight, self.bias]


def predict_affine(f_tilde, predictor: Predictor, tape=None):
    return _channel_linear(f_tilde, predictor.weight, predictor.bias, 1, tape)


def predict_folded(features, predictor: Predictor, rspec: RearrangeSpec, tape=None):
    """Apply the predictor to each grid cell's descriptor before rearrangement."""
    z = to_grid_stacked(features, rspec, tape)
    return _channel_linear(z, predictor.weight, predictor.bias, rspec.s2 * rspec.s2, tape)


def downsample_targets(y, s1, kind="continuous"):
    """Average-pool (continuous) or stride-subsample (discrete) by ``s1``."""
    y = np.asarray(y)
    n, c, h, w = y.shape
    if h % s1 or w % s1:
        raise ShapeError(f"target {h}x{w} not divisible by s1={s1}")
    if s1 == 1:
        return y.copy()
    if kind == "continuous":
        return y.reshape(n, c, h // s1, s1, w // s1, s1).mean(axis=(3, 5))
    if kind == "discrete":
        return np.ascontiguousarray(y[:, :, ::s1, ::s1])
    raise ValueError(f"unknown target kind {kind!r}")


def fold_targets(y, s1, s2, kind="continuous"):
    """Downsample by ``s1`` then fold ``s2 x s2`` cells into channels.

    ``y`` is ``(n, C, H, W)``; discrete label maps may also be ``(n, H, W)``.
    Returns ``(n, C*s2*s2, H/(s1*s2), W/(s1*s2))``.
    """
    y = np.asarray(y)
    if y.ndim == 3:
        y = y[:, None]
    h, w = y.shape[2:]
    if h % (s1 * s2) or w % (s1 * s2):
        raise ShapeError(f"target {h}x{w} not divisible by s1*s2={s1 * s2}")
    small = downsample_targets(y, s1, kind)
    return rearrange_inv(small, RearrangeSpec(s2, y.shape[1]))


def unfold_targets(t, s2, channels):
    return rearrange(t, RearrangeSpec(s2, channels))
