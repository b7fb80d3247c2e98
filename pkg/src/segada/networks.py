"""The four network blocks: embedding F, classifier C, generator G, discriminator D.

Default layer table (64x64 RGB input, embedding width 64, 5 classes)::

    F  conv3 3->32 s1, lrelu | conv3 32->32 s2, lrelu        -> 32 x 32 x 32
       conv3 32->64 s1, lrelu | conv3 64->64 s2, lrelu       -> 64 x 16 x 16
       conv3 64->64 s1, lrelu | conv3 64->64 s2, lrelu       -> 64 x 8 x 8
    C  conv3 64->64 lrelu | conv1 64->Nc | bilinear x8       -> Nc x 64 x 64
    G  [nearest x2 | conv3 | relu | dropout .5] x3 with widths 32, 16, 8
       conv3 8->3 | tanh                                     -> 3 x 64 x 64
    D  trunk: conv3 3->32 s2 | conv3 32->64 s2 | conv3 64->64 s2, all lrelu
       patch head: conv1 64->4                               -> 4 x 8 x 8
       aux head: conv3 64->64 lrelu | conv1 64->Nc | bilinear x8 -> Nc x 64 x 64

The feature-space ablation replaces G and D by a domain classifier on the
embedding: conv3 64->64 lrelu | conv1 64->2 | global average pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .optim import AdamState
from .seeding import stream
from .tensor import Tensor

GROUPS = ("F", "C", "G", "D")


class DomainClass:
    SRC_REAL = 0
    SRC_FAKE = 1
    TGT_REAL = 2
    TGT_FAKE = 3

    names = ("src-real", "src-fake", "tgt-real", "tgt-fake")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv", "upsample" or "pool"
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    act: Optional[str] = None  # "lrelu", "relu", "tanh"
    dropout: float = 0.0
    factor: int = 1
    mode: str = "nearest"

    @property
    def n_params(self) -> int:
        if self.kind != "conv":
            return 0
        return self.out_ch * self.in_ch * self.kernel ** 2 + self.out_ch


def conv(in_ch, out_ch, kernel=3, stride=1, act=None, dropout=0.0) -> LayerSpec:
    return LayerSpec("conv", in_ch, out_ch, kernel, stride, kernel // 2, act, dropout)


def up(factor, mode) -> LayerSpec:
    return LayerSpec("upsample", factor=factor, mode=mode)


@dataclass(frozen=True)
class NetworkDef:
    group: str
    prefix: str
    layers: tuple

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"unknown parameter group {self.group!r}")
        ch = None
        for i, layer in enumerate(self.layers):
            if layer.kind != "conv":
                continue
            if ch is not None and layer.in_ch != ch:
                raise ValueError(
                    f"{self.prefix} layer {i}: expects {layer.in_ch} input channels, previous layer gives {ch}")
            ch = layer.out_ch

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)


@dataclass(frozen=True)
class BundleConfig:
    image_size: tuple = (64, 64)
    in_channels: int = 3
    num_classes: int = 5
    f_widths: tuple = (32, 64, 64)
    c_width: int = 64
    g_widths: tuple = (32, 16, 8)
    d_widths: tuple = (32, 64, 64)
    aux_width: int = 64
    g_dropout: float = 0.5
    slope: float = 0.2
    # "adversarial" builds F, C, G, D; "classifier" only F, C;
    # "feature_d" F, C and a domain classifier on the embedding (group D).
    kind: str = "adversarial"

    @property
    def embed_channels(self) -> int:
        return self.f_widths[-1]


def network_defs(cfg: BundleConfig) -> dict:
    defs = {}
    f_layers, ch = [], cfg.in_channels
    for w in cfg.f_widths:
        f_layers += [conv(ch, w, act="lrelu"), conv(w, w, stride=2, act="lrelu")]
        ch = w
    defs["F"] = NetworkDef("F", "F", tuple(f_layers))
    e = cfg.embed_channels
    defs["C"] = NetworkDef("C", "C", (
        conv(e, cfg.c_width, act="lrelu"), conv(cfg.c_width, cfg.num_classes, kernel=1), up(8, "bilinear")))
    if cfg.kind == "adversarial":
        g_layers, ch = [], e
        for w in cfg.g_widths:
            g_layers += [up(2, "nearest"), conv(ch, w, act="relu", dropout=cfg.g_dropout)]
            ch = w
        g_layers.append(conv(ch, cfg.in_channels, act="tanh"))
        defs["G"] = NetworkDef("G", "G", tuple(g_layers))
        d_layers, ch = [], cfg.in_channels
        for w in cfg.d_widths:
            d_layers.append(conv(ch, w, stride=2, act="lrelu"))
            ch = w
        defs["D.trunk"] = NetworkDef("D", "D.trunk", tuple(d_layers))
        defs["D.patch"] = NetworkDef("D", "D.patch", (conv(ch, 4, kernel=1),))
        defs["D.aux"] = NetworkDef("D", "D.aux", (
            conv(ch, cfg.aux_width, act="lrelu"), conv(cfg.aux_width, cfg.num_classes, kernel=1),
            up(8, "bilinear")))
    elif cfg.kind == "feature_d":
        defs["D.feat"] = NetworkDef("D", "D.feat", (
            conv(e, 64, act="lrelu"), conv(64, 2, kernel=1), LayerSpec("pool")))
    elif cfg.kind != "classifier":
        raise ValueError(f"unknown bundle kind {cfg.kind!r}")
    return defs


class Network:
    """Sequential stack of layers whose parameters all carry one group tag."""

    def __init__(self, defn: NetworkDef, params: dict, slope: float):
        self.defn = defn
        self.params = params
        self.slope = slope

    def forward(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        for i, layer in enumerate(self.defn.layers):
            if layer.kind == "conv":
                w = self.params[f"{self.defn.prefix}.{i}.weight"]
                b = self.params[f"{self.defn.prefix}.{i}.bias"]
                x = T.conv2d(x, w, b, layer.stride, layer.pad)
                if layer.act == "lrelu":
                    x = T.leaky_relu(x, self.slope)
                elif layer.act == "relu":
                    x = T.relu(x)
                elif layer.act == "tanh":
                    x = T.tanh(x)
                if layer.dropout:
                    x = T.dropout(x, layer.dropout, training, rng)
            elif layer.kind == "upsample":
                x = T.upsample(x, layer.factor, layer.mode)
            elif layer.kind == "pool":
                x = T.global_avg_pool(x)
        return x


def init_params(defn: NetworkDef, rng: np.random.Generator, dtype) -> dict:
    """He (fan-in) normal weights, zero biases."""
    params = {}
    for i, layer in enumerate(defn.layers):
        if layer.kind != "conv":
            continue
        fan_in = layer.in_ch * layer.kernel ** 2
        w = rng.standard_normal((layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)) * np.sqrt(2.0 / fan_in)
        params[f"{defn.prefix}.{i}.weight"] = Tensor(w.astype(dtype), name=f"{defn.prefix}.{i}.weight")
        params[f"{defn.prefix}.{i}.bias"] = Tensor(np.zeros(layer.out_ch, dtype=dtype), name=f"{defn.prefix}.{i}.bias")
    return params


@dataclass
class NetworkBundle:
    config: BundleConfig
    nets: dict
    adam: dict = field(default_factory=dict)

    @property
    def groups(self) -> tuple:
        return tuple(g for g in GROUPS if any(n.defn.group == g for n in self.nets.values()))

    def params(self, *groups: str) -> dict:
        groups = groups or self.groups
        out = {}
        for net in self.nets.values():
            if net.defn.group in groups:
                out.update(net.params)
        return out

    def set_trainable(self, *groups: str) -> None:
        """Mark exactly ``groups`` as trainable and clear every gradient."""
        for net in self.nets.values():
            on = net.defn.group in groups
            for p in net.params.values():
                p.requires_grad = on
                p.grad = None

    def n_params(self, *groups: str) -> int:
        return sum(p.data.size for p in self.params(*groups).values())


ADAM_BETAS = {"F": (0.9, 0.999), "C": (0.9, 0.999), "G": (0.5, 0.999), "D": (0.5, 0.999)}


def build_bundle(cfg: BundleConfig, seed: int, dtype=np.float32) -> NetworkBundle:
    h, w = cfg.image_size
    if h % 8 or w % 8:
        raise ValueError(f"image size {h}x{w} must be divisible by 8")
    defs = network_defs(cfg)
    nets = {}
    for key, defn in defs.items():
        # one stream per sub-network: F/C init does not depend on whether G/D exist
        rng = stream(seed, "init", key)
        nets[key] = Network(defn, init_params(defn, rng, dtype), cfg.slope)
    bundle = NetworkBundle(cfg, nets)
    seen = set()
    for net in nets.values():
        for name, p in net.params.items():
            if id(p) in seen or not name.startswith(net.defn.group):
                raise AssertionError(f"parameter {name} shared across groups")
            seen.add(id(p))
    for g in bundle.groups:
        b1, b2 = ADAM_BETAS[g]
        bundle.adam[g] = AdamState(beta1=b1, beta2=b2)
    return bundle


def _check_image(bundle: NetworkBundle, image: Tensor) -> None:
    cfg = bundle.config
    if image.shape[0] != cfg.in_channels or image.data.ndim != 3:
        raise ValueError(f"expected a {cfg.in_channels} x H x W image, got {image.shape}")
    if image.shape[1] % 8 or image.shape[2] % 8:
        raise ValueError(f"image spatial size {image.shape[1:]} not divisible by 8")


def forward_F(bundle: NetworkBundle, image: Tensor) -> Tensor:
    _check_image(bundle, image)
    return bundle.nets["F"].forward(image)


def forward_C(bundle: NetworkBundle, embedding: Tensor) -> Tensor:
    if embedding.shape[0] != bundle.config.embed_channels:
        raise ValueError(f"embedding has {embedding.shape[0]} channels, expected {bundle.config.embed_channels}")
    return bundle.nets["C"].forward(embedding)


def forward_G(bundle: NetworkBundle, embedding: Tensor, training: bool = False,
              rng: Optional[np.random.Generator] = None) -> Tensor:
    if embedding.shape[0] != bundle.config.embed_channels:
        raise ValueError(f"embedding has {embedding.shape[0]} channels, expected {bundle.config.embed_channels}")
    return bundle.nets["G"].forward(embedding, training, rng)


def forward_D(bundle: NetworkBundle, image: Tensor, heads=("patch", "aux")):
    """Return ``(patch_logits, aux_logits)``; a head not listed in ``heads`` yields None."""
    _check_image(bundle, image)
    trunk = bundle.nets["D.trunk"].forward(image)
    patch = bundle.nets["D.patch"].forward(trunk) if "patch" in heads else None
    aux = bundle.nets["D.aux"].forward(trunk) if "aux" in heads else None
    return patch, aux


def forward_D_feat(bundle: NetworkBundle, embedding: Tensor) -> Tensor:
    """Domain logits (source, target) of the feature-space discriminator."""
    return bundle.nets["D.feat"].forward(embedding)


def feature_descriptor(bundle: NetworkBundle, image) -> np.ndarray:
    """Globally pooled embedding of one image (eval mode, no recording)."""
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image))
    with T.no_record():
        return T.global_avg_pool(forward_F(bundle, image)).data.copy()
