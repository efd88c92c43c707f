"""Hybrid assembly: frozen backbone tap -> 1x1 bridge -> upsample -> ViT.

The bridge reduces the tap feature map to 3 channels and rescales it to
the ViT input size, so the transformer consumes CNN features as if they
were an image.  Trainable set: bridge + adapters + head.
"""

from __future__ import annotations

import numpy as np

from .backbone import Backbone
from .configs import BridgeConfig, ModelConfig
from .layers import registry_of
from .lora import attach_to_vit
from .tensor import ParamRegistry, ShapeError, Tensor, conv2d, upsample
from .vit import ViTModel, load_pseudo_pretrained

__all__ = ["Bridge", "HybridModel", "build_model"]


class Bridge:
    """1x1 conv to 3 channels, then upsample to the ViT input size."""

    def __init__(self, cfg: BridgeConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        fan_in = cfg.in_channels
        self.w = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(cfg.out_channels, cfg.in_channels, 1, 1)),
            requires_grad=True,
        )
        self.b = Tensor.zeros(cfg.out_channels, requires_grad=True)

    def forward(self, feat: Tensor, audit: list | None = None) -> Tensor:
        single = feat.ndim == 3
        if single:
            feat = feat.reshape((1,) + feat.shape)
        if feat.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"bridge: expected {self.cfg.in_channels} channels, got {feat.shape[1]}"
            )
        y = conv2d(feat, self.w, self.b)
        y = upsample(y, (self.cfg.target_size, self.cfg.target_size), self.cfg.mode)
        if audit is not None:
            audit.append(("bridge", y.shape[1:]))
        return y[0] if single else y

    def params(self, prefix: str = "bridge"):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class HybridModel:
    def __init__(self, backbone: Backbone, bridge: Bridge, vit: ViTModel):
        if bridge.cfg.in_channels != backbone.cfg.tap_channels:
            raise ShapeError(
                f"bridge expects {bridge.cfg.in_channels} channels but the tap "
                f"emits {backbone.cfg.tap_channels}"
            )
        if bridge.cfg.target_size != vit.cfg.image_size:
            raise ShapeError(
                f"bridge target {bridge.cfg.target_size} != vit input {vit.cfg.image_size}"
            )
        self.backbone = backbone
        self.bridge = bridge
        self.vit = vit

    def bridged(self, img, train: bool = False, audit: list | None = None) -> Tensor:
        feat = self.backbone.forward(img, train, audit)
        return self.bridge.forward(feat, audit)

    def forward(self, img, train: bool = False, audit: list | None = None) -> Tensor:
        x = img if isinstance(img, Tensor) else Tensor(img)
        single = x.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        logits = self.vit.forward(self.bridged(x, train, audit), train, audit)
        return logits[0] if single else logits

    def registry(self) -> ParamRegistry:
        return registry_of(
            self.backbone.params(),
            self.bridge.params(),
            ((f"vit.{n}", t) for n, t in self.vit.registry().items()),
        )

    def buffers(self):
        yield from self.backbone.buffers()


def build_model(cfg: ModelConfig, seed: int = 0, pretrained_seed: int | None = None):
    """Construct any of the three model kinds from a ModelConfig.

    `seed` drives the trainable parts (head, bridge, adapters);
    `pretrained_seed` (default seed + 1000) drives the frozen
    pseudo-pretrained weights.
    """
    if pretrained_seed is None:
        pretrained_seed = seed + 1000
    if cfg.kind == "effnet":
        from .backbone import EffNetClassifier

        return EffNetClassifier(cfg.backbone, seed=pretrained_seed)

    vit = ViTModel(cfg.vit, seed=seed)
    load_pseudo_pretrained(vit, pretrained_seed)
    if cfg.vit.lora is not None and cfg.vit.lora.rank > 0:
        attach_to_vit(vit, cfg.vit.lora, seed + 1)
    if cfg.kind == "vitlora":
        return vit
    backbone = Backbone(cfg.backbone, seed=pretrained_seed + 1)
    bridge = Bridge(cfg.bridge, seed=seed + 2)
    return HybridModel(backbone, bridge, vit)
