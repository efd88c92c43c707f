"""EfficientNetV2-style convolutional feature extractor.

Early stages use fused MBConv blocks (single regular 3x3 conv in place
of expand-1x1 + depthwise-3x3); later stages use MBConv with
squeeze-and-excitation.  The forward pass runs up to a configurable tap
point and returns that activation as the feature map.
"""

from __future__ import annotations

import numpy as np

from .configs import BackboneConfig, StageSpec
from .layers import BatchNorm2d, ConfigError, Linear, SEBlock, registry_of
from .tensor import ParamRegistry, Tensor, conv2d, relu, silu

__all__ = ["Backbone", "EffNetClassifier", "FusedMBConv", "MBConv"]


def _conv_init(rng, c_out: int, c_in: int, k: int) -> Tensor:
    fan_in = c_in * k * k
    return Tensor(
        rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(c_out, c_in, k, k)),
        requires_grad=True,
    )


class ConvBN:
    """Conv (no bias) followed by batch norm."""

    def __init__(self, c_in, c_out, k, stride, padding, rng, groups=1):
        group_in = c_in // groups
        self.w = _conv_init(rng, c_out, group_in, k)
        self.bn = BatchNorm2d(c_out)
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def forward(self, x: Tensor, train: bool) -> Tensor:
        y = conv2d(x, self.w, stride=self.stride, padding=self.padding, groups=self.groups)
        return self.bn.forward(y, train)

    def freeze(self):
        self.w.requires_grad = False
        self.bn.freeze()

    def params(self, prefix):
        yield f"{prefix}.w", self.w
        yield from self.bn.params(f"{prefix}.bn")

    def buffers(self, prefix):
        yield from self.bn.buffers(f"{prefix}.bn")


class FusedMBConv:
    """3x3 expand -> BN -> SiLU -> 1x1 project -> BN, with residual when
    stride is 1 and channel/spatial extents are preserved."""

    def __init__(self, c_in: int, spec: StageSpec, stride: int, rng):
        mid = c_in * spec.expansion
        self.expand = ConvBN(c_in, mid, 3, stride, spec.padding, rng)
        self.project = ConvBN(mid, spec.channels, 1, 1, 0, rng)
        self.use_residual = stride == 1 and c_in == spec.channels and spec.padding == 1

    def forward(self, x: Tensor, train: bool) -> Tensor:
        y = self.project.forward(silu(self.expand.forward(x, train)), train)
        return x + y if self.use_residual else y

    def freeze(self):
        self.expand.freeze()
        self.project.freeze()

    def params(self, prefix):
        yield from self.expand.params(f"{prefix}.expand")
        yield from self.project.params(f"{prefix}.project")

    def buffers(self, prefix):
        yield from self.expand.buffers(f"{prefix}.expand")
        yield from self.project.buffers(f"{prefix}.project")


class MBConv:
    """1x1 expand -> BN -> SiLU -> depthwise 3x3 -> BN -> SiLU -> SE ->
    1x1 project -> BN, with residual when applicable."""

    def __init__(self, c_in: int, spec: StageSpec, stride: int, rng):
        mid = c_in * spec.expansion
        self.expand = ConvBN(c_in, mid, 1, 1, 0, rng)
        self.depthwise = ConvBN(mid, mid, 3, stride, spec.padding, rng, groups=mid)
        self.se = SEBlock(mid, spec.se_reduction, rng)
        self.project = ConvBN(mid, spec.channels, 1, 1, 0, rng)
        self.use_residual = stride == 1 and c_in == spec.channels and spec.padding == 1

    def forward(self, x: Tensor, train: bool) -> Tensor:
        y = silu(self.expand.forward(x, train))
        y = silu(self.depthwise.forward(y, train))
        y = self.se.forward(y)
        y = self.project.forward(y, train)
        return x + y if self.use_residual else y

    def freeze(self):
        self.expand.freeze()
        self.depthwise.freeze()
        self.se.freeze()
        self.project.freeze()

    def params(self, prefix):
        yield from self.expand.params(f"{prefix}.expand")
        yield from self.depthwise.params(f"{prefix}.depthwise")
        yield from self.se.params(f"{prefix}.se")
        yield from self.project.params(f"{prefix}.project")

    def buffers(self, prefix):
        yield from self.expand.buffers(f"{prefix}.expand")
        yield from self.depthwise.buffers(f"{prefix}.depthwise")
        yield from self.project.buffers(f"{prefix}.project")


_BLOCK_KINDS = {"fused-mbconv": FusedMBConv, "mbconv": MBConv}


class Backbone:
    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.stem = ConvBN(3, cfg.stem_channels, 3, cfg.stem_stride, 1, rng)
        self.stages: list[list] = []
        c_in = cfg.stem_channels
        for spec in cfg.stages:
            blocks = []
            for i in range(spec.repeats):
                stride = spec.stride if i == 0 else 1
                blocks.append(_BLOCK_KINDS[spec.kind](c_in, spec, stride, rng))
                c_in = spec.channels
            self.stages.append(blocks)
        self.tap = cfg.resolved_tap()
        if cfg.frozen:
            self.freeze()

    def freeze(self):
        self.stem.freeze()
        for blocks in self.stages:
            for b in blocks:
                b.freeze()

    def forward(self, img, train: bool = False, audit: list | None = None) -> Tensor:
        """Run stages through the tap point; returns the tap activation."""
        x = img if isinstance(img, Tensor) else Tensor(img)
        single = x.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        x = silu(self.stem.forward(x, train))
        if audit is not None:
            audit.append(("stem", x.shape[1:]))
        ts, tb = self.tap
        for s, blocks in enumerate(self.stages):
            for b_i, block in enumerate(blocks):
                x = block.forward(x, train)
                if audit is not None:
                    audit.append((f"stage{s}.block{b_i}", x.shape[1:]))
                if (s, b_i) == (ts, tb):
                    return x[0] if single else x
        raise ConfigError(f"tap point {self.tap} unreachable")

    def params(self, prefix: str = "backbone"):
        yield from self.stem.params(f"{prefix}.stem")
        for s, blocks in enumerate(self.stages):
            for i, b in enumerate(blocks):
                yield from b.params(f"{prefix}.stage{s}.block{i}")

    def buffers(self, prefix: str = "backbone"):
        yield from self.stem.buffers(f"{prefix}.stem")
        for s, blocks in enumerate(self.stages):
            for i, b in enumerate(blocks):
                yield from b.buffers(f"{prefix}.stage{s}.block{i}")

    def registry(self) -> ParamRegistry:
        return registry_of(self.params())


class EffNetClassifier:
    """Standalone backbone classifier: tap -> global average -> linear."""

    def __init__(self, cfg: BackboneConfig, n_classes: int = 3, seed: int = 0):
        self.backbone = Backbone(cfg, seed)
        rng = np.random.default_rng(seed + 1)
        self.head = Linear(cfg.tap_channels, n_classes, rng)

    def forward(self, img, train: bool = False, audit: list | None = None) -> Tensor:
        x = img if isinstance(img, Tensor) else Tensor(img)
        single = x.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        feat = self.backbone.forward(x, train, audit)
        pooled = feat.mean(axis=3).mean(axis=2)
        logits = self.head.forward(pooled)
        return logits[0] if single else logits

    def registry(self) -> ParamRegistry:
        return registry_of(self.backbone.params(), self.head.params("head"))

    def buffers(self):
        yield from self.backbone.buffers()
