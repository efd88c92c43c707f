"""Dataclass configuration records for all model components.

Kept free of model code so every module (models, counting, CLI) can
import from here without cycles.  ``reference_*`` builders give the
reference-scale configuration; ``toy_*`` builders give the desk-scale
configuration used throughout the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

__all__ = [
    "LoraPlacement",
    "ViTConfig",
    "StageSpec",
    "BackboneConfig",
    "BridgeConfig",
    "ModelConfig",
    "TrainConfig",
    "reference_vit_config",
    "reference_backbone_config",
    "reference_model_config",
    "toy_vit_config",
    "toy_backbone_config",
    "toy_model_config",
]


@dataclass(frozen=True)
class LoraPlacement:
    """Which encoder blocks/projections receive adapters, and at what rank."""

    blocks: str | tuple[int, ...] = "all"  # "all" | "last2" | explicit indices
    projections: tuple[str, ...] = ("q", "k", "v")
    rank: int = 4
    per_head: bool = False

    def resolve_blocks(self, depth: int) -> list[int]:
        if self.blocks == "all":
            return list(range(depth))
        if self.blocks == "last2":
            return list(range(max(0, depth - 2), depth))
        idx = [int(i) for i in self.blocks]
        bad = [i for i in idx if not 0 <= i < depth]
        if bad:
            raise ValueError(f"lora placement indices {bad} outside depth {depth}")
        return sorted(set(idx))


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 224
    patch_size: int = 16
    d_model: int = 768
    n_heads: int = 12
    depth: int = 12
    mlp_hidden: int = 3072
    head_hidden: int = 256
    n_classes: int = 3
    dropout: float = 0.0
    lora: LoraPlacement | None = None

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1


@dataclass(frozen=True)
class StageSpec:
    """One backbone stage: repeated blocks of a single kind."""

    kind: str  # "fused-mbconv" | "mbconv"
    repeats: int
    stride: int  # stride of the first block in the stage
    channels: int
    expansion: int = 4
    se_reduction: int = 4  # mbconv only
    padding: int = 1  # padding of the 3x3 conv

    def __post_init__(self):
        if self.kind not in ("fused-mbconv", "mbconv"):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.channels <= 0 or self.repeats <= 0:
            raise ValueError("channels and repeats must be positive")


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple[StageSpec, ...]
    stem_channels: int = 24
    stem_stride: int = 2
    tap_stage: int = -1  # defaults below resolve negatives
    tap_block: int = -1
    frozen: bool = True

    def resolved_tap(self) -> tuple[int, int]:
        s = self.tap_stage % len(self.stages)
        blocks = self.stages[s].repeats
        b = self.tap_block % blocks
        return s, b

    @property
    def tap_channels(self) -> int:
        s, _ = self.resolved_tap()
        return self.stages[s].channels


@dataclass(frozen=True)
class BridgeConfig:
    in_channels: int = 256
    out_channels: int = 3
    target_size: int = 224
    mode: str = "bilinear"  # "bilinear" | "nearest"

    def __post_init__(self):
        if self.out_channels != 3:
            raise ValueError("bridge must emit 3 channels (ViT input contract)")


@dataclass(frozen=True)
class ModelConfig:
    """Full architecture description for one of the three model kinds."""

    kind: str  # "vitlora" | "effnet" | "hybrid"
    vit: ViTConfig | None = None
    backbone: BackboneConfig | None = None
    bridge: BridgeConfig | None = None

    def __post_init__(self):
        if self.kind not in ("vitlora", "effnet", "hybrid"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind in ("vitlora", "hybrid") and self.vit is None:
            raise ValueError(f"{self.kind} requires a vit config")
        if self.kind in ("effnet", "hybrid") and self.backbone is None:
            raise ValueError(f"{self.kind} requires a backbone config")
        if self.kind == "hybrid" and self.bridge is None:
            raise ValueError("hybrid requires a bridge config")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    dtype: str = "float64"  # "float64" for verification, "float32" for speed

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# -- reference-scale configurations -------------------------------------------


def reference_vit_config(rank: int = 4, placement: str = "all", per_head: bool = False) -> ViTConfig:
    return ViTConfig(
        lora=LoraPlacement(blocks=placement, rank=rank, per_head=per_head)
    )


def reference_backbone_config() -> BackboneConfig:
    """Reference backbone: 256-channel tap at 12x12 from a 224 input.

    224 -> stem/2 -> 112 -> 56 -> 28 -> 14 -> (3x3, pad 0) -> 12.
    """
    return BackboneConfig(
        stages=(
            StageSpec("fused-mbconv", repeats=2, stride=2, channels=48),
            StageSpec("fused-mbconv", repeats=2, stride=2, channels=64),
            StageSpec("mbconv", repeats=2, stride=2, channels=128),
            StageSpec("mbconv", repeats=2, stride=1, channels=256, padding=0),
        ),
        stem_channels=24,
        tap_stage=3,
        tap_block=0,
    )


def reference_model_config(kind: str = "hybrid", rank: int = 4, placement: str = "all") -> ModelConfig:
    vit = reference_vit_config(rank=rank, placement=placement) if kind != "effnet" else None
    backbone = reference_backbone_config() if kind != "vitlora" else None
    bridge = BridgeConfig(in_channels=256, target_size=224) if kind == "hybrid" else None
    return ModelConfig(kind=kind, vit=vit, backbone=backbone, bridge=bridge)


# -- desk-scale configurations -------------------------------------------------


def toy_vit_config(rank: int = 4, placement: str = "all", per_head: bool = False) -> ViTConfig:
    return ViTConfig(
        image_size=32,
        patch_size=8,
        d_model=64,
        n_heads=4,
        depth=2,
        mlp_hidden=128,
        head_hidden=32,
        lora=LoraPlacement(blocks=placement, rank=rank, per_head=per_head),
    )


def toy_backbone_config() -> BackboneConfig:
    return BackboneConfig(
        stages=(
            StageSpec("fused-mbconv", repeats=1, stride=2, channels=16, expansion=2),
            StageSpec("fused-mbconv", repeats=1, stride=2, channels=24, expansion=2),
            StageSpec("mbconv", repeats=1, stride=1, channels=32, expansion=2),
            StageSpec("mbconv", repeats=1, stride=1, channels=32, expansion=2),
        ),
        stem_channels=8,
        stem_stride=1,
        tap_stage=3,
        tap_block=0,
    )


def toy_model_config(kind: str = "hybrid", rank: int = 4, placement: str = "all") -> ModelConfig:
    vit = toy_vit_config(rank=rank, placement=placement) if kind != "effnet" else None
    backbone = toy_backbone_config() if kind != "vitlora" else None
    bridge = (
        BridgeConfig(in_channels=32, target_size=32) if kind == "hybrid" else None
    )
    return ModelConfig(kind=kind, vit=vit, backbone=backbone, bridge=bridge)
