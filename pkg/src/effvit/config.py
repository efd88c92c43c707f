"""Flat key=value run configuration.

One `key = value` per line, '#' comments, unknown keys rejected.  The
same keys can be overridden on the command line; every run echoes the
fully resolved document into its output directory.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .configs import (
    BackboneConfig,
    BridgeConfig,
    LoraPlacement,
    ModelConfig,
    TrainConfig,
    ViTConfig,
    reference_backbone_config,
    toy_backbone_config,
)

__all__ = ["ConfigValidationError", "RunConfig", "parse_config_file"]


class ConfigValidationError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {e}" for e in errors))
        self.errors = errors


def _bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _choice(*options):
    def conv(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {options}, got {s!r}")
        return s

    return conv


def _placement(s: str):
    if s in ("all", "last2"):
        return s
    return tuple(int(p) for p in s.split(","))


def _projections(s: str):
    projs = tuple(p.strip() for p in s.split(","))
    bad = [p for p in projs if p not in ("q", "k", "v")]
    if bad:
        raise ValueError(f"unknown projections {bad}")
    return projs


# key -> (converter, default); defaults here are the desk-scale ("toy")
# preset, switched wholesale by preset=reference.
SCHEMA = {
    "preset": (_choice("toy", "reference"), "toy"),
    "model": (_choice("vitlora", "effnet", "hybrid"), "vitlora"),
    "seed": (int, 0),
    "vit.image_size": (int, None),
    "vit.patch_size": (int, None),
    "vit.d_model": (int, None),
    "vit.n_heads": (int, None),
    "vit.depth": (int, None),
    "vit.mlp_hidden": (int, None),
    "vit.head_hidden": (int, None),
    "vit.n_classes": (int, 3),
    "lora.rank": (int, 4),
    "lora.placement": (_placement, "all"),
    "lora.projections": (_projections, ("q", "k", "v")),
    "lora.per_head": (_bool, False),
    "backbone.frozen": (_bool, True),
    "hybrid.upsample": (_choice("bilinear", "nearest"), "bilinear"),
    "train.epochs": (int, 10),
    "train.batch_size": (int, 32),
    "train.lr": (float, 1e-3),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.eps": (float, 1e-8),
    "train.dtype": (_choice("float32", "float64"), "float32"),
    "data.n_per_class": (int, 300),
    "data.size": (int, 32),
    "data.n_slices": (int, 4),
    "data.split_ratio": (float, 0.8),
    "data.kfold_k": (int, 5),
    "data.balance": (_bool, False),
}

_PRESET_VIT = {
    "toy": dict(image_size=32, patch_size=8, d_model=64, n_heads=4, depth=2,
                mlp_hidden=128, head_hidden=32),
    "reference": dict(image_size=224, patch_size=16, d_model=768, n_heads=12, depth=12,
                  mlp_hidden=3072, head_hidden=256),
}


def parse_config_file(path: Path | str) -> dict[str, str]:
    raw: dict[str, str] = {}
    errors: list[str] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            errors.append(f"{path}:{lineno}: expected key = value, got {line.strip()!r}")
            continue
        key, value = (p.strip() for p in stripped.split("=", 1))
        if key in raw:
            errors.append(f"{path}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    if errors:
        raise ConfigValidationError(errors)
    return raw


class RunConfig:
    """Resolved, validated flat configuration."""

    def __init__(self, raw: dict[str, str] | None = None):
        raw = dict(raw or {})
        errors = []
        values: dict[str, object] = {}
        for key, value in raw.items():
            if key not in SCHEMA:
                errors.append(f"unknown key {key!r}")
                continue
            conv, _ = SCHEMA[key]
            try:
                values[key] = conv(value) if isinstance(value, str) else value
            except (ValueError, TypeError) as e:
                errors.append(f"{key}: {e}")
        if errors:
            raise ConfigValidationError(errors)
        preset = values.get("preset", SCHEMA["preset"][1])
        for key, (_, default) in SCHEMA.items():
            if key in values:
                continue
            if key.startswith("vit.") and default is None:
                values[key] = _PRESET_VIT[preset][key.removeprefix("vit.")]
            else:
                values[key] = default
        self.values = values

    def __getitem__(self, key: str):
        return self.values[key]

    # -- typed views -------------------------------------------------------

    def vit_config(self) -> ViTConfig:
        v = self.values
        return ViTConfig(
            image_size=v["vit.image_size"],
            patch_size=v["vit.patch_size"],
            d_model=v["vit.d_model"],
            n_heads=v["vit.n_heads"],
            depth=v["vit.depth"],
            mlp_hidden=v["vit.mlp_hidden"],
            head_hidden=v["vit.head_hidden"],
            n_classes=v["vit.n_classes"],
            lora=LoraPlacement(
                blocks=v["lora.placement"],
                projections=v["lora.projections"],
                rank=v["lora.rank"],
                per_head=v["lora.per_head"],
            ),
        )

    def backbone_config(self) -> BackboneConfig:
        base = reference_backbone_config() if self["preset"] == "reference" else toy_backbone_config()
        return dataclasses.replace(base, frozen=self["backbone.frozen"])

    def model_config(self) -> ModelConfig:
        kind = self["model"]
        vit = self.vit_config() if kind != "effnet" else None
        backbone = self.backbone_config() if kind != "vitlora" else None
        bridge = None
        if kind == "hybrid":
            bridge = BridgeConfig(
                in_channels=backbone.tap_channels,
                target_size=vit.image_size,
                mode=self["hybrid.upsample"],
            )
        return ModelConfig(kind=kind, vit=vit, backbone=backbone, bridge=bridge)

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["train.epochs"],
            batch_size=v["train.batch_size"],
            lr=v["train.lr"],
            beta1=v["train.beta1"],
            beta2=v["train.beta2"],
            eps=v["train.eps"],
            seed=v["seed"],
            dtype=v["train.dtype"],
        )

    # -- echo ---------------------------------------------------------------

    def echo_lines(self) -> list[str]:
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, tuple):
                v = ",".join(str(p) for p in v)
            lines.append(f"{key} = {v}")
        return lines

    def echo_dict(self) -> dict[str, str]:
        return {l.split(" = ")[0]: l.split(" = ", 1)[1] for l in self.echo_lines()}
