"""Low-rank adaptation of frozen linear maps: h = Wx + BAx.

An adapter keeps two trainable factors, A ([r, d_out], Gaussian init)
and B ([d_in, r], zero init), attached to a frozen base `Linear`.  Zero
init on B makes the adapted model exactly equivalent to the base model
until the first optimizer step.  No alpha/rank scaling is applied:
delta-W is B @ A exactly.
"""

from __future__ import annotations

import warnings

import numpy as np

from .configs import LoraPlacement, ModelConfig
from .layers import Linear
from .tensor import ShapeError, Tensor, matmul

A_INIT_STD = 0.02


class LoraAdapter:
    """Rank-r adapter pair for a frozen d_in x d_out base weight."""

    def __init__(self, A: Tensor, B: Tensor, rank: int):
        self.A = A
        self.B = B
        self.rank = rank

    @property
    def d_in(self) -> int:
        return self.B.shape[0]

    @property
    def d_out(self) -> int:
        return self.A.shape[1]

    @property
    def n_trainable(self) -> int:
        return self.rank * (self.d_in + self.d_out)


def make_adapter(d_in: int, d_out: int, rank: int, rng: np.random.Generator) -> LoraAdapter:
    if rank < 1:
        raise ValueError(f"lora rank must be >= 1, got {rank}")
    if rank > min(d_in, d_out):
        warnings.warn(
            f"lora rank {rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}; "
            "the adapter is full-rank-redundant but proceeds"
        )
    A = Tensor(rng.normal(0.0, A_INIT_STD, size=(rank, d_out)), requires_grad=True)
    B = Tensor.zeros((d_in, rank), requires_grad=True)
    return LoraAdapter(A, B, rank)


def attach(base: Linear, rank: int, seed: int) -> LoraAdapter:
    """Build an adapter for a frozen base linear layer."""
    if not base.frozen:
        raise ValueError("lora adapters attach to frozen base layers only")
    rng = np.random.default_rng(seed)
    return make_adapter(base.d_in, base.d_out, rank, rng)


def lora_forward(x: Tensor, base: Linear, adapter: LoraAdapter) -> Tensor:
    """Two-branch forward: x W + (x B) A, never materializing B A."""
    if x.shape[-1] != adapter.d_in:
        raise ShapeError(f"lora_forward: input width {x.shape} vs d_in {adapter.d_in}")
    return base.forward(x) + matmul(matmul(x, adapter.B), adapter.A)


def merge(base_w: Tensor, adapter: LoraAdapter) -> Tensor:
    """Return W + B A as an untracked tensor."""
    return Tensor(base_w.data + adapter.B.data @ adapter.A.data)


def unmerge(merged_w: Tensor, adapter: LoraAdapter) -> Tensor:
    return Tensor(merged_w.data - adapter.B.data @ adapter.A.data)


def attach_to_vit(model, placement: LoraPlacement, seed: int) -> None:
    """Attach adapters to the chosen projections of the chosen encoders.

    Fused mode: one adapter per d_model x d_model projection.  Per-head
    mode: one adapter per head, each targeting that head's d_k-wide
    column slice.
    """
    rng = np.random.default_rng(seed)
    cfg = model.cfg
    for b in placement.resolve_blocks(cfg.depth):
        mhsa = model.blocks[b].attn
        for proj in placement.projections:
            if proj not in mhsa.PROJECTIONS:
                raise ValueError(f"unknown projection {proj!r}")
            if placement.per_head:
                mhsa.adapters[proj] = [
                    make_adapter(cfg.d_model, mhsa.d_k, placement.rank, rng)
                    for _ in range(cfg.n_heads)
                ]
            else:
                mhsa.adapters[proj] = make_adapter(
                    cfg.d_model, cfg.d_model, placement.rank, rng
                )


def count_trainable(config: ModelConfig) -> dict[str, int]:
    """Exact trainable-parameter breakdown {lora, head, bridge, total}.

    Closed-form from the configuration; frozen parameters excluded.
    """
    lora_n = 0
    head_n = 0
    bridge_n = 0
    if config.vit is not None:
        v = config.vit
        if v.lora is not None and v.lora.rank > 0:
            p = v.lora
            n_blocks = len(p.resolve_blocks(v.depth))
            n_proj = len(p.projections)
            if p.per_head:
                d_k = v.d_model // v.n_heads
                per_proj = v.n_heads * p.rank * (v.d_model + d_k)
            else:
                per_proj = p.rank * (v.d_model + v.d_model)
            lora_n = n_blocks * n_proj * per_proj
        head_n = (
            v.d_model * v.head_hidden
            + v.head_hidden
            + v.head_hidden * v.n_classes
            + v.n_classes
        )
    if config.kind == "effnet":
        # standalone backbone classifier: linear tap_channels -> n_classes
        head_n = config.backbone.tap_channels * 3 + 3
    if config.bridge is not None:
        bridge_n = config.bridge.in_channels * config.bridge.out_channels + config.bridge.out_channels
    return {
        "lora": lora_n,
        "head": head_n,
        "bridge": bridge_n,
        "total": lora_n + head_n + bridge_n,
    }


def count_frozen(config: ModelConfig) -> dict[str, int]:
    """Closed-form frozen-parameter counts {vit_base, backbone, total}.

    Mirrors the registries exactly (cross-checked by tests at toy scale)
    so reference-scale counts never require building the model.
    """
    vit_n = 0
    if config.vit is not None:
        v = config.vit
        d, m = v.d_model, v.mlp_hidden
        patch = (3 * v.patch_size**2) * d + d
        embed = d + v.n_tokens * d  # cls + positional table
        block = 2 * d + 4 * (d * d + d) + 2 * d + (d * m + m + m * d + d)
        vit_n = patch + embed + v.depth * block + 2 * d
    backbone_n = 0
    if config.backbone is not None:
        b = config.backbone
        backbone_n = 3 * b.stem_channels * 9 + 2 * b.stem_channels
        c_in = b.stem_channels
        for spec in b.stages:
            for _ in range(spec.repeats):
                mid = c_in * spec.expansion
                if spec.kind == "fused-mbconv":
                    backbone_n += c_in * mid * 9 + 2 * mid  # 3x3 expand + BN
                else:
                    backbone_n += c_in * mid + 2 * mid  # 1x1 expand + BN
                    backbone_n += mid * 9 + 2 * mid  # depthwise 3x3 + BN
                    red = max(1, mid // spec.se_reduction)
                    backbone_n += mid * red + red + red * mid + mid  # SE
                backbone_n += mid * spec.channels + 2 * spec.channels  # project + BN
                c_in = spec.channels
    return {"vit_base": vit_n, "backbone": backbone_n, "total": vit_n + backbone_n}
