"""Vision transformer with patch embedding, CLS token and a 2-layer head.

The encoder stack is the pre-norm variant.  In adapter mode everything
"pretrained" (patch projection, CLS, positional table, encoder blocks,
final norm) is frozen; only adapters and the classification head train.
"""

from __future__ import annotations

import numpy as np

from .configs import ViTConfig
from .layers import EncoderBlock, LayerNorm, Linear, registry_of
from .tensor import ParamRegistry, Tensor, concat, relu, softmax_lastdim

__all__ = ["ViTModel", "patch_embed", "load_pseudo_pretrained"]


class ViTModel:
    def __init__(self, cfg: ViTConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        patch_dim = 3 * cfg.patch_size * cfg.patch_size
        self.patch_proj = Linear(patch_dim, cfg.d_model, rng)
        self.cls = Tensor(rng.normal(0.0, 0.02, size=cfg.d_model), requires_grad=True)
        self.pos = Tensor(
            rng.normal(0.0, 0.02, size=(cfg.n_tokens, cfg.d_model)), requires_grad=True
        )
        self.blocks = [
            EncoderBlock(cfg.d_model, cfg.n_heads, cfg.mlp_hidden, rng)
            for _ in range(cfg.depth)
        ]
        self.final_ln = LayerNorm(cfg.d_model)
        self.head_fc1 = Linear(cfg.d_model, cfg.head_hidden, rng)
        self.head_fc2 = Linear(cfg.head_hidden, cfg.n_classes, rng)

    # -- parameter bookkeeping -------------------------------------------

    def pretrained_params(self):
        """The weights that stand in for the pretrained checkpoint."""
        yield from self.patch_proj.params("patch_proj")
        yield "cls", self.cls
        yield "pos", self.pos
        for i, blk in enumerate(self.blocks):
            # base weights only; adapters are excluded by name
            for name, t in blk.params(f"block{i}"):
                if ".lora" not in name:
                    yield name, t
        yield from self.final_ln.params("final_ln")

    def head_params(self):
        yield from self.head_fc1.params("head.fc1")
        yield from self.head_fc2.params("head.fc2")

    def adapter_params(self):
        for i, blk in enumerate(self.blocks):
            for name, t in blk.attn.params(f"block{i}.attn"):
                if ".lora" in name:
                    yield name, t

    def registry(self) -> ParamRegistry:
        return registry_of(
            self.pretrained_params(), self.adapter_params(), self.head_params()
        )

    def freeze_pretrained(self) -> None:
        for _, t in self.pretrained_params():
            t.requires_grad = False

    # -- forward -----------------------------------------------------------

    def embed(self, img: Tensor, audit: list | None = None) -> Tensor:
        tokens = patch_embed(img, self.patch_proj, self.cls, self.pos, self.cfg)
        if audit is not None:
            audit.append(("embed", tokens.shape[1:]))
        return tokens

    def encode(self, tokens: Tensor, audit: list | None = None) -> Tensor:
        for i, blk in enumerate(self.blocks):
            tokens = blk.forward(tokens)
            if audit is not None:
                audit.append((f"encoder{i}", tokens.shape[1:]))
        return self.final_ln.forward(tokens)

    def cls_features(self, img: Tensor, audit: list | None = None) -> Tensor:
        tokens = self.encode(self.embed(img, audit), audit)
        return tokens[:, 0, :]

    def forward(self, img, train: bool = False, audit: list | None = None) -> Tensor:
        """Logits [B, n_classes]; softmax is applied only in the loss or
        the probability view."""
        img, single = _batched(img)
        cls_out = self.cls_features(img, audit)
        logits = self.head_fc2.forward(relu(self.head_fc1.forward(cls_out)))
        return logits[0] if single else logits

    def probabilities(self, img) -> Tensor:
        logits = self.forward(img)
        if logits.ndim == 1:
            logits = logits.reshape(1, -1)
            return softmax_lastdim(logits)[0]
        return softmax_lastdim(logits)


def _batched(img) -> tuple[Tensor, bool]:
    if not isinstance(img, Tensor):
        img = Tensor(img)
    if img.ndim == 3:
        return img.reshape((1,) + img.shape), True
    if img.ndim != 4:
        raise ValueError(f"expected [3,S,S] or [B,3,S,S], got {img.shape}")
    return img, False


def patch_embed(
    img: Tensor, proj: Linear, cls: Tensor, pos: Tensor, cfg: ViTConfig
) -> Tensor:
    """Non-overlapping patch flattening + projection; CLS prepended,
    positional table added."""
    img, _ = _batched(img)
    B, C, H, W = img.shape
    p = cfg.patch_size
    if C != 3 or H != cfg.image_size or W != cfg.image_size:
        raise ValueError(
            f"expected [*,3,{cfg.image_size},{cfg.image_size}] input, got {img.shape}"
        )
    n = H // p
    patches = (
        img.reshape(B, C, n, p, n, p)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(B, n * n, C * p * p)
    )
    tokens = proj.forward(patches)  # [B, N, d_model]
    cls_tok = Tensor.zeros((B, 1, cfg.d_model), dtype=img.dtype) + cls
    return concat([cls_tok, tokens], axis=1) + pos


def load_pseudo_pretrained(model: ViTModel, seed: int) -> None:
    """Deterministically re-initialize and freeze the base ViT weights.

    Stands in for an ImageNet checkpoint: weight matrices get fan-in
    scaled Gaussians, norms get identity affine, embeddings get small
    Gaussians.  Identical seed -> bit-identical weights.
    """
    rng = np.random.default_rng(seed)
    for name, t in model.pretrained_params():
        reinit_param(name, t, rng)
    model.freeze_pretrained()


def reinit_param(name: str, t: Tensor, rng: np.random.Generator) -> None:
    if name.endswith(".gamma"):
        t.data[...] = 1.0
    elif name.endswith((".beta", ".b")):
        t.data[...] = 0.0
    elif t.ndim == 2:
        t.data[...] = rng.normal(0.0, 1.0 / np.sqrt(t.shape[0]), size=t.shape)
    else:
        t.data[...] = rng.normal(0.0, 0.02, size=t.shape)
