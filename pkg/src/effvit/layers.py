"""Reusable network layers built on the tensor core.

Layers hold their weights as `Tensor`s and expose ``params(prefix)`` so
models can assemble a flat `ParamRegistry`.  Forward passes are pure:
no layer mutates its weights.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    ParamRegistry,
    ShapeError,
    Tensor,
    conv2d,
    gelu,
    layer_norm,
    matmul,
    concat,
    sigmoid,
    silu,
    softmax_lastdim,
)


class ConfigError(ValueError):
    """Raised when a layer/model configuration is inconsistent."""


def normal_init(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def fan_in_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape), requires_grad=True)


class Linear:
    """y = x @ W + b with W of shape [d_in, d_out]."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.d_in = d_in
        self.d_out = d_out
        self.W = fan_in_init(rng, (d_in, d_out), d_in)
        self.b = Tensor.zeros(d_out, requires_grad=True) if bias else None

    @property
    def frozen(self) -> bool:
        return not self.W.requires_grad

    def freeze(self) -> None:
        self.W.requires_grad = False
        if self.b is not None:
            self.b.requires_grad = False

    def forward(self, x: Tensor) -> Tensor:
        y = matmul(x, self.W)
        if self.b is not None:
            y = y + self.b
        return y

    def params(self, prefix: str):
        yield f"{prefix}.W", self.W
        if self.b is not None:
            yield f"{prefix}.b", self.b


class LayerNorm:
    def __init__(self, d: int, eps: float = 1e-6):
        self.gamma = Tensor.ones(d, requires_grad=True)
        self.beta = Tensor.zeros(d, requires_grad=True)
        self.eps = eps

    def freeze(self) -> None:
        self.gamma.requires_grad = False
        self.beta.requires_grad = False

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)

    def params(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v over the trailing two axes."""
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention: shapes {q.shape}, {k.shape}, {v.shape}")
    d_k = q.shape[-1]
    scores = matmul(q, k.swap_last2()) * (1.0 / np.sqrt(d_k))
    return matmul(softmax_lastdim(scores), v)


def _apply_adapter(x: Tensor, adapter) -> Tensor:
    # two-branch LoRA: (x B) A, never materializing B A
    return matmul(matmul(x, adapter.B), adapter.A)


class MultiHeadSelfAttention:
    """Fused-projection multi-head self-attention.

    W_Q/W_K/W_V/W_O are d_model x d_model; heads are views into the
    fused projections.  Low-rank adapters, when attached, add a second
    branch to the chosen projections (fused: one adapter per projection;
    per-head: one adapter per head per projection).
    """

    PROJECTIONS = ("q", "k", "v")

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads != 0:
            raise ConfigError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_k = d_model // n_heads
        self.proj = {p: Linear(d_model, d_model, rng) for p in ("q", "k", "v")}
        self.out = Linear(d_model, d_model, rng)
        # proj name -> adapter (fused) or list of per-head adapters
        self.adapters: dict[str, object] = {}

    def freeze(self) -> None:
        for lin in self.proj.values():
            lin.freeze()
        self.out.freeze()

    def _project(self, x: Tensor, name: str) -> Tensor:
        y = self.proj[name].forward(x)
        adapter = self.adapters.get(name)
        if adapter is None:
            return y
        if isinstance(adapter, list):
            delta = concat([_apply_adapter(x, a) for a in adapter], axis=-1)
        else:
            delta = _apply_adapter(x, adapter)
        return y + delta

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_model:
            raise ShapeError(f"mhsa: expected width {self.d_model}, got {x.shape}")
        B, T, _ = x.shape
        H, dk = self.n_heads, self.d_k

        def split_heads(t: Tensor) -> Tensor:
            return t.reshape(B, T, H, dk).transpose(0, 2, 1, 3)

        q = split_heads(self._project(x, "q"))
        k = split_heads(self._project(x, "k"))
        v = split_heads(self._project(x, "v"))
        ctx = attention(q, k, v)  # [B,H,T,dk]
        merged = ctx.transpose(0, 2, 1, 3).reshape(B, T, self.d_model)
        return self.out.forward(merged)

    def params(self, prefix: str):
        for name in ("q", "k", "v"):
            yield from self.proj[name].params(f"{prefix}.{name}")
        yield from self.out.params(f"{prefix}.out")
        for name in sorted(self.adapters):
            adapter = self.adapters[name]
            if isinstance(adapter, list):
                for h, a in enumerate(adapter):
                    yield f"{prefix}.{name}.lora{h}.B", a.B
                    yield f"{prefix}.{name}.lora{h}.A", a.A
            else:
                yield f"{prefix}.{name}.lora.B", adapter.B
                yield f"{prefix}.{name}.lora.A", adapter.A


class MLPBlock:
    """Two-layer feed-forward block with GELU."""

    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d_model, hidden, rng)
        self.fc2 = Linear(hidden, d_model, rng)

    def freeze(self) -> None:
        self.fc1.freeze()
        self.fc2.freeze()

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2.forward(gelu(self.fc1.forward(x)))

    def params(self, prefix: str):
        yield from self.fc1.params(f"{prefix}.fc1")
        yield from self.fc2.params(f"{prefix}.fc2")


class EncoderBlock:
    """Pre-norm transformer encoder: x + MHSA(LN(x)), then + MLP(LN(.))."""

    def __init__(self, d_model: int, n_heads: int, mlp_hidden: int, rng):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadSelfAttention(d_model, n_heads, rng)
        self.ln2 = LayerNorm(d_model)
        self.mlp = MLPBlock(d_model, mlp_hidden, rng)

    def freeze(self) -> None:
        self.ln1.freeze()
        self.attn.freeze()
        self.ln2.freeze()
        self.mlp.freeze()

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn.forward(self.ln1.forward(x))
        return x + self.mlp.forward(self.ln2.forward(x))

    def params(self, prefix: str):
        yield from self.ln1.params(f"{prefix}.ln1")
        yield from self.attn.params(f"{prefix}.attn")
        yield from self.ln2.params(f"{prefix}.ln2")
        yield from self.mlp.params(f"{prefix}.mlp")


class BatchNorm2d:
    """Batch norm over [B,C,H,W] with running statistics (momentum 0.1).

    Train mode normalizes with batch statistics and updates the running
    buffers; eval mode is a deterministic affine map from the stored
    statistics.  The buffers are statistics, not parameters, and are not
    part of the registry.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor.ones(channels, requires_grad=True)
        self.beta = Tensor.zeros(channels, requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def freeze(self) -> None:
        self.gamma.requires_grad = False
        self.beta.requires_grad = False

    def forward(self, x: Tensor, train: bool) -> Tensor:
        gamma = self.gamma.reshape(1, -1, 1, 1)
        beta = self.beta.reshape(1, -1, 1, 1)
        if train:
            mu = x.mean(axis=0, keepdims=True).mean(axis=2, keepdims=True).mean(
                axis=3, keepdims=True
            )
            centered = x - mu
            var = (
                (centered * centered)
                .mean(axis=0, keepdims=True)
                .mean(axis=2, keepdims=True)
                .mean(axis=3, keepdims=True)
            )
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
            self.running_var = (1 - m) * self.running_var + m * var.data.reshape(-1)
            return centered * (var + self.eps) ** -0.5 * gamma + beta
        rm = Tensor(self.running_mean.reshape(1, -1, 1, 1).astype(x.dtype))
        rv = Tensor(self.running_var.reshape(1, -1, 1, 1).astype(x.dtype))
        return (x - rm) * (rv + self.eps) ** -0.5 * gamma + beta

    def params(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


class SEBlock:
    """Squeeze-and-excitation: global average -> SiLU -> sigmoid gate."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        reduced = max(1, channels // reduction)
        self.fc1 = Linear(channels, reduced, rng)
        self.fc2 = Linear(reduced, channels, rng)

    def freeze(self) -> None:
        self.fc1.freeze()
        self.fc2.freeze()

    def forward(self, x: Tensor) -> Tensor:
        B, C = x.shape[0], x.shape[1]
        squeezed = x.mean(axis=3).mean(axis=2)  # [B,C]
        gate = sigmoid(self.fc2.forward(silu(self.fc1.forward(squeezed))))
        return x * gate.reshape(B, C, 1, 1)

    def params(self, prefix: str):
        yield from self.fc1.params(f"{prefix}.fc1")
        yield from self.fc2.params(f"{prefix}.fc2")


def registry_of(*param_iters) -> ParamRegistry:
    reg = ParamRegistry()
    for it in param_iters:
        reg.extend(it)
    return reg
