"""Dense tensors with reverse-mode automatic differentiation.

Everything downstream (layers, LoRA, the CNN backbone, the ViT) is built
from the primitives here.  The graph is define-by-run: each op closes over
its inputs and records a backward rule; ``Tensor.backward`` replays the
rules in reverse topological order.  Gradients accumulate additively and
are only ever materialized for tensors that require them, so frozen
weights never receive a grad buffer.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ParamRegistry",
    "matmul",
    "concat",
    "softmax_lastdim",
    "layer_norm",
    "conv2d",
    "upsample",
    "cross_entropy",
    "relu",
    "sigmoid",
    "tanh",
    "silu",
    "gelu",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in _FLOAT_DTYPES:
        return arr.astype(np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._prev: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False, dtype=np.float64) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False, dtype=np.float64) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), requires_grad)

    @staticmethod
    def _result(data, prev, backward) -> "Tensor":
        out = Tensor(data, requires_grad=any(p.requires_grad for p in prev))
        if out.requires_grad:
            out._prev = tuple(prev)
            out._backward = backward
        return out

    # -- basic properties ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every tracked ancestor of this scalar."""
        if self.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic -------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(
            np.asarray(other, dtype=self.dtype)
        )

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._result(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self

        def backward(g):
            if a.requires_grad:
                a._accumulate(-g)

        return Tensor._result(-a.data, (a,), backward)

    def __sub__(self, other) -> "Tensor":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._result(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        return self * self._coerce(other) ** -1.0

    def __rtruediv__(self, other) -> "Tensor":
        return self._coerce(other) * self ** -1.0

    def __pow__(self, exponent: float) -> "Tensor":
        a = self
        p = float(exponent)
        out_data = a.data ** p

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * p * a.data ** (p - 1.0))

        return Tensor._result(out_data, (a,), backward)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if not a.requires_grad:
                return
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

        return Tensor._result(out_data, (a,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        in_shape = a.shape

        def backward(g):
            if a.requires_grad:
                a._accumulate(g.reshape(in_shape))

        return Tensor._result(a.data.reshape(shape), (a,), backward)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = np.argsort(axes)

        def backward(g):
            if a.requires_grad:
                a._accumulate(g.transpose(inv))

        return Tensor._result(a.data.transpose(axes), (a,), backward)

    def swap_last2(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)

    def __getitem__(self, key) -> "Tensor":
        a = self

        def backward(g):
            if a.requires_grad:
                buf = np.zeros_like(a.data)
                np.add.at(buf, key, g)
                a._accumulate(buf)

        return Tensor._result(a.data[key], (a,), backward)

    # -- elementwise nonlinearities ------------------------------------------

    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * out_data)

        return Tensor._result(out_data, (a,), backward)

    def log(self) -> "Tensor":
        a = self

        def backward(g):
            if a.requires_grad:
                a._accumulate(g / a.data)

        return Tensor._result(np.log(a.data), (a,), backward)

    def tanh(self) -> "Tensor":
        a = self
        out_data = np.tanh(a.data)

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * (1.0 - out_data * out_data))

        return Tensor._result(out_data, (a,), backward)

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * mask)

        return Tensor._result(a.data * mask, (a,), backward)

    def sigmoid(self) -> "Tensor":
        a = self
        out_data = 1.0 / (1.0 + np.exp(-a.data))

        def backward(g):
            if a.requires_grad:
                a._accumulate(g * out_data * (1.0 - out_data))

        return Tensor._result(out_data, (a,), backward)


# -- module-level op aliases --------------------------------------------------


def relu(x: Tensor) -> Tensor:
    return x.relu()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def tanh(x: Tensor) -> Tensor:
    return x.tanh()


def silu(x: Tensor) -> Tensor:
    return x * x.sigmoid()


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    # tanh approximation; self-consistent under autodiff.
    inner = (x + x * x * x * 0.044715) * _GELU_C
    return x * (inner.tanh() + 1.0) * 0.5


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics over leading dims."""
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")

    def backward(g):
        if a.requires_grad:
            if b.ndim == 1:
                ga = np.multiply.outer(g, b.data) if g.ndim else g * b.data
            else:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b.ndim == 1:
                gb = np.tensordot(g, a.data, axes=(range(g.ndim), range(g.ndim)))
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor._result(np.matmul(a.data, b.data), (a, b), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._result(
        np.concatenate([t.data for t in parts], axis=axis), parts, backward
    )


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction.

    The subtracted max is treated as a constant; softmax is shift
    invariant so the gradient is unaffected.
    """
    shifted = x - Tensor(x.data.max(axis=-1, keepdims=True))
    e = shifted.exp()
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * (var + eps) ** -0.5 * gamma + beta


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """[B,C,Hp,Wp] -> [B,C,Ho,Wo,k,k] view of sliding windows."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _col2im_add(
    gxp: np.ndarray, gcols: np.ndarray, k: int, stride: int
) -> None:
    ho, wo = gcols.shape[2], gcols.shape[3]
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                gcols[:, :, :, :, i, j]
            )


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation.

    x: [B, C_in, H, W] (a leading batch axis is required; callers with a
    single image reshape to B=1).  w: [C_out, C_in/groups, k, k].  Only
    groups == 1 and the depthwise case groups == C_in == C_out are
    supported; k must be 1 or 3.
    """
    B, C_in, H, W = x.shape
    C_out, _, k, k2 = w.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be 1x1 or 3x3, got {k}x{k2}")
    if groups not in (1, C_in):
        raise ShapeError(f"conv2d: unsupported groups={groups} for C_in={C_in}")
    depthwise = groups != 1
    if depthwise and C_out != C_in:
        raise ShapeError("conv2d: depthwise requires C_out == C_in")
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(
            f"conv2d: nonpositive output extent {Ho}x{Wo} "
            f"(input {H}x{W}, k={k}, stride={stride}, padding={padding})"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, k, stride)  # [B,C,Ho,Wo,k,k]

    if depthwise:
        out_data = np.einsum("bchwij,cij->bchw", cols, w.data[:, 0], optimize=True)
    else:
        out_data = np.einsum("bchwij,ocij->bohw", cols, w.data, optimize=True)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]

    prev = [x, w] if bias is None else [x, w, bias]

    def backward(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            if depthwise:
                gw = np.einsum("bchwij,bchw->cij", cols, g, optimize=True)[:, None]
            else:
                gw = np.einsum("bchwij,bohw->ocij", cols, g, optimize=True)
            w._accumulate(gw)
        if x.requires_grad:
            if depthwise:
                gcols = np.einsum("bchw,cij->bchwij", g, w.data[:, 0], optimize=True)
            else:
                gcols = np.einsum("bohw,ocij->bchwij", g, w.data, optimize=True)
            gxp = np.zeros_like(xp)
            _col2im_add(gxp, gcols, k, stride)
            if padding:
                gxp = gxp[:, :, padding : padding + H, padding : padding + W]
            x._accumulate(gxp)

    return Tensor._result(out_data, prev, backward)


def _bilinear_coeffs(n_in: int, n_out: int):
    """align-corners-false source indices and weights for one axis."""
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def upsample(x: Tensor, target: tuple[int, int], mode: str = "bilinear") -> Tensor:
    """Scale the trailing two axes of [..., H, W] up to `target`."""
    H, W = x.shape[-2], x.shape[-1]
    H2, W2 = target
    if H2 < H or W2 < W:
        raise ShapeError(f"upsample: target {target} smaller than input {(H, W)}")
    if mode == "nearest":
        ri = np.minimum((np.arange(H2) * H) // H2, H - 1)
        ci = np.minimum((np.arange(W2) * W) // W2, W - 1)
        out_data = x.data[..., ri[:, None], ci[None, :]]

        def backward(g):
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                np.add.at(gx, (..., ri[:, None], ci[None, :]), g)
                x._accumulate(gx)

        return Tensor._result(out_data, (x,), backward)

    if mode != "bilinear":
        raise ValueError(f"upsample: unknown mode {mode!r}")

    rlo, rhi, rf = _bilinear_coeffs(H, H2)
    clo, chi, cf = _bilinear_coeffs(W, W2)
    rf = rf[:, None].astype(x.dtype)
    cf = cf[None, :].astype(x.dtype)
    w00 = (1 - rf) * (1 - cf)
    w01 = (1 - rf) * cf
    w10 = rf * (1 - cf)
    w11 = rf * cf
    out_data = (
        x.data[..., rlo[:, None], clo[None, :]] * w00
        + x.data[..., rlo[:, None], chi[None, :]] * w01
        + x.data[..., rhi[:, None], clo[None, :]] * w10
        + x.data[..., rhi[:, None], chi[None, :]] * w11
    )

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (..., rlo[:, None], clo[None, :]), g * w00)
            np.add.at(gx, (..., rlo[:, None], chi[None, :]), g * w01)
            np.add.at(gx, (..., rhi[:, None], clo[None, :]), g * w10)
            np.add.at(gx, (..., rhi[:, None], chi[None, :]), g * w11)
            x._accumulate(gx)

    return Tensor._result(out_data, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch.

    logits: [B, C]; labels: int array [B].  Gradient w.r.t. logits is
    (softmax - onehot) / B.
    """
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} != ({B},)")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"cross_entropy: label out of range [0, {C})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sz = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sz)
    loss = -logp[np.arange(B), labels].mean()
    softmax = ez / sz

    def backward(g):
        if logits.requires_grad:
            grad = softmax.copy()
            grad[np.arange(B), labels] -= 1.0
            logits._accumulate(grad * (float(g) / B))

    return Tensor._result(np.asarray(loss, dtype=z.dtype), (logits,), backward)


class ParamRegistry:
    """Ordered name -> Tensor map of model parameters.

    Trainability is read off each tensor's ``requires_grad``; frozen
    parameters stay registered so counting and snapshotting see them.
    """

    def __init__(self, items=()):
        self._params: dict[str, Tensor] = {}
        for name, t in items:
            self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor

    def extend(self, items) -> None:
        for name, t in items:
            self.add(name, t)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def trainable_items(self):
        return [(n, t) for n, t in self._params.items() if t.requires_grad]

    def frozen_items(self):
        return [(n, t) for n, t in self._params.items() if not t.requires_grad]

    def n_trainable(self) -> int:
        return sum(t.size for _, t in self.trainable_items())

    def n_frozen(self) -> int:
        return sum(t.size for _, t in self.frozen_items())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def changed_since(self, snap: dict[str, np.ndarray]) -> list[str]:
        return [
            n
            for n, t in self._params.items()
            if not np.array_equal(t.data, snap[n])
        ]
