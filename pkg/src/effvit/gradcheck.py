"""Central-difference verification of autodiff gradients.

For every trainable parameter element we perturb by
h = 1e-5 * max(1, |theta|) and compare the analytic gradient against
(f(theta+h) - f(theta-h)) / 2h.  The reported figure per parameter is
max over elements of |ad - fd| / max(1, |ad|, |fd|); frozen parameters
are reported as skipped, never failed.  Double precision only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ParamRegistry, Tensor, cross_entropy

__all__ = ["GradCheckError", "GradCheckResult", "grad_check", "model_loss_closure"]

H_BASE = 1e-5


class GradCheckError(RuntimeError):
    """Non-finite gradient or other diagnostic failure."""


@dataclass
class GradCheckResult:
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    @property
    def worst(self) -> tuple[str, float] | None:
        if not self.per_param:
            return None
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.per_param.values())

    def lines(self) -> list[str]:
        out = []
        for name, err in sorted(self.per_param.items()):
            status = "ok" if err <= self.tolerance else "FAIL"
            out.append(f"{status:4s} {name}: max rel err {err:.3e}")
        for name in self.skipped:
            out.append(f"skip {name}: frozen")
        if self.worst is not None:
            out.append(f"worst: {self.worst[0]} ({self.worst[1]:.3e})")
        return out


def grad_check(
    loss_fn, params: ParamRegistry, tolerance: float = 1e-4
) -> GradCheckResult:
    """Compare autodiff gradients of `loss_fn` against central differences.

    `loss_fn` must recompute the scalar loss from the current parameter
    values on every call.
    """
    for _, t in params.items():
        if t.dtype != np.float64:
            raise GradCheckError("grad_check requires double-precision parameters")
    params.zero_grad()
    loss = loss_fn()
    loss.backward()

    analytic: dict[str, np.ndarray] = {}
    result = GradCheckResult(tolerance=tolerance)
    for name, t in params.items():
        if not t.requires_grad:
            result.skipped.append(name)
            continue
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise GradCheckError(f"non-finite gradient in parameter {name!r}")
        analytic[name] = g.copy()

    for name, t in params.items():
        if not t.requires_grad:
            continue
        ad = analytic[name]
        worst = 0.0
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = H_BASE * max(1.0, abs(orig))
            flat[i] = orig + h
            lp = loss_fn().item()
            flat[i] = orig - h
            lm = loss_fn().item()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            a = ad.reshape(-1)[i]
            rel = abs(a - fd) / max(1.0, abs(a), abs(fd))
            if rel > worst:
                worst = rel
        result.per_param[name] = worst
    params.zero_grad()
    return result


_SABOTAGE_FACTOR = 10.0


def _sabotage(x: Tensor) -> Tensor:
    """Identity forward with a deliberately wrong backward rule."""

    def backward(g):
        x._accumulate(g * _SABOTAGE_FACTOR)

    return Tensor._result(x.data.copy(), (x,), backward)


def model_loss_closure(model, images: np.ndarray, labels, sabotage: bool = False):
    """Cross-entropy probe loss over a fixed batch, in inference mode."""
    labels = np.asarray(labels)

    def loss_fn():
        logits = model.forward(Tensor(images), train=False)
        if sabotage:
            logits = _sabotage(logits)
        return cross_entropy(logits, labels)

    return loss_fn


def randomize_trainable(params: ParamRegistry, seed: int, std: float = 0.02) -> None:
    """Put trainable parameters at a seeded random point before checking.

    Zero-initialized adapter factors would otherwise hide their partner
    factor's gradient (d/dA of (xB)A vanishes at B = 0).
    """
    rng = np.random.default_rng(seed)
    for _, t in params.trainable_items():
        t.data[...] = rng.normal(0.0, std, size=t.shape)
