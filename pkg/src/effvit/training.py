"""Adam optimization loop, freeze-aware updates, and checkpointing.

The optimizer only ever sees trainable parameters; frozen weights are
bit-identical across any number of steps.  With a fixed seed and
single-threaded execution two runs produce identical histories and
checkpoints.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .configs import TrainConfig
from .data import Sample
from .tensor import ParamRegistry, Tensor, cross_entropy

__all__ = [
    "TrainingError",
    "AdamState",
    "adam_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
    "history_csv_lines",
]


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class AdamState:
    """First/second moment buffers, allocated for trainable params only."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_registry(cls, params: ParamRegistry) -> "AdamState":
        state = cls()
        for name, p in params.trainable_items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state

    def n_moments(self) -> int:
        return sum(a.size for a in self.m.values())


def adam_step(params: ParamRegistry, state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update over all trainable parameters."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.trainable_items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def _batches(n: int, batch_size: int):
    for lo in range(0, n, batch_size):
        yield slice(lo, min(lo + batch_size, n))


def _stack_images(samples: list[Sample], dtype) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(dtype, copy=False)


def _labels(samples: list[Sample]) -> np.ndarray:
    return np.array([s.label_index for s in samples], dtype=np.int64)


def cast_model(model, dtype) -> None:
    """Cast parameters in place (training speed).

    Batch-norm running statistics stay float64; they mix fine with
    float32 math.
    """
    dtype = np.dtype(dtype)
    for _, p in model.registry().items():
        p.data = p.data.astype(dtype)


def train(
    model,
    dataset: list[Sample],
    split_ids: tuple[list[str], list[str]],
    cfg: TrainConfig,
    checkpoint_path: Path | str | None = None,
    config_echo: dict | None = None,
) -> list[dict]:
    """Train on the subjects in split_ids[0], validate on split_ids[1].

    Returns per-epoch history rows (epoch, train_loss, val_loss,
    train_acc, val_acc).  The checkpoint with the lowest validation loss
    is written to `checkpoint_path` when given.
    """
    dtype = np.dtype(cfg.dtype)
    if dtype == np.float32:
        cast_model(model, dtype)
    train_ids, val_ids = set(split_ids[0]), set(split_ids[1])
    train_set = [s for s in dataset if s.subject_id in train_ids]
    val_set = [s for s in dataset if s.subject_id in val_ids]
    if not train_set or not val_set:
        raise TrainingError(
            f"empty split: {len(train_set)} train / {len(val_set)} val samples"
        )
    params = model.registry()
    state = AdamState.for_registry(params)
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    best_val = np.inf
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        shuffled = [train_set[i] for i in order]
        losses, correct = [], 0
        for sl in _batches(len(shuffled), cfg.batch_size):
            batch = shuffled[sl]
            images = Tensor(_stack_images(batch, dtype))
            labels = _labels(batch)
            params.zero_grad()
            logits = model.forward(images, train=True)
            loss = cross_entropy(logits, labels)
            loss.backward()
            adam_step(params, state, cfg)
            losses.append(loss.item() * len(batch))
            correct += int((logits.data.argmax(axis=1) == labels).sum())
        train_loss = sum(losses) / len(shuffled)
        train_acc = correct / len(shuffled)
        val_loss, val_acc = _validate(model, val_set, cfg.batch_size, dtype)
        history.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "train_acc": train_acc,
                "val_acc": val_acc,
            }
        )
        if checkpoint_path is not None and val_loss < best_val:
            best_val = val_loss
            meta = dict(config_echo or {})
            meta.update(epoch=epoch, rng_state=rng.bit_generator.state)
            save_checkpoint(checkpoint_path, model, state, meta)
    return history


def _validate(model, val_set, batch_size, dtype) -> tuple[float, float]:
    losses, correct = [], 0
    for sl in _batches(len(val_set), batch_size):
        batch = val_set[sl]
        images = Tensor(_stack_images(batch, dtype))
        labels = _labels(batch)
        logits = model.forward(images, train=False)
        loss = cross_entropy(logits, labels)
        losses.append(loss.item() * len(batch))
        correct += int((logits.data.argmax(axis=1) == labels).sum())
    return sum(losses) / len(val_set), correct / len(val_set)


def history_csv_lines(history: list[dict]) -> list[str]:
    lines = ["epoch,train_loss,val_loss,train_acc,val_acc"]
    for row in history:
        lines.append(
            f"{row['epoch']},{row['train_loss']:.6f},{row['val_loss']:.6f},"
            f"{row['train_acc']:.6f},{row['val_acc']:.6f}"
        )
    return lines


# -- checkpoint container ---------------------------------------------------
#
# magic "EVLC" | version u32 | meta_len u32 | meta JSON (utf-8) |
# n_arrays u32 | per array: name_len u16, name utf-8, dtype u8 (0 = f64,
# 1 = f32), ndim u8, ndim x u32 dims, raw little-endian data.

MAGIC = b"EVLC"
VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODE_FOR = {np.dtype("float64"): 0, np.dtype("float32"): 1}


@dataclass
class Checkpoint:
    version: int
    meta: dict
    arrays: dict[str, np.ndarray]

    def restore_params(self, params: ParamRegistry) -> None:
        """Load parameter values by name; missing names are an error."""
        for name, p in params.items():
            key = f"param.{name}"
            if key not in self.arrays:
                raise CheckpointError(f"checkpoint missing parameter {name!r}")
            arr = self.arrays[key]
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}"
                )
            p.data = arr.copy()  # adopt the stored dtype for exact round-trips

    def restore_buffers(self, model) -> None:
        if not hasattr(model, "buffers"):
            return
        for name, buf in model.buffers():
            key = f"buffer.{name}"
            if key in self.arrays:
                buf[...] = self.arrays[key]

    def adapter_arrays(self) -> dict[str, np.ndarray]:
        return {
            k.removeprefix("param."): v
            for k, v in self.arrays.items()
            if k.startswith("param.") and ".lora" in k
        }


def save_checkpoint(
    path: Path | str, model, state: AdamState | None = None, meta: dict | None = None
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.registry().items():
        arrays[f"param.{name}"] = p.data
    if hasattr(model, "buffers"):
        for name, buf in model.buffers():
            arrays[f"buffer.{name}"] = buf
    if state is not None:
        for name, arr in state.m.items():
            arrays[f"adam.m.{name}"] = arr
        for name, arr in state.v.items():
            arrays[f"adam.v.{name}"] = arr
    meta = dict(meta or {})
    if state is not None:
        meta["adam_t"] = state.t
    write_checkpoint_arrays(path, arrays, meta)


def write_checkpoint_arrays(path: Path | str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True, default=str).encode("utf-8")
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        dt = np.dtype(arr.dtype)
        if dt not in _CODE_FOR:
            raise CheckpointError(f"array {name!r} has unsupported dtype {dt}")
        name_b = name.encode("utf-8")
        blob += struct.pack("<H", len(name_b))
        blob += name_b
        blob += struct.pack("<BB", _CODE_FOR[dt], arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += np.ascontiguousarray(arr).astype(f"<f{dt.itemsize}").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: Path | str) -> Checkpoint:
    data = Path(path).read_bytes()

    def take(n: int, off: int) -> tuple[bytes, int]:
        if off + n > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {off}")
        return data[off : off + n], off + n

    chunk, off = take(4, 0)
    if chunk != MAGIC:
        raise CheckpointError(f"bad magic {chunk!r}")
    chunk, off = take(4, off)
    (version,) = struct.unpack("<I", chunk)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    chunk, off = take(4, off)
    (meta_len,) = struct.unpack("<I", chunk)
    chunk, off = take(meta_len, off)
    meta = json.loads(chunk.decode("utf-8"))
    chunk, off = take(4, off)
    (n_arrays,) = struct.unpack("<I", chunk)
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        chunk, off = take(2, off)
        (name_len,) = struct.unpack("<H", chunk)
        chunk, off = take(name_len, off)
        name = chunk.decode("utf-8")
        if name in arrays:
            raise CheckpointError(f"duplicate array name {name!r}")
        chunk, off = take(2, off)
        code, ndim = struct.unpack("<BB", chunk)
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        chunk, off = take(4 * ndim, off)
        shape = struct.unpack(f"<{ndim}I", chunk)
        dt = _DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        chunk, off = take(nbytes, off)
        arrays[name] = np.frombuffer(chunk, dtype=dt).reshape(shape).copy()
    return Checkpoint(version=version, meta=meta, arrays=arrays)
