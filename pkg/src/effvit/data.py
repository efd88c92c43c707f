"""Slice pipeline, splits, augmentation and the synthetic dataset.

Volumes go pad -> normalize -> slice; each axial slice is replicated
into three identical channels.  Splitting is always at subject level,
so slice leakage between partitions is structurally impossible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nifti import Volume

__all__ = [
    "CLASSES",
    "Sample",
    "SplitPlan",
    "pad_volume",
    "normalize_volume",
    "extract_slices",
    "rotate",
    "balance_augment",
    "make_holdout_split",
    "make_kfold_split",
    "synth_generate",
    "write_dataset",
    "load_dataset",
]

CLASSES = ("CN", "MCI", "AD")
CLASS_INDEX = {c: i for i, c in enumerate(CLASSES)}


class PipelineError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # [3, S, S]; the 3 channels are identical replicas
    label: str  # "CN" | "MCI" | "AD"
    subject_id: str
    slice_index: int = 0

    @property
    def label_index(self) -> int:
        return CLASS_INDEX[self.label]


@dataclass
class SplitPlan:
    mode: str  # "holdout" | "kfold"
    seed: int
    ratio: float | None = None
    k: int | None = None
    stratified: bool = True
    # holdout: {"train": [...], "val": [...]}; kfold: {"fold0": [...], ...}
    assignments: dict[str, list[str]] = field(default_factory=dict)

    def partitions(self) -> list[list[str]]:
        return list(self.assignments.values())


# -- volume pipeline -----------------------------------------------------------


def _pad_amounts(n: int, target: int) -> tuple[int, int]:
    deficit = target - n
    return deficit // 2, deficit - deficit // 2  # odd deficit: extra at the end


def pad_volume(v: Volume, target: int = 224) -> Volume:
    """Zero-pad every axis symmetrically up to `target`."""
    if any(d > target for d in v.dims):
        raise PipelineError(f"volume dims {v.dims} exceed target {target}")
    pads = tuple(_pad_amounts(d, target) for d in v.dims)
    return Volume(
        voxels=np.pad(v.voxels, pads),
        datatype=v.datatype,
        scl_slope=v.scl_slope,
        scl_inter=v.scl_inter,
    )


def normalize_volume(v: Volume) -> Volume:
    """(x - mean) / population std over all voxels."""
    mu = v.voxels.mean()
    sd = v.voxels.std()
    if sd == 0.0:
        raise PipelineError("volume has zero variance; cannot normalize")
    return Volume(
        voxels=(v.voxels - mu) / sd,
        datatype=v.datatype,
        scl_slope=v.scl_slope,
        scl_inter=v.scl_inter,
    )


def extract_slices(v: Volume, subject_id: str, label: str, n: int = 4) -> list[Sample]:
    """Take n consecutive middle axial slices, replicated to 3 channels.

    Axial indices are centered at floor(Z/2): for n = 4 the offsets are
    -2, -1, 0, +1.
    """
    z = v.dims[2]
    if z < n:
        raise PipelineError(f"axial extent {z} < requested {n} slices")
    center = z // 2
    first = center - n // 2
    samples = []
    for j in range(n):
        sl = v.voxels[:, :, first + j]
        img = np.repeat(sl[None, :, :], 3, axis=0)
        samples.append(Sample(image=img, label=label, subject_id=subject_id, slice_index=first + j))
    return samples


def rotate(img: np.ndarray, angle_degrees: float) -> np.ndarray:
    """Rotate [C,H,W] (or [H,W]) about the image center, bilinear, OOB = 0."""
    if abs(angle_degrees) > 180:
        raise PipelineError(f"|angle| must be <= 180, got {angle_degrees}")
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    C, H, W = img.shape
    theta = np.deg2rad(angle_degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(H) - cy, np.arange(W) - cx, indexing="ij")
    # inverse map: output pixel -> source coordinate
    src_y = cos * yy + sin * xx + cy
    src_x = -sin * yy + cos * xx + cx
    # snap near-integer coordinates so exact multiples of 90 deg permute pixels
    src_y = np.where(np.abs(src_y - np.rint(src_y)) < 1e-9, np.rint(src_y), src_y)
    src_x = np.where(np.abs(src_x - np.rint(src_x)) < 1e-9, np.rint(src_x), src_x)
    y0 = np.floor(src_y).astype(np.intp)
    x0 = np.floor(src_x).astype(np.intp)
    fy = src_y - y0
    fx = src_x - x0

    out = np.zeros_like(img, dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            ys, xs = y0 + dy, x0 + dx
            inside = (ys >= 0) & (ys < H) & (xs >= 0) & (xs < W)
            w = (fy if dy else 1 - fy) * (fx if dx else 1 - fx)
            ysc = np.clip(ys, 0, H - 1)
            xsc = np.clip(xs, 0, W - 1)
            out += img[:, ysc, xsc] * (w * inside)
    return out[0] if squeeze else out


def balance_augment(dataset: list[Sample], minority_class: str, seed: int) -> list[Sample]:
    """Append rotated copies (uniform angle in [-5, +5] deg) of the
    minority class until its count reaches the largest class count.

    Originals are never mutated or removed.
    """
    counts = {c: sum(1 for s in dataset if s.label == c) for c in CLASSES}
    if counts.get(minority_class, 0) == 0:
        raise PipelineError(f"minority class {minority_class!r} not present")
    target = max(counts.values())
    need = target - counts[minority_class]
    if need <= 0:
        return list(dataset)
    rng = np.random.default_rng(seed)
    pool = [s for s in dataset if s.label == minority_class]
    out = list(dataset)
    for i in range(need):
        src = pool[i % len(pool)]
        angle = rng.uniform(-5.0, 5.0)
        out.append(
            Sample(
                image=rotate(src.image, angle),
                label=src.label,
                subject_id=src.subject_id,
                slice_index=src.slice_index,
            )
        )
    return out


# -- splitting -------------------------------------------------------------


def _by_class(subjects: list[tuple[str, str]]) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for sid, label in subjects:
        groups.setdefault(label, []).append(sid)
    return groups


def make_holdout_split(
    subjects: list[tuple[str, str]], ratio: float = 0.8, seed: int = 0
) -> SplitPlan:
    """Stratified subject-level holdout; train size = round(ratio * N).

    Per-class train counts are floor(ratio * n_c) plus largest-remainder
    top-up, so each class is within one subject of its exact share.
    """
    groups = _by_class(subjects)
    n = len(subjects)
    n_train = int(np.floor(ratio * n + 0.5))
    rng = np.random.default_rng(seed)
    base: dict[str, int] = {}
    remainders: list[tuple[float, str]] = []
    for label in sorted(groups):
        exact = ratio * len(groups[label])
        base[label] = int(np.floor(exact))
        remainders.append((exact - base[label], label))
    short = n_train - sum(base.values())
    for _, label in sorted(remainders, key=lambda t: (-t[0], t[1]))[:short]:
        base[label] += 1
    train, val = [], []
    for label in sorted(groups):
        ids = sorted(groups[label])
        rng.shuffle(ids)
        train.extend(ids[: base[label]])
        val.extend(ids[base[label] :])
    return SplitPlan(
        mode="holdout",
        seed=seed,
        ratio=ratio,
        assignments={"train": sorted(train), "val": sorted(val)},
    )


def make_kfold_split(
    subjects: list[tuple[str, str]], k: int = 5, seed: int = 0
) -> SplitPlan:
    """Stratified subject-level k-fold partition (round-robin per class)."""
    if k < 2:
        raise PipelineError(f"k must be >= 2, got {k}")
    groups = _by_class(subjects)
    for label, ids in groups.items():
        if len(ids) < k:
            raise PipelineError(f"class {label!r} has {len(ids)} subjects < k = {k}")
    rng = np.random.default_rng(seed)
    folds: list[list[str]] = [[] for _ in range(k)]
    for label in sorted(groups):
        ids = sorted(groups[label])
        rng.shuffle(ids)
        for i, sid in enumerate(ids):
            folds[i % k].append(sid)
    return SplitPlan(
        mode="kfold",
        seed=seed,
        k=k,
        assignments={f"fold{i}": sorted(f) for i, f in enumerate(folds)},
    )


# -- synthetic dataset -----------------------------------------------------


# cavity radius as a fraction of image size; ordered CN < MCI < AD to mimic
# ventricular enlargement
_CAVITY_FRACTION = {"CN": 0.06, "MCI": 0.16, "AD": 0.26}
_NOISE_STD = 0.08


def synth_generate(
    n_per_class: int, seed: int, size: int = 32, return_params: bool = False
):
    """Procedural 3-class stand-in dataset.

    Each image is an ellipse ("brain") with a central cavity whose
    radius depends on the class, plus jitter and Gaussian noise, then
    normalized to zero mean / unit variance and replicated across three
    channels.  Deterministic per seed.
    """
    if size < 16:
        raise PipelineError(f"size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    samples: list[Sample] = []
    params: list[dict] = []
    for label in CLASSES:
        for i in range(n_per_class):
            cy = (size - 1) / 2.0 + rng.uniform(-1.0, 1.0)
            cx = (size - 1) / 2.0 + rng.uniform(-1.0, 1.0)
            a = 0.42 * size * (1.0 + rng.uniform(-0.05, 0.05))
            b = 0.36 * size * (1.0 + rng.uniform(-0.05, 0.05))
            cavity_r = size * (_CAVITY_FRACTION[label] + rng.uniform(-0.015, 0.015))
            brain = (((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2) <= 1.0
            cavity = ((yy - cy) ** 2 + (xx - cx) ** 2) <= cavity_r**2
            img = np.where(brain, 1.0, 0.0)
            img = np.where(cavity & brain, 0.15, img)
            img = img + rng.normal(0.0, _NOISE_STD, size=img.shape)
            img = (img - img.mean()) / img.std()
            image = np.repeat(img[None], 3, axis=0)
            samples.append(
                Sample(image=image, label=label, subject_id=f"synth-{label}-{i:04d}")
            )
            params.append({"label": label, "cavity_radius": cavity_r})
    if return_params:
        return samples, params
    return samples


# -- manifest IO -----------------------------------------------------------


def write_dataset(directory: Path | str, samples: list[Sample]) -> Path:
    """Write samples as .npy files plus a manifest CSV; returns its path.

    Manifest columns: subject_id,label,path (UTF-8, LF line endings);
    paths are relative to the manifest's directory.
    """
    directory = Path(directory)
    img_dir = directory / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with open(manifest, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["subject_id", "label", "path"])
        for s in samples:
            rel = f"images/{s.subject_id}_s{s.slice_index:03d}.npy"
            np.save(directory / rel, s.image)
            writer.writerow([s.subject_id, s.label, rel])
    return manifest


def load_dataset(manifest: Path | str) -> list[Sample]:
    manifest = Path(manifest)
    base = manifest.parent
    samples = []
    with open(manifest, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        required = {"subject_id", "label", "path"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise PipelineError(f"manifest {manifest} missing columns {required}")
        for row in reader:
            if row["label"] not in CLASS_INDEX:
                raise PipelineError(f"unknown label {row['label']!r} in {manifest}")
            img = np.load(base / row["path"])
            stem = Path(row["path"]).stem
            slice_idx = int(stem.rsplit("_s", 1)[1]) if "_s" in stem else 0
            samples.append(
                Sample(
                    image=img,
                    label=row["label"],
                    subject_id=row["subject_id"],
                    slice_index=slice_idx,
                )
            )
    return samples
