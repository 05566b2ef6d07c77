"""Labeled datasets, the synthetic Gaussian-mixture generator and the text file format.

File layout::

    n d C
    x_1 ... x_d label        (n rows)
    key=value                (provenance, distilled sets only)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ndnum import StructuralError


@dataclass
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=int)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise StructuralError(f"samples {self.x.shape} and labels {self.y.shape} disagree")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise StructuralError("label outside [0, n_classes)")

    def __len__(self) -> int:
        return self.y.size

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)

    def subset(self, idx) -> LabeledDataset:
        idx = np.asarray(idx, dtype=int)
        return LabeledDataset(self.x[idx], self.y[idx], self.n_classes, dict(self.meta))


@dataclass
class DistilledSet(LabeledDataset):
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        super().__post_init__()
        ipc = self.provenance.get("ipc")
        if ipc is not None and len(self):
            counts = self.class_counts()
            counts = counts[counts > 0]  # sets may cover a subset of the classes
            if np.any(counts != int(ipc)):
                raise StructuralError(f"distilled set must hold {ipc} samples per class, got {counts.tolist()}")


def class_centers(n_classes: int, separation: float) -> np.ndarray:
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    return separation * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def make_synthetic_dataset(
    n_classes: int,
    modes_per_class: int,
    n_per_class: int,
    separation: float,
    rng: np.random.Generator,
    mode_offset: float = 0.6,
    mode_std: float = 0.15,
) -> LabeledDataset:
    """Balanced 2-D Gaussian mixture.

    Class centers sit on a circle of radius ``separation``. Each class owns
    ``modes_per_class`` modes scattered around its center at distance
    ``mode_offset``; samples pick a mode uniformly and add isotropic noise of
    scale ``mode_std``.
    """
    if n_classes < 2 or modes_per_class < 1:
        raise StructuralError("need n_classes >= 2 and modes_per_class >= 1")
    centers = class_centers(n_classes, separation)
    modes = np.zeros((n_classes, modes_per_class, 2))
    for c in range(n_classes):
        if modes_per_class == 1:
            modes[c, 0] = centers[c]
            continue
        phase = rng.uniform(0, 2 * np.pi)
        ang = phase + 2 * np.pi * np.arange(modes_per_class) / modes_per_class
        modes[c] = centers[c] + mode_offset * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    xs, ys = [], []
    for c in range(n_classes):
        which = rng.integers(0, modes_per_class, size=n_per_class)
        xs.append(modes[c, which] + mode_std * rng.standard_normal((n_per_class, 2)))
        ys.append(np.full(n_per_class, c))
    meta = {"centers": centers, "modes": modes, "mode_std": mode_std}
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), n_classes, meta)


def sample_like(ref: LabeledDataset, n_per_class: int, rng: np.random.Generator) -> LabeledDataset:
    """Fresh draws from the mixture that generated ``ref``."""
    modes, std = ref.meta["modes"], ref.meta["mode_std"]
    xs, ys = [], []
    for c in range(ref.n_classes):
        which = rng.integers(0, modes.shape[1], size=n_per_class)
        xs.append(modes[c, which] + std * rng.standard_normal((n_per_class, 2)))
        ys.append(np.full(n_per_class, c))
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), ref.n_classes, dict(ref.meta))


def save_dataset(path, data: LabeledDataset) -> None:
    lines = [f"{len(data)} {data.dim} {data.n_classes}"]
    for row, label in zip(data.x, data.y):
        lines.append(" ".join(repr(float(v)) for v in row) + f" {int(label)}")
    if isinstance(data, DistilledSet):
        lines.extend(f"{k}={v}" for k, v in sorted(data.provenance.items()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> LabeledDataset:
    lines = Path(path).read_text().splitlines()
    try:
        n, d, n_classes = (int(v) for v in lines[0].split())
    except (IndexError, ValueError) as exc:
        raise StructuralError(f"{path}: bad header") from exc
    x = np.zeros((n, d))
    y = np.zeros(n, dtype=int)
    for i in range(n):
        parts = lines[1 + i].split()
        if len(parts) != d + 1:
            raise StructuralError(f"{path}: row {i} has {len(parts)} fields, expected {d + 1}")
        x[i] = [float(v) for v in parts[:d]]
        y[i] = int(parts[d])
    prov = {}
    for line in lines[1 + n:]:
        if line.strip():
            key, _, val = line.partition("=")
            prov[key.strip()] = val.strip()
    if prov:
        return DistilledSet(x, y, n_classes, provenance=prov)
    return LabeledDataset(x, y, n_classes)
