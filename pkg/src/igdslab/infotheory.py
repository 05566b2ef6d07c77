"""Exact information measures on finite distributions (natural log, nats).

These are plain numpy functions and serve as ground truth for the
variational estimators elsewhere in the package.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .ndnum import LOG_FLOOR, StructuralError

SIMPLEX_TOL = 1e-12


def as_prob_vector(p, tol: float = SIMPLEX_TOL) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise StructuralError(f"probability vector must be 1-D and non-empty, got shape {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise StructuralError("probability vector has negative or non-finite entries")
    if abs(p.sum() - 1.0) > tol:
        raise StructuralError(f"probability vector sums to {p.sum()!r}")
    return p


def _plogp(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def entropy(p) -> float:
    """Shannon entropy with 0·log 0 = 0."""
    p = as_prob_vector(p)
    return float(-_plogp(p).sum())


@dataclass(frozen=True)
class KLResult:
    value: float
    support_violation: bool


def kl_divergence(p, q, floor: float = LOG_FLOOR, detail: bool = False):
    """KL(p || q). Zeros of ``q`` under mass of ``p`` are floored at ``floor``.

    With ``detail=True`` a :class:`KLResult` also reports whether ``p`` put
    mass where ``q`` had none before flooring.
    """
    p, q = as_prob_vector(p), as_prob_vector(q)
    if p.shape != q.shape:
        raise StructuralError(f"KL between shapes {p.shape} and {q.shape}")
    pos = p > 0
    violation = bool(np.any(q[pos] <= 0))
    val = float(np.sum(p[pos] * (np.log(p[pos]) - np.log(np.maximum(q[pos], floor)))))
    return KLResult(val, violation) if detail else val


class DiscreteJoint:
    """Joint table P(X=i, Y=j) with X indexing rows and Y columns."""

    def __init__(self, table, tol: float = SIMPLEX_TOL):
        t = np.asarray(table, dtype=np.float64)
        if t.ndim != 2 or t.size == 0:
            raise StructuralError(f"joint table must be a non-empty matrix, got shape {t.shape}")
        if np.any(t < 0) or not np.all(np.isfinite(t)):
            raise StructuralError("joint table has negative or non-finite entries")
        if abs(t.sum() - 1.0) > tol:
            raise StructuralError(f"joint table sums to {t.sum()!r}")
        self.table = t

    @classmethod
    def from_counts(cls, counts) -> DiscreteJoint:
        c = np.asarray(counts, dtype=np.float64)
        return cls(c / c.sum())

    @classmethod
    def from_samples(cls, x, y, nx: int | None = None, ny: int | None = None) -> DiscreteJoint:
        x, y = np.asarray(x, dtype=int), np.asarray(y, dtype=int)
        nx = nx or int(x.max()) + 1
        ny = ny or int(y.max()) + 1
        counts = np.zeros((nx, ny))
        np.add.at(counts, (x, y), 1.0)
        return cls.from_counts(counts)

    @property
    def px(self) -> np.ndarray:
        return self.table.sum(axis=1)

    @property
    def py(self) -> np.ndarray:
        return self.table.sum(axis=0)

    def h_x(self) -> float:
        return float(-_plogp(self.px).sum())

    def h_y(self) -> float:
        return float(-_plogp(self.py).sum())

    def h_xy(self) -> float:
        return float(-_plogp(self.table).sum())


def mutual_information(j: DiscreteJoint) -> float:
    return j.h_x() + j.h_y() - j.h_xy()


def conditional_entropy(j: DiscreteJoint) -> float:
    """H(X | Y)."""
    return j.h_xy() - j.h_y()


def push_forward(j: DiscreteJoint, mapping: Sequence[int] | Callable[[int], int]) -> DiscreteJoint:
    """Joint of (g(X), Y) for a deterministic map g on X's outcome indices."""
    n = j.table.shape[0]
    g = np.array([mapping(i) for i in range(n)] if callable(mapping) else mapping, dtype=int)
    if g.shape != (n,):
        raise StructuralError("mapping must assign an image to every X outcome")
    out = np.zeros((int(g.max()) + 1, j.table.shape[1]))
    for i in range(n):
        out[g[i]] += j.table[i]
    return DiscreteJoint(out)


def split_outcome(p, index: int, fraction: float) -> np.ndarray:
    """Replace outcome ``index`` by two outcomes carrying ``fraction`` and ``1-fraction`` of its mass."""
    p = as_prob_vector(p)
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    m = p[index]
    return np.concatenate([p[:index], [fraction * m, (1 - fraction) * m], p[index + 1:]])


def softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def invert_softmax(s) -> np.ndarray:
    """Recover the zero-mean preimage of a softmax output (log, then center)."""
    ls = np.log(np.asarray(s, dtype=np.float64))
    return ls - ls.mean(axis=-1, keepdims=True)


def shifted_mean(rows: np.ndarray) -> np.ndarray:
    """Row mean computed as rows[0] + mean(rows - rows[0]).

    Identical rows give back rows[0] bit for bit, which keeps collapsed
    classes at exactly zero divergence.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] == 0:
        raise StructuralError("mean of an empty batch")
    return rows[0] + np.mean(rows - rows[0], axis=0)


def mean_kl_to_centroid(batch, centroid=None) -> float:
    """(1/n) Σ KL(p_i || centroid); the centroid defaults to the batch mean."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise StructuralError("mean_kl_to_centroid needs a non-empty 2-D batch")
    c = shifted_mean(batch) if centroid is None else as_prob_vector(centroid)
    return float(np.mean([kl_divergence(p, c) for p in batch]))


def load_joint(path) -> DiscreteJoint:
    """Read a whitespace separated matrix (rows = X outcomes). Unnormalized tables are normalized."""
    table = np.loadtxt(Path(path), ndmin=2)
    if np.any(table < 0):
        raise StructuralError(f"{path}: negative entries in joint table")
    return DiscreteJoint(table / table.sum())


def summarize(j: DiscreteJoint) -> dict[str, float]:
    return {
        "H(X)": j.h_x(),
        "H(Y)": j.h_y(),
        "H(X,Y)": j.h_xy(),
        "I(X;Y)": mutual_information(j),
        "H(X|Y)": conditional_entropy(j),
    }
