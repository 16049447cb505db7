"""Wasserstein distances between equal-weight point clouds.

All clouds are ``(n, d)`` arrays (a 1-D array is read as ``n`` points in R).
For equal sizes the optimal coupling is a permutation, so W_p reduces to a
linear assignment problem; in one dimension sorting is optimal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DimensionMismatch, SizeMismatch, TooLarge

MAX_ASSIGNMENT_SIZE = 2000


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    points: np.ndarray

    def __post_init__(self):
        pts = as_points(self.points)
        if len(pts) < 1:
            raise ValueError("empirical measure needs at least one point")
        if not np.isfinite(pts).all():
            raise ValueError("empirical measure has non-finite coordinates")
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def mean(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def second_moment(self) -> float:
        return float(np.einsum("ij,ij->", self.points, self.points) / self.size)


def as_points(x) -> np.ndarray:
    if isinstance(x, EmpiricalMeasure):
        return x.points
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2:
        raise ValueError(f"point cloud must be 1-D or 2-D, got shape {pts.shape}")
    return pts


def _pair(a, b, max_size=None):
    a, b = as_points(a), as_points(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"clouds live in R^{a.shape[1]} and R^{b.shape[1]}")
    if a.shape[0] != b.shape[0]:
        raise SizeMismatch(f"clouds have {a.shape[0]} and {b.shape[0]} points")
    if max_size is not None and a.shape[0] > max_size:
        raise TooLarge(f"assignment of size {a.shape[0]} exceeds the limit {max_size}")
    return a, b


def w2_1d(a, b) -> float:
    """Exact W_2 between equal-size clouds in R via order statistics."""
    a, b = _pair(a, b)
    if a.shape[1] != 1:
        raise DimensionMismatch("w2_1d needs one-dimensional clouds")
    diff = np.sort(a[:, 0]) - np.sort(b[:, 0])
    return float(np.sqrt(np.mean(diff * diff)))


def w2_1d_unequal(a, b) -> float:
    """Exact W_2 between equal-weight clouds in R of possibly different sizes.

    Integrates the squared difference of the two quantile functions over the
    merged breakpoints of their step functions.
    """
    a, b = as_points(a), as_points(b)
    if a.shape[1] != 1 or b.shape[1] != 1:
        raise DimensionMismatch("w2_1d_unequal needs one-dimensional clouds")
    xa, xb = np.sort(a[:, 0]), np.sort(b[:, 0])
    na, nb = len(xa), len(xb)
    cuts = np.union1d(np.arange(1, na) / na, np.arange(1, nb) / nb)
    edges = np.concatenate([[0.0], cuts, [1.0]])
    mids = 0.5 * (edges[:-1] + edges[1:])
    ia = np.minimum((mids * na).astype(int), na - 1)
    ib = np.minimum((mids * nb).astype(int), nb - 1)
    diff = xa[ia] - xb[ib]
    return float(np.sqrt(np.sum(np.diff(edges) * diff * diff)))


def cost_matrix(a, b, p: int = 2) -> np.ndarray:
    """Pairwise |a_i - b_j|^p for p in {1, 2}."""
    if a.shape[0] * b.shape[0] * a.shape[1] <= 2_000_000:
        diff = a[:, None, :] - b[None, :, :]
        sq = np.einsum("ijk,ijk->ij", diff, diff)
    else:
        # expanded form keeps memory at O(n^2); loses a few digits for close points
        sq = (np.einsum("ij,ij->i", a, a)[:, None] + np.einsum("ij,ij->i", b, b)[None, :]
              - 2.0 * a @ b.T)
        np.maximum(sq, 0.0, out=sq)
    return sq if p == 2 else np.sqrt(sq)


def optimal_assignment(cost: np.ndarray) -> np.ndarray:
    """Column index matched to each row in a minimum-cost perfect matching."""
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(len(rows), dtype=int)
    out[rows] = cols
    return out


def w2_assignment(a, b, *, max_size: int = MAX_ASSIGNMENT_SIZE) -> float:
    """Exact W_2 between equal-size clouds in any dimension."""
    a, b = _pair(a, b, max_size)
    cost = cost_matrix(a, b, 2)
    perm = optimal_assignment(cost)
    diff = a - b[perm]
    return float(np.sqrt(np.mean(np.einsum("ij,ij->i", diff, diff))))


def w1_assignment(a, b, *, max_size: int = MAX_ASSIGNMENT_SIZE) -> float:
    """Exact W_1 between equal-size clouds: mean matched Euclidean distance."""
    a, b = _pair(a, b, max_size)
    cost = cost_matrix(a, b, 1)
    perm = optimal_assignment(cost)
    return float(np.mean(np.linalg.norm(a - b[perm], axis=1)))


def w2(a, b, *, max_size: int = MAX_ASSIGNMENT_SIZE) -> float:
    """W_2 for equal-size clouds, sorting in 1-D and assignment otherwise."""
    a, b = _pair(a, b)
    if a.shape[1] == 1:
        return w2_1d(a, b)
    return w2_assignment(a, b, max_size=max_size)


def coupling_upper_bound(a, b) -> float:
    """(1/n) sum_k |a_k - b_k|^2: squared cost of the index-wise coupling."""
    a, b = _pair(a, b)
    diff = a - b
    return float(np.mean(np.einsum("ij,ij->i", diff, diff)))
