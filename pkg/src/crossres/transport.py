"""Exact optimal transport between pooled label and prediction rows.

With equal uniform marginals the problem reduces to a linear assignment:
an optimal extreme point of the Birkhoff polytope is a permutation matrix
scaled by 1/N. ``solve_exact`` is a dense shortest-augmenting-path solver
with two diagonal preferences layered on top:

* a tiny diagonal discount (1e-12 of the cost scale) steers the pivot
  choice toward i -> i among near-equal alternatives, which keeps blocks
  with duplicate signatures matched to themselves;
* if the identity assignment achieves the optimal cost, it is returned
  outright.

``solve_oracle`` is the independent cross-check built on scipy's
linear_sum_assignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .tensor import ContractError, NumericError, ShapeError

MARGINAL_TOL = 1e-8
_DIAG_DISCOUNT = 1e-12

__all__ = ["CostMatrix", "TransportPlan", "cost_matrix", "solve_exact", "solve_oracle"]


@dataclass
class CostMatrix:
    values: np.ndarray
    metric: str = "sqeuclidean"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeError(f"cost matrix must be square, got {v.shape}")
        if not np.isfinite(v).all():
            raise NumericError("cost matrix contains non-finite entries")
        if (v < 0).any():
            raise ContractError("cost matrix must be nonnegative")
        self.values = v

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class TransportPlan:
    gamma: np.ndarray
    a: np.ndarray
    b: np.ndarray

    @property
    def n(self) -> int:
        return self.gamma.shape[0]

    def cost(self, c: CostMatrix | np.ndarray) -> float:
        values = c.values if isinstance(c, CostMatrix) else np.asarray(c)
        return float((self.gamma * values).sum())

    def check_marginals(self, tol: float = MARGINAL_TOL):
        if (self.gamma < 0).any():
            raise ContractError("transport plan has negative mass")
        row = self.gamma.sum(axis=1)
        col = self.gamma.sum(axis=0)
        if np.abs(row - self.a).max() > tol or np.abs(col - self.b).max() > tol:
            raise ContractError("transport plan violates its marginals")


def cost_matrix(y_rows: np.ndarray, o_rows: np.ndarray) -> CostMatrix:
    """Pairwise squared Euclidean distances between two N x K row sets."""
    y = np.asarray(y_rows, dtype=np.float64)
    o = np.asarray(o_rows, dtype=np.float64)
    if y.ndim != 2 or o.ndim != 2 or y.shape != o.shape:
        raise ShapeError(f"row sets must share an (N, K) shape, got {y.shape} and {o.shape}")
    diff = y[:, None, :] - o[None, :, :]
    return CostMatrix((diff * diff).sum(axis=2))


def _uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def _check_uniform_marginals(n, a, b):
    a = _uniform(n) if a is None else np.asarray(a, dtype=np.float64)
    b = _uniform(n) if b is None else np.asarray(b, dtype=np.float64)
    if a.shape != (n,) or b.shape != (n,):
        raise ShapeError(f"marginals must have shape ({n},)")
    if abs(a.sum() - b.sum()) > 1e-9:
        raise ContractError(f"marginal masses differ: {a.sum()} vs {b.sum()}")
    if np.abs(a - 1.0 / n).max() > 1e-12 or np.abs(b - 1.0 / n).max() > 1e-12:
        raise ContractError("only uniform 1/N marginals are supported")
    return a, b


def _assignment_min_cost(c: np.ndarray) -> np.ndarray:
    """Dense shortest-augmenting-path assignment; returns col_of_row."""
    n = c.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of = np.zeros(n + 1, dtype=np.int64)  # row matched to each column, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    # 1-based columns; column 0 is the virtual start of each augmenting path
    cpad = np.empty((n + 1, n + 1))
    cpad[1:, 1:] = c
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used
            cur = cpad[i0, :] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            masked = np.where(free, minv, np.inf)
            j1 = int(masked.argmin())
            delta = masked[j1]
            u[row_of[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        col_of_row[row_of[j] - 1] = j - 1
    return col_of_row


def _plan_from_assignment(cols: np.ndarray, n: int) -> TransportPlan:
    gamma = np.zeros((n, n))
    gamma[np.arange(n), cols] = 1.0 / n
    return TransportPlan(gamma, _uniform(n), _uniform(n))


def solve_exact(c: CostMatrix | np.ndarray, a: np.ndarray | None = None,
                b: np.ndarray | None = None) -> TransportPlan:
    """Minimize <gamma, C> over plans with uniform marginals.

    Ties are resolved toward the diagonal: the assignment search runs on a
    diagonal-discounted copy of C, and whenever the identity reaches the
    optimal cost the identity plan is returned.
    """
    if not isinstance(c, CostMatrix):
        c = CostMatrix(c)
    n = c.n
    _check_uniform_marginals(n, a, b)
    scale = max(1.0, float(np.abs(c.values).max()))
    biased = c.values.copy()
    np.fill_diagonal(biased, biased.diagonal() - _DIAG_DISCOUNT * scale)
    cols = _assignment_min_cost(biased)
    best = float(c.values[np.arange(n), cols].sum())
    diag = float(c.values.trace())
    if diag <= best + _DIAG_DISCOUNT * scale * n:
        cols = np.arange(n)
    return _plan_from_assignment(cols, n)


def solve_oracle(c: CostMatrix | np.ndarray) -> TransportPlan:
    """Reference assignment via scipy; small instances only."""
    if not isinstance(c, CostMatrix):
        c = CostMatrix(c)
    if c.n > 10:
        raise ContractError(f"oracle refuses N={c.n} > 10")
    rows, cols = linear_sum_assignment(c.values)
    order = np.argsort(rows)
    return _plan_from_assignment(cols[order], c.n)
