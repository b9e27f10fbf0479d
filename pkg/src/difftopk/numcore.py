"""Small numerical core: sparse comparator-layer matrices, stable softmax and
a central-difference gradient checker.

Dense matrices are plain float64 numpy arrays. Layer matrices of a relaxed
comparator network have at most two nonzeros per row and per column, so they
are stored as two gather slots per column, which makes a dense (k, n) times
layer product an O(k n) pair of gathers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class SparseLayerMatrix:
    """n x n matrix with one or two entries per row (and per column)."""

    n: int
    entries: tuple[tuple[int, int, float], ...]
    # column-wise gather form, filled in __post_init__
    _col_rows: np.ndarray = field(init=False, repr=False, compare=False)
    _col_vals: np.ndarray = field(init=False, repr=False, compare=False)
    _row_cols: np.ndarray = field(init=False, repr=False, compare=False)
    _row_vals: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = self.n
        col_rows = np.tile(np.arange(n)[:, None], (1, 2))
        col_vals = np.zeros((n, 2))
        row_cols = np.tile(np.arange(n)[:, None], (1, 2))
        row_vals = np.zeros((n, 2))
        col_fill = np.zeros(n, dtype=int)
        row_fill = np.zeros(n, dtype=int)
        for i, j, v in self.entries:
            if not (0 <= i < n and 0 <= j < n):
                raise ShapeError(f"entry ({i}, {j}) outside {n}x{n}")
            if row_fill[i] == 2 or col_fill[j] == 2:
                raise ValueError("more than two entries in a row or column")
            row_cols[i, row_fill[i]] = j
            row_vals[i, row_fill[i]] = v
            row_fill[i] += 1
            col_rows[j, col_fill[j]] = i
            col_vals[j, col_fill[j]] = v
            col_fill[j] += 1
        if np.any(row_fill == 0):
            raise ValueError("every row needs at least one entry")
        for name, arr in (("_col_rows", col_rows), ("_col_vals", col_vals),
                          ("_row_cols", row_cols), ("_row_vals", row_vals)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def identity(cls, n: int) -> "SparseLayerMatrix":
        return cls(n, tuple((i, i, 1.0) for i in range(n)))

    @classmethod
    def from_comparators(cls, n: int, pairs: Iterable[tuple[int, int]],
                         alphas: Sequence[float],
                         betas: Sequence[float] | None = None) -> "SparseLayerMatrix":
        """Layer matrix of relaxed comparators: rows lo and hi of the pair
        mix with weights (alpha, 1 - alpha) and (1 - alpha, alpha).
        ``betas`` may carry 1 - alpha computed without cancellation."""
        pairs = list(pairs)
        if betas is None:
            betas = [1.0 - float(a) for a in alphas]
        entries = []
        touched = set()
        for (lo, hi), a, c in zip(pairs, alphas, betas):
            a, c = float(a), float(c)
            entries += [(lo, lo, a), (lo, hi, c), (hi, lo, c), (hi, hi, a)]
            touched.update((lo, hi))
        entries += [(i, i, 1.0) for i in range(n) if i not in touched]
        return cls(n, tuple(entries))

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n, self.n))
        for i, j, v in self.entries:
            out[i, j] += v
        return out

    def is_doubly_stochastic(self, atol: float = 1e-12) -> bool:
        d = self.to_dense()
        return bool(np.all(d >= -atol) and np.allclose(d.sum(0), 1.0, atol=atol, rtol=0)
                    and np.allclose(d.sum(1), 1.0, atol=atol, rtol=0))


def matmul_dense_sparse(left: np.ndarray, right: SparseLayerMatrix) -> np.ndarray:
    """Exact product ``left @ right`` for a dense (k, n) ``left``; O(k n)."""
    left = np.asarray(left, dtype=np.float64)
    if left.ndim != 2 or left.shape[1] != right.n:
        raise ShapeError(f"cannot multiply {left.shape} by {right.n}x{right.n}")
    r, v = right._col_rows, right._col_vals
    return left[:, r[:, 0]] * v[:, 0] + left[:, r[:, 1]] * v[:, 1]


def matmul_sparse_dense(left: SparseLayerMatrix, right: np.ndarray) -> np.ndarray:
    """Exact product ``left @ right`` for a dense (n, m) ``right``; O(n m)."""
    right = np.asarray(right, dtype=np.float64)
    if right.ndim != 2 or right.shape[0] != left.n:
        raise ShapeError(f"cannot multiply {left.n}x{left.n} by {right.shape}")
    c, v = left._row_cols, left._row_vals
    return right[c[:, 0]] * v[:, 0, None] + right[c[:, 1]] * v[:, 1, None]


def _check_finite(x: np.ndarray, what: str = "input"):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite {what}")


def logsumexp(z: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    zmax = np.max(z, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(z - zmax), axis=axis, keepdims=True)) + zmax
    return out if keepdims else np.squeeze(out, axis=axis)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_row(v, temperature: float = 1.0) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    _check_finite(v)
    return softmax(v / temperature)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # branch on sign so exp never overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_cross_entropy(s, y: int) -> tuple[float, np.ndarray]:
    """Loss ``-log softmax(s)[y]`` and its gradient w.r.t. ``s``."""
    s = np.asarray(s, dtype=np.float64)
    _check_finite(s, "scores")
    lse = logsumexp(s)
    grad = np.exp(s - lse)
    grad[y] -= 1.0
    return float(lse - s[y]), grad


@dataclass(frozen=True)
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    worst_index: tuple[int, ...]
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)

    def ok(self, rtol: float) -> bool:
        return self.max_rel_err < rtol


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                     step: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        fp = f(x.copy())
        x[idx] = orig - step
        fm = f(x.copy())
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite evaluation at {idx}")
        g[idx] = (fp - fm) / (2 * step)
    return g


def gradcheck(f: Callable[[np.ndarray], tuple[float, np.ndarray]], x,
              step: float = 1e-6, floor: float = 1e-4) -> GradCheckReport:
    """Compare the analytic gradient returned by ``f(x) -> (value, grad)``
    against central differences.

    The relative error of a coordinate is ``|a - d| / max(|a|, |d|, floor)``
    so coordinates whose true gradient is ~0 are judged on absolute error.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    value, analytic = f(x.copy())
    if not np.isfinite(value):
        raise ValueError("non-finite evaluation at x")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    numeric = numeric_gradient(lambda z: f(z)[0], x, step)
    abs_err = np.abs(analytic - numeric)
    rel_err = abs_err / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    worst = np.unravel_index(int(np.argmax(rel_err)), x.shape) if x.size else ()
    return GradCheckReport(float(abs_err.max(initial=0.0)), float(rel_err.max(initial=0.0)),
                           tuple(int(i) for i in worst), analytic, numeric)
