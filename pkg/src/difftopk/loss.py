"""Top-k cross-entropy over a distribution of k, with the softmax/top-k split
and top-m truncation used for training."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .diffrank import OperatorConfig, default_network, relaxed_topk
from .numcore import logsumexp

PROB_FLOOR = 1e-12
LOSS_MODES = ("pure-topk", "sm+topk", "softmax")


@dataclass(frozen=True)
class RankDistribution:
    """Weights P_K(k) for k = 1..K_max (stored zero-based)."""

    weights: tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("pk must be a non-empty list of reals")
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise ValueError("pk entries must be finite and non-negative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"pk must sum to 1, got {w.sum():.12g}")
        object.__setattr__(self, "weights", tuple(float(v) for v in w))

    @classmethod
    def parse(cls, values: Sequence[float], name: str = "pk") -> "RankDistribution":
        """Validate to 1e-6 and renormalise, as for config-file input."""
        w = np.asarray(list(values), dtype=np.float64)
        if w.size == 0 or np.any(~np.isfinite(w)) or np.any(w < 0):
            raise ValueError(f"{name}: entries must be finite and non-negative")
        total = w.sum()
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"{name}: weights sum to {total:.6g}, expected 1")
        return cls(tuple(w / total))

    @classmethod
    def top(cls, k: int) -> "RankDistribution":
        return cls(tuple([0.0] * (k - 1) + [1.0]))

    @property
    def k_max(self) -> int:
        nz = np.nonzero(self.weights)[0]
        return int(nz[-1]) + 1

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True)
class PerClassRankDistributions:
    default: RankDistribution
    per_class: Mapping[int, RankDistribution] = field(default_factory=dict)

    def for_class(self, c: int) -> RankDistribution:
        return self.per_class.get(int(c), self.default)

    @property
    def k_max(self) -> int:
        return max([self.default.k_max] + [d.k_max for d in self.per_class.values()])


def rank_weights(pk: RankDistribution) -> np.ndarray:
    """w_m = sum_{k >= m} P_K(k), a reverse cumulative sum."""
    return np.cumsum(np.asarray(pk.weights)[::-1])[::-1].copy()


def _weights_for(pk, y: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample rank weights (B, K) and P_K(1) (B,)."""
    if isinstance(pk, PerClassRankDistributions):
        rows = [_pad(rank_weights(pk.for_class(c)), K) for c in y]
        p1 = [pk.for_class(c).weights[0] for c in y]
        return np.array(rows), np.array(p1)
    w = _pad(rank_weights(pk), K)
    return np.tile(w, (len(y), 1)), np.full(len(y), pk.weights[0])


def _pad(w: np.ndarray, K: int) -> np.ndarray:
    out = np.zeros(K)
    m = min(K, len(w))
    out[:m] = w[:m]
    return out


def _k_max(pk) -> int:
    return pk.k_max


def _weighted_log(P: np.ndarray, cols: np.ndarray, W: np.ndarray):
    """-log(sum_m W[b, m] P[b, m, cols[b]]) and its gradient w.r.t. P."""
    B, K, n = P.shape
    col = P[np.arange(B), :, cols]                       # (B, K)
    inner = np.sum(W * col, axis=1)
    clamped = inner < PROB_FLOOR
    loss = -np.log(np.maximum(inner, PROB_FLOOR))
    dP = np.zeros_like(P)
    dcol = np.where(clamped[:, None], 0.0, -W / np.where(clamped, 1.0, inner)[:, None])
    dP[np.arange(B), :, cols] = dcol
    return loss, dP


def topk_ce_loss(P, y: int, pk: RankDistribution) -> tuple[float, np.ndarray]:
    """Expected top-k cross-entropy for one sample; ``P`` has >= K_max rows."""
    P = np.asarray(P, dtype=np.float64)
    K, n = P.shape
    if not 0 <= y < n:
        raise ValueError(f"label {y} out of range for {n} classes")
    if K < pk.k_max:
        raise ValueError(f"P has {K} rows but pk needs {pk.k_max}")
    W = _pad(rank_weights(pk), K)[None]
    loss, dP = _weighted_log(P[None], np.array([y]), W)
    return float(loss[0]), dP[0]


def softmax_ce_batch(S: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lse = logsumexp(S, axis=1)
    grad = np.exp(S - lse[:, None])
    grad[np.arange(len(y)), y] -= 1.0
    return lse - S[np.arange(len(y)), y], grad


def _sm_topk_batch(S, P, cols, y, pk):
    """Softmax CE on full scores plus the k >= 2 part of the top-k CE.

    Returns per-sample losses, dS and dP.
    """
    K = P.shape[1]
    W, p1 = _weights_for(pk, y, K)
    ce, dS = softmax_ce_batch(S, y)
    loss = p1 * ce
    dS = dS * p1[:, None]
    dP = np.zeros_like(P)
    # weights of sum_{k>=2} P_K(k) sum_{m<=k}: w_1 loses the P_K(1) term
    W2 = W.copy()
    W2[:, 0] -= p1
    active = (1.0 - p1) > 0
    if np.any(active):
        l2, d2 = _weighted_log(P[active], cols[active], W2[active])
        scale = (1.0 - p1[active])
        loss[active] += scale * l2
        dP[active] = d2 * scale[:, None, None]
    return loss, dS, dP


def sm_topk_loss(s, P, y: int, pk: RankDistribution):
    """P_K(1) * softmax CE + (1 - P_K(1)) * top-k CE over the k >= 2 weights.

    Returns (loss, gradient w.r.t. s, gradient w.r.t. P).
    """
    s = np.asarray(s, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if not 0 <= y < s.size:
        raise ValueError(f"label {y} out of range for {s.size} classes")
    loss, dS, dP = _sm_topk_batch(s[None], P[None], np.array([y]), np.array([y]), pk)
    return float(loss[0]), dS[0], dP[0]


@dataclass(frozen=True)
class TruncationResult:
    selected_indices: np.ndarray
    sub_scores: np.ndarray
    label_position: int


def _truncate_batch(S: np.ndarray, y: np.ndarray, m: int):
    B, n = S.shape
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    order = np.argsort(-S, axis=1, kind="stable")[:, :m]
    missing = ~np.any(order == y[:, None], axis=1)
    order[missing, m - 1] = y[missing]
    sub = np.take_along_axis(S, order, axis=1)
    # re-sort by (descending score, class index)
    resort = np.lexsort((order, -sub), axis=1)
    order = np.take_along_axis(order, resort, axis=1)
    sub = np.take_along_axis(sub, resort, axis=1)
    pos = np.argmax(order == y[:, None], axis=1)
    return order, sub, pos


def truncate_topm(s, y: int, m: int) -> TruncationResult:
    """Keep the m highest-scoring classes, forcing the label in by replacing
    the lowest of them."""
    s = np.asarray(s, dtype=np.float64)
    idx, sub, pos = _truncate_batch(s[None], np.array([y]), m)
    return TruncationResult(idx[0], sub[0], int(pos[0]))


def default_m(n: int) -> int:
    return min(n, 16 if n <= 1000 else 50)


def batch_loss(S, y, pk, cfg: OperatorConfig, m: int | None = None, mode: str = "sm+topk"):
    """Per-sample losses and gradients w.r.t. the scores for a batch.

    ``S`` is (B, n), ``y`` (B,). The ranking operator only sees the top-m
    truncated scores; the softmax term always uses all n.
    """
    S = np.asarray(S, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    B, n = S.shape
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}")
    if np.any((y < 0) | (y >= n)):
        raise ValueError("label out of range")
    if not np.all(np.isfinite(S)):
        raise ValueError("non-finite scores")
    if mode == "softmax":
        return softmax_ce_batch(S, y)
    K = _k_max(pk)
    m = default_m(n) if m is None else m
    if m < K:
        raise ValueError(f"m={m} is smaller than the largest k={K}")
    if mode == "sm+topk":
        W, p1 = _weights_for(pk, y, K)
        if np.all(p1 >= 1.0):
            return softmax_ce_batch(S, y)
    idx, sub, pos = _truncate_batch(S, y, m)
    net = default_network(cfg, m, K) if cfg.operator == "diffsortnet" else None
    P, tape = relaxed_topk(sub, cfg, K, net=net)
    if mode == "pure-topk":
        W, _ = _weights_for(pk, y, K)
        loss, dP = _weighted_log(P, pos, W)
        dS = np.zeros_like(S)
    else:
        loss, dS, dP = _sm_topk_batch(S, P, pos, y, pk)
    dsub = tape.backward(dP)
    np.add.at(dS, (np.repeat(np.arange(B), m), idx.ravel()), dsub.ravel())
    return loss, dS


def loss_forward_backward(s, y: int, pk, cfg: OperatorConfig, m: int | None = None,
                          mode: str = "sm+topk") -> tuple[float, np.ndarray]:
    s = np.asarray(s, dtype=np.float64)
    loss, grad = batch_loss(s[None], np.array([y]), pk, cfg, m, mode)
    return float(loss[0]), grad[0]
