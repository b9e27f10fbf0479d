"""Differentiable ranking operators returning relaxed permutation matrices.

All operators take scores of shape ``(n,)`` or ``(B, n)`` and return the
top ``k`` rows of a relaxed permutation matrix, shape ``(k, n)`` or
``(B, k, n)``: entry ``(m, c)`` is the probability that class ``c`` holds
descending rank ``m``. Each forward call also returns a tape whose
``backward(upstream)`` gives the exact gradient of ``<upstream, P>`` with
respect to the scores of that forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numcore import (SparseLayerMatrix, logsumexp, matmul_dense_sparse,
                      matmul_sparse_dense, sigmoid, softmax)
from .selnet import ComparatorNetwork, cached_network

OPERATORS = ("neuralsort", "softsort", "sinkhorn", "diffsortnet")


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 1e-2
    tol: float = 1e-6
    max_iters: int = 500
    scaling_iters: int = 10

    def __post_init__(self):
        if self.epsilon <= 0 or self.tol <= 0 or self.max_iters < 1 or self.scaling_iters < 0:
            raise ValueError("sinkhorn needs epsilon > 0, tol > 0, max_iters >= 1")


@dataclass(frozen=True)
class OperatorConfig:
    operator: str = "sinkhorn"
    temperature: float = 1.0
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    network_kind: str = "splitter-selection"

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ValueError(f"unknown operator {self.operator!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def smoothing(self) -> float:
        """The operator's smoothing knob: epsilon for Sinkhorn, tau otherwise."""
        return self.sinkhorn.epsilon if self.operator == "sinkhorn" else self.temperature

    def with_smoothing(self, value: float) -> "OperatorConfig":
        if self.operator == "sinkhorn":
            return replace(self, sinkhorn=replace(self.sinkhorn, epsilon=value))
        return replace(self, temperature=value)


def _as_batch(s) -> tuple[np.ndarray, bool]:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim not in (1, 2) or s.shape[-1] < 1:
        raise ValueError(f"scores must have shape (n,) or (B, n), got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite scores")
    return np.atleast_2d(s), s.ndim == 1


def _check_k(k: int, n: int):
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")


class Tape:
    """Saved state of one forward pass."""

    shape: tuple[int, ...]
    squeeze: bool

    def backward(self, upstream) -> np.ndarray:
        u = np.asarray(upstream, dtype=np.float64)
        if self.squeeze:
            u = u[None]
        if u.shape != self.shape:
            raise ValueError(f"upstream shape {u.shape} does not match output {self.shape}")
        g = self._backward(u)
        return g[0] if self.squeeze else g

    def _backward(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def backprop(tape: Tape, upstream) -> np.ndarray:
    return tape.backward(upstream)


def _softmax_backward(P: np.ndarray, U: np.ndarray) -> np.ndarray:
    return P * (U - np.sum(U * P, axis=-1, keepdims=True))


# -- NeuralSort ------------------------------------------------------------------------

@dataclass
class NeuralSortTape(Tape):
    s: np.ndarray
    P: np.ndarray
    tau: float
    squeeze: bool

    @property
    def shape(self):
        return self.P.shape

    def _backward(self, U):
        B, k, n = U.shape
        coef = (n + 1 - 2 * np.arange(1, k + 1)).astype(np.float64)
        dz = _softmax_backward(self.P, U) / self.tau
        D = dz.sum(axis=1)                                          # (B, n)
        sgn = np.sign(self.s[:, :, None] - self.s[:, None, :])      # sgn[b, p, j] = sign(s_p - s_j)
        return (np.einsum("bip,i->bp", dz, coef) - D * sgn.sum(axis=2)
                - np.einsum("bj,bpj->bp", D, sgn))


def neuralsort_topk(s, tau: float, k: int):
    """Deterministic NeuralSort, only the first ``k`` rows materialised."""
    S, squeeze = _as_batch(s)
    n = S.shape[1]
    _check_k(k, n)
    # the output is shift invariant; centring keeps the logits small
    S = S - S.mean(axis=1, keepdims=True)
    coef = (n + 1 - 2 * np.arange(1, k + 1)).astype(np.float64)
    A = np.abs(S[:, :, None] - S[:, None, :]).sum(axis=2)
    z = (coef[None, :, None] * S[:, None, :] - A[:, None, :]) / tau
    P = softmax(z)
    tape = NeuralSortTape(S, P, tau, squeeze)
    return (P[0] if squeeze else P), tape


# -- SoftSort --------------------------------------------------------------------------

@dataclass
class SoftSortTape(Tape):
    s: np.ndarray
    order: np.ndarray
    P: np.ndarray
    tau: float
    squeeze: bool

    @property
    def shape(self):
        return self.P.shape

    def _backward(self, U):
        B, k, n = U.shape
        top = np.take_along_axis(self.s, self.order, axis=1)          # (B, k)
        dz = _softmax_backward(self.P, U) / self.tau
        w = dz * np.sign(top[:, :, None] - self.s[:, None, :])
        g = w.sum(axis=1)
        rows = np.repeat(np.arange(B), k)
        np.add.at(g, (rows, self.order.ravel()), -w.sum(axis=2).ravel())
        return g


def softsort_topk(s, tau: float, k: int):
    S, squeeze = _as_batch(s)
    n = S.shape[1]
    _check_k(k, n)
    order = np.argsort(-S, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(S, order, axis=1)
    P = softmax(-np.abs(top[:, :, None] - S[:, None, :]) / tau)
    tape = SoftSortTape(S, order, P, tau, squeeze)
    return (P[0] if squeeze else P), tape


# -- Sinkhorn ----------------------------------------------------------------------------

NEWTON_STEPS = 40          # cap on dual Newton steps after the Sinkhorn iterations
POLISH_TOL = 1e-13         # marginal error the Newton phase aims for
HANDOFF_TOL = 1e-2         # Sinkhorn marginal error at which Newton takes over


def _plan_logits(f, g, C, eps):
    return f[:, :, None] + g[:, None, :] - C / eps


def _marginal_errors(K, n):
    """Largest relative deviation of row and column sums of exp(K) from 1/n."""
    c = -np.log(n)
    rows = np.abs(np.expm1(np.minimum(logsumexp(K, axis=2) - c, 50.0)))
    cols = np.abs(np.expm1(np.minimum(logsumexp(K, axis=1) - c, 50.0)))
    return np.maximum(rows.max(axis=1), cols.max(axis=1))


def _kkt_solve(pi, rhs):
    """Solve the (singular) marginal Jacobian system for vectors orthogonal to
    its null space (1, ..., 1, -1, ..., -1)."""
    B, n, _ = pi.shape
    M = np.zeros((B, 2 * n, 2 * n))
    idx = np.arange(n)
    M[:, idx, idx] = pi.sum(axis=2)
    M[:, n + idx, n + idx] = pi.sum(axis=1)
    M[:, :n, n:] = pi
    M[:, n:, :n] = np.swapaxes(pi, 1, 2)
    v = np.concatenate([np.ones(n), -np.ones(n)]) / np.sqrt(2 * n)
    M += np.outer(v, v)[None] / n
    try:
        return np.linalg.solve(M, rhs[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        # exactly decoupled blocks add null directions; rhs is orthogonal to them
        return np.einsum("bij,bj->bi", np.linalg.pinv(M, hermitian=True), rhs)


def _newton_polish(f, g, C, eps, steps):
    """Newton steps on the entropic dual with backtracking on the marginal error."""
    B, n = f.shape
    err = _marginal_errors(_plan_logits(f, g, C, eps), n)
    taken = 0
    for taken in range(steps):
        todo = err > POLISH_TOL
        if not np.any(todo):
            break
        K = _plan_logits(f[todo], g[todo], C[todo], eps)
        pi = np.exp(K)
        r = np.concatenate([pi.sum(axis=2), pi.sum(axis=1)], axis=1) - 1.0 / n
        with np.errstate(all="ignore"):
            step = -_kkt_solve(pi, r)
        ok = np.all(np.isfinite(step), axis=1)
        best_f, best_g, best_err = f[todo], g[todo], err[todo]
        improved = np.zeros(len(best_err), dtype=bool)
        t = 1.0
        for _ in range(30):
            cand_f = best_f + t * np.where(ok[:, None], step[:, :n], 0.0)
            cand_g = best_g + t * np.where(ok[:, None], step[:, n:], 0.0)
            e = _marginal_errors(_plan_logits(cand_f, cand_g, C[todo], eps), n)
            take = ok & ~improved & (e < best_err)
            best_f = np.where(take[:, None], cand_f, best_f)
            best_g = np.where(take[:, None], cand_g, best_g)
            best_err = np.where(take, e, best_err)
            improved |= take
            if np.all(improved | ~ok):
                break
            t *= 0.5
        f[todo], g[todo], err[todo] = best_f, best_g, best_err
        if not np.any(improved):
            break
    else:
        taken = steps
    return f, g, err, taken


@dataclass
class SinkhornTape(Tape):
    s: np.ndarray
    s_norm: np.ndarray
    span: np.ndarray          # max - min per row, 0 for constant rows
    anchors: np.ndarray
    P: np.ndarray             # full n x n plan, rows sum to 1
    epsilon: float
    k: int
    squeeze: bool
    converged: np.ndarray
    iterations: int           # Sinkhorn iterations at the target epsilon
    newton_steps: int

    @property
    def shape(self):
        return self.P[:, : self.k].shape

    def _backward(self, U):
        # implicit differentiation at the balanced plan pi = P / n
        B, k, n = U.shape
        Ubar = np.zeros((B, n, n))
        Ubar[:, :k] = U * n
        pi = self.P / n
        W = Ubar * pi
        lam = _kkt_solve(pi, np.concatenate([W.sum(axis=2), W.sum(axis=1)], axis=1))
        dC = (lam[:, :n, None] + lam[:, None, n:]) * pi / self.epsilon - W / self.epsilon
        diff = self.anchors[None, :, None] - self.s_norm[:, None, :]
        ds_norm = np.sum(-2.0 * dC * diff, axis=1)                     # (B, n)
        grad = np.zeros((B, n))
        ok = self.span > 0
        if np.any(ok):
            R = self.span[ok]
            dsn = ds_norm[ok]
            sn = self.s_norm[ok]
            g = dsn / R[:, None]
            rows = np.arange(g.shape[0])
            imax = np.argmax(self.s[ok], axis=1)
            imin = np.argmin(self.s[ok], axis=1)
            np.add.at(g, (rows, imax), -np.sum(dsn * sn, axis=1) / R)
            np.add.at(g, (rows, imin), np.sum(dsn * (sn - 1.0), axis=1) / R)
            grad[ok] = g
        return grad


def epsilon_schedule(epsilon: float, stage_iters: int) -> list[float]:
    """Annealing stages epsilon * 2**j, from the first value >= 1 down to 2 epsilon."""
    if stage_iters <= 0 or epsilon >= 1.0:
        return []
    J = int(np.ceil(np.log2(1.0 / epsilon)))
    return [e for j in range(J, 0, -1) for e in [epsilon * 2.0 ** j] * stage_iters]


def sinkhorn_sort(s, epsilon: float = 1e-2, tol: float = 1e-6, max_iters: int = 500,
                  k: int | None = None, scaling_iters: int = 10,
                  newton_steps: int = NEWTON_STEPS):
    """Entropy-regularised OT between min-max normalised scores and a
    descending uniform grid on [0, 1] with squared-distance cost.

    Log-domain Sinkhorn: ``scaling_iters`` warm-up iterations at each of the
    coarser epsilons ``epsilon * 2**j``, then up to ``max_iters`` iterations
    at ``epsilon`` until both marginals are within ``tol``. Nearly
    block-diagonal plans stall plain Sinkhorn, so up to ``newton_steps``
    Newton steps on the dual then balance the plan to near machine
    precision. Returns the row-normalised plan (first ``k`` rows) and a tape
    whose backward differentiates the balanced plan implicitly;
    ``tape.converged`` flags rows whose marginals reached ``tol``.
    """
    S, squeeze = _as_batch(s)
    B, n = S.shape
    k = n if k is None else k
    _check_k(k, n)
    lo, hi = S.min(axis=1, keepdims=True), S.max(axis=1, keepdims=True)
    span = (hi - lo)[:, 0]
    safe = np.where(span > 0, span, 1.0)[:, None]
    s_norm = np.where(span[:, None] > 0, (S - lo) / safe, 0.5)
    anchors = 1.0 - np.arange(n) / (n - 1) if n > 1 else np.array([0.5])
    C = (anchors[None, :, None] - s_norm[:, None, :]) ** 2
    c = -np.log(n)
    # potentials in cost units: plan = exp((F_i + G_j - C_ij) / eps)
    F = np.zeros((B, n))
    G = np.zeros((B, n))

    def step(e):
        nonlocal F, G
        F = e * (c - logsumexp((G[:, None, :] - C) / e, axis=2))
        G = e * (c - logsumexp((F[:, :, None] - C) / e, axis=1))

    for e in epsilon_schedule(epsilon, scaling_iters):
        step(e)
    target = max(tol, HANDOFF_TOL) if newton_steps > 0 else tol
    iters = 0
    for iters in range(1, max_iters + 1):
        step(epsilon)
        if np.all(_marginal_errors(_plan_logits(F / epsilon, G / epsilon, C, epsilon), n) < target):
            break
    f, g, err, polished = _newton_polish(F / epsilon, G / epsilon, C, epsilon, newton_steps)
    P = softmax(g[:, None, :] - C / epsilon, axis=2)
    tape = SinkhornTape(S, s_norm, span, anchors, P, epsilon, k, squeeze, err < tol, iters,
                        polished)
    out = P[:, :k]
    return (out[0] if squeeze else out), tape


# -- differentiable sorting networks ---------------------------------------------------------

@dataclass
class SortNetTape(Tape):
    net: ComparatorNetwork
    alphas: list              # per layer, (B, c_l)
    betas: list               # 1 - alpha, computed without cancellation
    diffs: list               # per layer, x_lo - x_hi before the layer
    backs: list               # A_{l+1}: the (B, k, n) product of the layers after l
    P: np.ndarray
    tau: float
    squeeze: bool

    @property
    def shape(self):
        return self.P.shape

    def layer_matrices(self, b: int = 0) -> list[SparseLayerMatrix]:
        return [SparseLayerMatrix.from_comparators(self.net.width, layer, a[b], c[b])
                for layer, a, c in zip(self.net.layers, self.alphas, self.betas)]

    def _backward(self, U):
        arrays = self.net.layer_arrays()
        t = len(arrays)
        # rank-matrix path: P = A_1, A_l = A_{l+1} L_l
        dA = U
        dalpha = [None] * t
        for l in range(t):
            lo, hi = arrays[l]
            a, c = self.alphas[l][:, None, :], self.betas[l][:, None, :]
            A = self.backs[l]
            dalpha[l] = np.sum((A[:, :, lo] - A[:, :, hi]) * (dA[:, :, lo] - dA[:, :, hi]), axis=1)
            d_lo, d_hi = dA[:, :, lo], dA[:, :, hi]
            dA = dA.copy()
            dA[:, :, lo] = a * d_lo + c * d_hi
            dA[:, :, hi] = c * d_lo + a * d_hi
        # value path: x_l = L_l x_{l-1}, alpha_l = sigmoid((x_lo - x_hi) / tau)
        B = U.shape[0]
        dx = np.zeros((B, self.net.width))
        for l in range(t - 1, -1, -1):
            lo, hi = arrays[l]
            a, c, d = self.alphas[l], self.betas[l], self.diffs[l]
            da = dalpha[l] + (dx[:, lo] - dx[:, hi]) * d
            x_lo, x_hi = dx[:, lo], dx[:, hi]
            dx[:, lo] = a * x_lo + c * x_hi
            dx[:, hi] = c * x_lo + a * x_hi
            dpre = da * a * c / self.tau
            dx[:, lo] += dpre
            dx[:, hi] -= dpre
        return dx


def diffsortnet_topk(s, net: ComparatorNetwork, tau: float, k: int):
    """Relaxed comparator network with logistic mixing; the top-k rows are
    accumulated back to front as a (k, n) product of sparse layers."""
    S, squeeze = _as_batch(s)
    B, n = S.shape
    if net.width != n:
        raise ValueError(f"network width {net.width} does not match {n} scores")
    if not 1 <= k <= net.selects:
        raise ValueError(f"network selects {net.selects} ranks, asked for k={k}")
    arrays = net.layer_arrays()
    x = S.copy()
    alphas, betas, diffs = [], [], []
    for lo, hi in arrays:
        x_lo, x_hi = x[:, lo], x[:, hi]
        d = x_lo - x_hi
        a, c = sigmoid(d / tau), sigmoid(-d / tau)
        x[:, lo] = a * x_lo + c * x_hi
        x[:, hi] = c * x_lo + a * x_hi
        alphas.append(a)
        betas.append(c)
        diffs.append(d)
    A = np.zeros((B, k, n))
    A[:, np.arange(k), np.arange(k)] = 1.0
    backs = [None] * len(arrays)
    for l in range(len(arrays) - 1, -1, -1):
        lo, hi = arrays[l]
        a, c = alphas[l][:, None, :], betas[l][:, None, :]
        backs[l] = A
        A_lo, A_hi = A[:, :, lo], A[:, :, hi]
        A = A.copy()
        A[:, :, lo] = a * A_lo + c * A_hi
        A[:, :, hi] = c * A_lo + a * A_hi
    tape = SortNetTape(net, alphas, betas, diffs, backs, A, tau, squeeze)
    return (A[0] if squeeze else A), tape


def topk_product(layers: list[SparseLayerMatrix], k: int) -> np.ndarray:
    """First k rows of ``L_t ... L_1``, multiplied back to front in (k, n)."""
    n = layers[0].n if layers else k
    A = np.eye(k, n)
    for L in reversed(layers):
        A = matmul_dense_sparse(A, L)
    return A


def full_product(layers: list[SparseLayerMatrix], n: int) -> np.ndarray:
    """Full ``L_t ... L_1`` accumulated front to back in (n, n)."""
    Q = np.eye(n)
    for L in layers:
        Q = matmul_sparse_dense(L, Q)
    return Q


def topk_rows_equivalence_check(net: ComparatorNetwork, s, tau: float, k: int,
                                atol: float = 1e-9) -> bool:
    _, tape = diffsortnet_topk(np.asarray(s, dtype=np.float64), net, tau, k)
    layers = tape.layer_matrices()
    return bool(np.allclose(topk_product(layers, k), full_product(layers, net.width)[:k],
                            atol=atol, rtol=0))


# -- uniform interface ---------------------------------------------------------------------

def default_network(cfg: OperatorConfig, n: int, k: int) -> ComparatorNetwork:
    kind = cfg.network_kind
    return cached_network(n, None if kind in ("bitonic-sort", "odd-even-sort", "bitonic", "odd-even") else k, kind)


def relaxed_topk(s, cfg: OperatorConfig, k: int, net: ComparatorNetwork | None = None):
    """Dispatch on ``cfg.operator``; returns the first ``k`` rows and a tape."""
    if cfg.operator == "neuralsort":
        return neuralsort_topk(s, cfg.temperature, k)
    if cfg.operator == "softsort":
        return softsort_topk(s, cfg.temperature, k)
    if cfg.operator == "sinkhorn":
        sc = cfg.sinkhorn
        return sinkhorn_sort(s, sc.epsilon, sc.tol, sc.max_iters, k=k, scaling_iters=sc.scaling_iters)
    n = np.shape(s)[-1]
    if net is None:
        net = default_network(cfg, n, k)
    return diffsortnet_topk(s, net, cfg.temperature, k)
