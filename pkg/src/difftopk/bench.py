"""Timing of the k x n back-to-front rank-matrix product against the full
n x n front-to-back product over the same sorting-network layers."""
from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .diffrank import diffsortnet_topk, full_product, topk_product
from .selnet import build_full_sorter

SCHEMES = ("topk-rows", "full-matrix")


class EquivalenceError(AssertionError):
    pass


@dataclass(frozen=True)
class BenchResult:
    n: int
    k: int
    operator: str          # product scheme
    median_time: float     # seconds
    iterations: int        # layer products per evaluation
    checksum: str          # sha256 prefix of the k output rows

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            del d["median_time"]
        return d


def checksum(A: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(A).tobytes()).hexdigest()[:16]


def median_time(fn, repeats: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_eq3(n_list: Sequence[int], k: int = 5, tau: float = 1.0, repeats: int = 5,
              seed: int = 0, atol: float = 1e-9) -> list[BenchResult]:
    """Both schemes per n on the layers of a relaxed bitonic sorter applied to
    standard normal scores. Raises EquivalenceError before timing if the k
    rows disagree beyond ``atol``."""
    if repeats < 5:
        raise ValueError("need at least 5 repeats")
    rng = np.random.default_rng(seed)
    results = []
    for n in n_list:
        if not 1 <= k <= n:
            raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
        net = build_full_sorter(n, "bitonic")
        _, tape = diffsortnet_topk(rng.standard_normal(n), net, tau, n)
        layers = tape.layer_matrices()
        fast = topk_product(layers, k)
        full = full_product(layers, n)[:k]
        err = float(np.max(np.abs(fast - full)))
        if err > atol:
            raise EquivalenceError(f"n={n}: k-row product differs from the full product by {err:.3g}")
        results.append(BenchResult(n, k, "topk-rows", median_time(lambda: topk_product(layers, k), repeats),
                                   len(layers), checksum(fast)))
        results.append(BenchResult(n, k, "full-matrix", median_time(lambda: full_product(layers, n), repeats),
                                   len(layers), checksum(full)))
    return results


def scaling_exponents(results: Sequence[BenchResult]) -> dict[str, float]:
    """Least-squares slope of log time against log n, per scheme."""
    out = {}
    for scheme in SCHEMES:
        rows = [(r.n, r.median_time) for r in results if r.operator == scheme]
        if len(rows) >= 2:
            n, t = np.log(np.array(rows)).T
            out[scheme] = float(np.polyfit(n, t, 1)[0])
    return out
