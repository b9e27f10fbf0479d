"""Finite-difference checks of every operator and loss mode on random instances."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffrank import OPERATORS, OperatorConfig, SinkhornConfig, backprop, relaxed_topk
from .loss import RankDistribution, loss_forward_backward
from .numcore import gradcheck

MODES = ("operator", "sm+topk", "pure-topk")
# At epsilon = 1e-2 the label's rank probabilities can sit in a weakly coupled
# block of the plan, where double precision fixes them only to ~1e-8 and a
# 1e-6 difference step cannot resolve the derivative.
SUITE_CONFIG = OperatorConfig("sinkhorn", temperature=1.0, sinkhorn=SinkhornConfig(epsilon=0.05))


@dataclass(frozen=True)
class SuiteResult:
    operator: str
    mode: str
    trials: int
    max_rel_err: float
    max_abs_err: float
    worst_trial: int

    def to_dict(self) -> dict:
        return {"operator": self.operator, "mode": self.mode, "trials": self.trials,
                "max_rel_err": self.max_rel_err, "max_abs_err": self.max_abs_err,
                "worst_trial": self.worst_trial}


def _instance(rng, n_max: int, k: int, min_gap: float):
    n = int(rng.integers(max(k, 2), n_max + 1))
    # ties are kinks (sorting, truncation, |s_i - s_j|); a difference stencil
    # that straddles one measures the kink, not the derivative
    s = rng.standard_normal(n)
    while np.min(np.diff(np.sort(s))) < min_gap:
        s = rng.standard_normal(n)
    return dict(s=s, y=int(rng.integers(n)), m=int(rng.integers(k, n + 1)),
                pk=RankDistribution(tuple(rng.dirichlet(np.ones(k)))),
                U=rng.standard_normal((k, n)))


def run_suite(operators: Sequence[str] = OPERATORS, modes: Sequence[str] = MODES,
              n_max: int = 16, k: int = 5, trials: int = 100, seed: int = 0, step: float = 1e-6,
              cfg: OperatorConfig | None = None) -> list[SuiteResult]:
    """Per (operator, mode): worst central-difference error over ``trials``
    instances with n in [k, n_max] and score gaps of at least ``10 * step``.
    Mode "operator" checks <U, P> for a random upstream U; the loss modes
    check the full truncation pipeline."""
    if k > n_max:
        raise ValueError("k must not exceed n_max")
    base = SUITE_CONFIG if cfg is None else cfg
    results = []
    for name in operators:
        op_cfg = OperatorConfig(name, base.temperature, base.sinkhorn, base.network_kind)
        for mode in modes:
            rng = np.random.default_rng([seed, OPERATORS.index(name), MODES.index(mode)])
            worst = (0.0, 0.0, -1)
            for t in range(trials):
                inst = _instance(rng, n_max, k, 10 * step)
                if mode == "operator":
                    U = inst["U"]

                    def f(x):
                        P, tape = relaxed_topk(x, op_cfg, k)
                        return float(np.sum(U * P)), backprop(tape, U)
                else:
                    def f(x, inst=inst):
                        return loss_forward_backward(x, inst["y"], inst["pk"], op_cfg, inst["m"], mode)
                rep = gradcheck(f, inst["s"], step=step)
                if rep.max_rel_err > worst[0] or worst[2] < 0:
                    worst = (rep.max_rel_err, rep.max_abs_err, t)
            results.append(SuiteResult(name, mode, trials, *worst))
    return results
