"""Bayesian optimization of the three robust scaling coefficients
(parameter range, internal mismatch, external disturbance) against the
global scenario cost.

The acquisition is a lower confidence bound mu - kappa*sigma under
minimization; the literal mu + kappa*sigma form is available behind the
``acquisition`` switch for comparison, but explores nothing and is kept
only as a reference behaviour.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import gpr_bounds
from .config import TuneConfig, max_threads

log = logging.getLogger(__name__)

DIVERGED_COST = 1e9


@dataclass
class CostWeights:
    w_e: np.ndarray
    w_a: np.ndarray
    w_phi: np.ndarray

    @classmethod
    def from_config(cls, cfg: TuneConfig) -> "CostWeights":
        return cls(w_e=np.diag(cfg.w_e), w_a=np.diag(cfg.w_a),
                   w_phi=cfg.w_phi * np.eye(4))


def global_cost(trace, weights: CostWeights) -> float:
    """Sum over samples of the weighted squared tracking error, body
    acceleration and tire friction utilization. A diverged or non-finite
    trace maps to the penalty constant."""
    if getattr(trace, "diverged", False):
        return DIVERGED_COST
    z_e = np.column_stack([trace.e_x, trace.e_y, trace.e_psi])
    a_v = np.asarray(trace.a_v, dtype=float)
    phi_v = np.asarray(trace.phi_v, dtype=float)
    if not (np.all(np.isfinite(z_e)) and np.all(np.isfinite(a_v))
            and np.all(np.isfinite(phi_v))):
        return DIVERGED_COST
    cost = (np.einsum("ki,ij,kj->", z_e, weights.w_e, z_e)
            + np.einsum("ki,ij,kj->", a_v, weights.w_a, a_v)
            + np.einsum("ki,ij,kj->", phi_v, weights.w_phi, phi_v))
    return float(cost)


@dataclass
class TuneState:
    lo: np.ndarray
    hi: np.ndarray
    kappa_b: float = 2.0
    n_candidates: int = 4096
    acquisition: str = "lcb"
    alphas: list[np.ndarray] = field(default_factory=list)
    costs: list[float] = field(default_factory=list)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def record(self, alpha: np.ndarray, cost: float) -> None:
        if not np.isfinite(cost):
            raise ValueError("recorded cost must be finite")
        self.alphas.append(np.asarray(alpha, dtype=float).copy())
        self.costs.append(float(cost))

    @property
    def best(self) -> tuple[np.ndarray, float]:
        idx = int(np.argmin(self.costs))
        return self.alphas[idx], self.costs[idx]


def propose(state: TuneState) -> np.ndarray:
    """Next candidate minimizing the confidence bound of the surrogate over
    a dense random sample of the box."""
    if len(state.alphas) < 3:
        raise ValueError("need at least 3 evaluated points before proposing")
    dim = state.lo.shape[0]
    cands = state.rng.uniform(state.lo, state.hi, size=(state.n_candidates, dim))

    x = np.vstack(state.alphas)
    y = np.asarray(state.costs, dtype=float)
    span = state.hi - state.lo
    x_std = (x - state.lo) / span
    y_mean, y_std = float(np.mean(y)), float(np.std(y)) or 1.0
    y_n = (y - y_mean) / y_std
    try:
        surrogate = gpr_bounds.fit(x_std, y_n, n_restarts=3)
    except Exception as exc:
        log.warning("surrogate fit failed (%s); falling back to random", exc)
        return cands[0]

    mean, var = gpr_bounds.predict(surrogate, (cands - state.lo) / span)
    sigma = np.sqrt(np.maximum(var, 0.0))
    if state.acquisition == "paper-ucb":
        score = mean + state.kappa_b * sigma
    else:
        score = mean - state.kappa_b * sigma
    return cands[int(np.argmin(score))]


def latin_hypercube(n: int, lo: np.ndarray, hi: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    dim = lo.shape[0]
    u = (rng.random((n, dim)) + np.arange(n)[:, None]) / n
    for j in range(dim):
        u[:, j] = u[rng.permutation(n), j]
    return lo + u * (hi - lo)


@dataclass
class TuneResult:
    alpha_hat: np.ndarray
    cost_hat: float
    history: list[tuple[np.ndarray, float]]
    best_so_far: list[float]
    boundaries: Optional[dict] = None


def tune(n_alpha: int, evaluate: Callable[[np.ndarray], float],
         cfg: TuneConfig, seed: int = 0,
         boundaries_at: Optional[Callable[[np.ndarray], dict]] = None
         ) -> TuneResult:
    """Run the acquisition loop: seed the surrogate with the unit scaling
    plus a Latin-hypercube batch, then iterate propose -> evaluate.

    Seed evaluations may fan out across threads (ROBUST_TRACK_THREADS);
    results are committed in candidate order so the outcome is independent
    of completion order. Raises RuntimeError when every evaluation diverged.
    """
    rng = np.random.default_rng(seed)
    lo = np.full(3, cfg.alpha_lo)
    hi = np.full(3, cfg.alpha_hi)
    state = TuneState(lo=lo, hi=hi, kappa_b=cfg.kappa_b,
                      n_candidates=cfg.candidates, acquisition=cfg.acquisition,
                      rng=rng)

    seeds = [np.asarray(cfg.alpha0, dtype=float)]
    extra = max(cfg.n_seed - 1, 0)
    if extra:
        seeds.extend(latin_hypercube(extra, lo, hi, rng))
    workers = max_threads()
    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            costs = list(pool.map(evaluate, seeds))
    else:
        costs = [evaluate(a) for a in seeds]
    for alpha, cost in zip(seeds, costs):
        state.record(alpha, cost)

    for _ in range(n_alpha):
        alpha = propose(state)
        state.record(alpha, evaluate(alpha))

    if all(c >= DIVERGED_COST for c in state.costs):
        raise RuntimeError("tuning failed: every scenario evaluation diverged")

    best_so_far = list(np.minimum.accumulate(state.costs))
    alpha_hat, cost_hat = state.best
    result = TuneResult(alpha_hat=alpha_hat, cost_hat=cost_hat,
                        history=list(zip(state.alphas, state.costs)),
                        best_so_far=best_so_far)
    if boundaries_at is not None:
        result.boundaries = boundaries_at(alpha_hat)
    return result
