"""Exact Gaussian-process regression (RBF kernel, zero mean) plus the
gridded mismatch envelopes that feed the switching controllers.

The envelope construction: per grid cell, the bound is the largest observed
discrepancy between the GP prediction and the identified-model prediction
(internal mismatch), scaled by its tuning coefficient; the external
disturbance bound comes from the largest truth-vs-GP residual. Empty cells
borrow the nearest populated cell.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize


class GprFitError(Exception):
    """Kernel matrix could not be factorized even with maximum jitter."""


def rbf_kernel(xa: np.ndarray, xb: np.ndarray, length_scale: float,
               sigma_f2: float) -> np.ndarray:
    xa = np.atleast_2d(np.asarray(xa, dtype=float))
    xb = np.atleast_2d(np.asarray(xb, dtype=float))
    sq = np.sum(xa ** 2, axis=1)[:, None] + np.sum(xb ** 2, axis=1)[None, :] \
        - 2.0 * xa @ xb.T
    return sigma_f2 * np.exp(-np.maximum(sq, 0.0) / (2.0 * length_scale ** 2))


@dataclass
class GprModel:
    x_train: np.ndarray
    y_train: np.ndarray
    length_scale: float
    sigma_f2: float
    sigma_eps2: float
    chol: np.ndarray = field(repr=False, default=None)
    alpha: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self.x_train = np.atleast_2d(np.asarray(self.x_train, dtype=float))
        self.y_train = np.asarray(self.y_train, dtype=float).reshape(-1)
        if self.length_scale <= 0 or self.sigma_f2 <= 0 or self.sigma_eps2 < 0:
            raise ValueError("hyperparameters out of range")
        if self.chol is None:
            self._factorize()

    def _factorize(self, max_jitter: float = 1e-6):
        n = self.x_train.shape[0]
        k = rbf_kernel(self.x_train, self.x_train, self.length_scale, self.sigma_f2)
        k += self.sigma_eps2 * np.eye(n)
        jitter = 0.0
        while True:
            try:
                self.chol = scipy.linalg.cholesky(k + jitter * np.eye(n), lower=True)
                break
            except scipy.linalg.LinAlgError:
                jitter = max(1e-12, 10.0 * jitter)
                if jitter > max_jitter:
                    raise GprFitError("kernel matrix not positive definite "
                                      f"after jitter {max_jitter:g}")
        self.alpha = scipy.linalg.cho_solve((self.chol, True), self.y_train)


def predict(model: GprModel, x_star: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at query rows."""
    x_star = np.atleast_2d(np.asarray(x_star, dtype=float))
    k_star = rbf_kernel(x_star, model.x_train, model.length_scale, model.sigma_f2)
    mean = k_star @ model.alpha
    v = scipy.linalg.solve_triangular(model.chol, k_star.T, lower=True)
    var = model.sigma_f2 - np.sum(v ** 2, axis=0)
    return mean, var


def nll(x: np.ndarray, y: np.ndarray, length_scale: float, sigma_f2: float,
        sigma_eps2: float, jitter: float = 1e-10) -> float:
    """Negative log marginal likelihood of the data under the kernel."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    n = x.shape[0]
    k = rbf_kernel(x, x, length_scale, sigma_f2) + (sigma_eps2 + jitter) * np.eye(n)
    try:
        chol = scipy.linalg.cholesky(k, lower=True)
    except scipy.linalg.LinAlgError:
        return math.inf
    alpha = scipy.linalg.cho_solve((chol, True), y)
    return float(0.5 * y @ alpha + np.sum(np.log(np.diag(chol)))
                 + 0.5 * n * math.log(2.0 * math.pi))


def fit(x: np.ndarray, y: np.ndarray, theta0: Optional[Sequence[float]] = None,
        n_restarts: int = 5, max_jitter: float = 1e-6) -> GprModel:
    """Hyperparameter search: coarse log-space grid, then Nelder-Mead
    refinement from the best grid point and a few spread-out restarts."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.shape[0] < 2:
        if x.shape[0] == 1:
            return GprModel(x, y, length_scale=1.0,
                            sigma_f2=max(float(y[0] ** 2), 1e-6), sigma_eps2=1e-12)
        raise ValueError("need at least one sample")

    span = float(np.max(np.ptp(x, axis=0))) or 1.0
    var_y = max(float(np.var(y)), 1e-8)

    def objective(log_theta: np.ndarray) -> float:
        ls, sf2, se2 = np.exp(log_theta)
        if not (1e-4 * span <= ls <= 1e3 * span):
            return math.inf
        return nll(x, y, ls, sf2, se2)

    if theta0 is not None:
        candidates = [np.log(np.asarray(theta0, dtype=float))]
    else:
        candidates = []
        for ls in (0.1 * span, 0.3 * span, 1.0 * span, 3.0 * span):
            for sf2 in (0.5 * var_y, 2.0 * var_y):
                for se2 in (1e-6 * var_y, 1e-3 * var_y, 1e-1 * var_y):
                    candidates.append(np.log([ls, sf2, se2]))
    scored = sorted(candidates, key=lambda c: objective(c))
    starts = scored[:max(1, n_restarts)]

    best = None
    best_val = math.inf
    for start in starts:
        res = scipy.optimize.minimize(objective, start, method="Nelder-Mead",
                                      options={"xatol": 1e-3, "fatol": 1e-6,
                                               "maxiter": 400})
        if res.fun < best_val:
            best_val = res.fun
            best = res.x
    if best is None or not np.isfinite(best_val):
        raise GprFitError("hyperparameter search failed")
    ls, sf2, se2 = np.exp(best)
    model = GprModel(x, y, length_scale=float(ls), sigma_f2=float(sf2),
                     sigma_eps2=float(se2))
    model._factorize(max_jitter)
    return model


def save_model(model: GprModel, path: str | Path) -> None:
    np.savez(path, x=model.x_train, y=model.y_train,
             hyper=np.array([model.length_scale, model.sigma_f2, model.sigma_eps2]))


def load_model(path: str | Path) -> GprModel:
    data = np.load(path)
    ls, sf2, se2 = data["hyper"]
    return GprModel(data["x"], data["y"], length_scale=float(ls),
                    sigma_f2=float(sf2), sigma_eps2=float(se2))


# ---------------------------------------------------------------------------
# Mismatch envelopes
# ---------------------------------------------------------------------------

@dataclass
class EnvelopeTable:
    """Gridded uncertainty bounds: Delta over the (beta, omega_z) plane for
    the sliding controller, rho over the wheel-speed error axis, plus scalar
    external-disturbance bounds."""
    delta_edges: tuple[np.ndarray, np.ndarray]
    delta_grid: np.ndarray
    rho_edges: np.ndarray
    rho_grid: np.ndarray
    omega_s: float
    omega_t: float
    coverage: float = math.nan

    def delta_at(self, beta: float, omega_z: float) -> float:
        i = _cell_index(self.delta_edges[0], beta)
        j = _cell_index(self.delta_edges[1], omega_z)
        return float(self.delta_grid[i, j])

    def rho_at(self, e_omega: float) -> float:
        return float(self.rho_grid[_cell_index(self.rho_edges, e_omega)])

    def scaled(self, factor: float) -> "EnvelopeTable":
        return EnvelopeTable(self.delta_edges, self.delta_grid * factor,
                             self.rho_edges, self.rho_grid * factor,
                             self.omega_s * factor, self.omega_t * factor,
                             self.coverage)

    def save(self, path: str | Path) -> None:
        payload = {
            "delta_edges": [self.delta_edges[0].tolist(), self.delta_edges[1].tolist()],
            "delta_grid": self.delta_grid.tolist(),
            "rho_edges": self.rho_edges.tolist(),
            "rho_grid": self.rho_grid.tolist(),
            "omega_s": self.omega_s,
            "omega_t": self.omega_t,
            "coverage": self.coverage,
        }
        Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EnvelopeTable":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(delta_edges=(np.asarray(payload["delta_edges"][0]),
                                np.asarray(payload["delta_edges"][1])),
                   delta_grid=np.asarray(payload["delta_grid"]),
                   rho_edges=np.asarray(payload["rho_edges"]),
                   rho_grid=np.asarray(payload["rho_grid"]),
                   omega_s=float(payload["omega_s"]),
                   omega_t=float(payload["omega_t"]),
                   coverage=float(payload["coverage"]))


def _cell_index(edges: np.ndarray, value: float) -> int:
    idx = int(np.searchsorted(edges, value, side="right")) - 1
    return min(max(idx, 0), len(edges) - 2)


def _fill_empty(grid: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Nearest-neighbour fill of unpopulated cells (Chebyshev distance)."""
    if np.all(counts > 0):
        return grid
    if not np.any(counts > 0):
        return grid
    filled = grid.copy()
    coords = np.argwhere(counts > 0)
    for empty in np.argwhere(counts == 0):
        dists = np.max(np.abs(coords - empty), axis=1)
        filled[tuple(empty)] = grid[tuple(coords[int(np.argmin(dists))])]
    return filled


@dataclass
class MismatchTraces:
    """Aligned per-sample traces from an identification run."""
    x_s: np.ndarray          # (n, 2) sliding states (beta, omega_z)
    xdot_gpr: np.ndarray     # (n, 2) GP-predicted (beta', omega_z')
    xdot_rls: np.ndarray     # (n, 2) identified-model predictions
    xdot_true: np.ndarray    # (n, 2) plant truth
    e_omega: np.ndarray      # (m,) wheel-speed errors
    edot_gpr: np.ndarray     # (m,) GP-predicted wheel error derivative
    edot_rls: np.ndarray     # (m,) identified-model predictions
    edot_true: np.ndarray    # (m,) plant truth


def build_envelopes(traces: MismatchTraces, alpha_b: Sequence[float],
                    delta_cells: int = 8, rho_cells: int = 10,
                    holdout: Optional[MismatchTraces] = None) -> EnvelopeTable:
    """Grid the observed mismatches into conservative bounds.

    ``alpha_b`` is (alpha_btheta, alpha_bi, alpha_be); the internal bounds
    scale with alpha_bi and the external ones with alpha_be.
    """
    if traces.x_s.shape[0] == 0 or traces.e_omega.shape[0] == 0:
        raise ValueError("empty mismatch trace")
    _, alpha_bi, alpha_be = alpha_b

    x_s = np.atleast_2d(traces.x_s)
    mism_s = np.linalg.norm(traces.xdot_gpr - traces.xdot_rls, axis=1)
    edges_b = _padded_edges(x_s[:, 0], delta_cells)
    edges_w = _padded_edges(x_s[:, 1], delta_cells)
    delta = np.zeros((delta_cells, delta_cells))
    counts = np.zeros((delta_cells, delta_cells), dtype=int)
    for row, value in zip(x_s, mism_s):
        i = _cell_index(edges_b, row[0])
        j = _cell_index(edges_w, row[1])
        delta[i, j] = max(delta[i, j], value)
        counts[i, j] += 1
    delta = _fill_empty(delta, counts) * alpha_bi

    mism_w = np.abs(traces.edot_gpr - traces.edot_rls)
    edges_e = _padded_edges(traces.e_omega, rho_cells)
    rho = np.zeros(rho_cells)
    counts_w = np.zeros(rho_cells, dtype=int)
    for value, e in zip(mism_w, traces.e_omega):
        i = _cell_index(edges_e, e)
        rho[i] = max(rho[i], value)
        counts_w[i] += 1
    rho = _fill_empty(rho.reshape(-1, 1), counts_w.reshape(-1, 1)).reshape(-1) * alpha_bi

    omega_s = float(np.max(np.linalg.norm(traces.xdot_true - traces.xdot_gpr, axis=1))) * alpha_be
    omega_t = float(np.max(np.abs(traces.edot_true - traces.edot_gpr))) * alpha_be

    table = EnvelopeTable(delta_edges=(edges_b, edges_w), delta_grid=delta,
                          rho_edges=edges_e, rho_grid=rho,
                          omega_s=omega_s, omega_t=omega_t)
    check = holdout or traces
    check_mism = np.linalg.norm(check.xdot_gpr - check.xdot_rls, axis=1)
    covered = sum(1 for row, value in zip(np.atleast_2d(check.x_s), check_mism)
                  if value <= table.delta_at(row[0], row[1]) + 1e-12)
    table.coverage = covered / max(len(check_mism), 1)
    return table


def _padded_edges(values: np.ndarray, cells: int, pad: float = 0.05) -> np.ndarray:
    lo, hi = float(np.min(values)), float(np.max(values))
    span = hi - lo
    if span <= 0.0:
        span = max(abs(lo), 1.0)
        lo -= 0.5 * span
        hi += 0.5 * span
    return np.linspace(lo - pad * span, hi + pad * span, cells + 1)
