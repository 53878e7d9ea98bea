"""Online identification of the tire stiffness pair (C_sigma, C_alpha) by
recursive least squares with an adaptive forgetting factor.

The regression rewrites the chassis accelerations as phi * theta + known
terms. Rows are premultiplied by (m, m*v_x, I_z) so both y and phi live in
force/moment units; that keeps the normal equations well conditioned (raw
acceleration rows would scale like 1e-4) without changing the identified
parameters. Samples with any tire outside the pre-saturation region are
rejected: the linear-in-theta form only holds there.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .config import RlsConfig
from .plant import (PlantInput, VehicleParams, VehicleState, dugoff_lambda,
                    linear_force_coefficients, wheel_positions, wheel_slip_states)

log = logging.getLogger(__name__)

THETA_BOX = (1e3, 3e5)


@dataclass
class RlsState:
    theta: np.ndarray            # (C_sigma, C_alpha)
    p: np.ndarray                # 2x2 covariance
    lam: float = 1.0
    lambda_min: float = 0.95
    h_coef: float = 0.9
    sigma_eps: float = 45.0
    p0: float = 1e8

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(2)
        self.p = np.atleast_2d(np.asarray(self.p, dtype=float))
        if not (0.0 < self.h_coef < 1.0):
            raise ValueError("h coefficient must lie in (0, 1)")
        if self.sigma_eps <= 0.0:
            raise ValueError("residual threshold must be positive")

    @classmethod
    def fresh(cls, theta0: np.ndarray, cfg: RlsConfig) -> "RlsState":
        return cls(theta=np.asarray(theta0, dtype=float),
                   p=cfg.p0 * np.eye(2), lam=1.0, lambda_min=cfg.lambda_min,
                   h_coef=cfg.h_coef, sigma_eps=cfg.sigma_eps, p0=cfg.p0)


@dataclass
class Regression:
    y: np.ndarray                # (3,) force/moment-scaled measurements
    phi: np.ndarray              # (3, 2) stiffness regressor
    pe_metric: float = math.nan  # windowed smallest singular value, set by the identifier

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).reshape(3)
        self.phi = np.asarray(self.phi, dtype=float).reshape(3, 2)
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.phi))):
            raise ValueError("regression data must be finite")


def build_regressor(state: VehicleState, inp: PlantInput, params: VehicleParams,
                    accel: tuple[float, float, float],
                    theta_gate: Optional[np.ndarray] = None,
                    v_eps: float = 0.5, g: float = 9.81) -> Optional[Regression]:
    """Regression sample from one measured (v_x', beta', omega_z') triple.

    Returns None when the sample is unusable: speed below the guard, or any
    tire past the Dugoff saturation knee (evaluated at ``theta_gate``, which
    defaults to current Table-sheet stiffness in ``params``).
    """
    if abs(state.v_x) <= v_eps:
        return None
    gate = (params.c_sigma, params.c_alpha) if theta_gate is None else tuple(theta_gate)
    f_z = params.m * g / 4.0
    for sigma, alpha, _ in wheel_slip_states(state, inp.delta, params, v_eps):
        if dugoff_lambda(sigma, alpha, f_z, gate[0], gate[1], params.mu) < 1.0:
            return None

    coeffs = linear_force_coefficients(state, inp.delta, params, v_eps)
    phi = np.zeros((3, 2))
    for (x_w, y_w), (kxs, kxa, kys, kya) in zip(wheel_positions(params), coeffs):
        phi[0, 0] += kxs
        phi[0, 1] += kxa
        phi[1, 0] += kys
        phi[1, 1] += kya
        # moment row: d*(right - left) longitudinal + lever * lateral
        side = -1.0 if y_w > 0 else 1.0
        phi[2, 0] += side * params.d * kxs + x_w * kys
        phi[2, 1] += side * params.d * kxa + x_w * kya

    dv_x, beta_dot, domega_z = accel
    y = np.array([
        params.m * (dv_x - state.v_y * state.omega_z) - inp.f_ex,
        params.m * state.v_x * (beta_dot + state.omega_z) - inp.f_ey,
        params.i_z * domega_z - inp.m_ez,
    ])
    return Regression(y=y, phi=phi)


def rls_step(rls: RlsState, reg: Regression) -> RlsState:
    """One forgetting-factor RLS update; returns a new state snapshot."""
    phi, y = reg.phi, reg.y
    denom = rls.lam * np.eye(3) + phi @ rls.p @ phi.T
    try:
        gain = np.linalg.solve(denom.T, (rls.p @ phi.T).T).T
    except np.linalg.LinAlgError:
        log.warning("RLS step skipped: singular innovation covariance")
        return rls
    theta = rls.theta + gain @ (y - phi @ rls.theta)
    p = (np.eye(2) - gain @ phi) @ rls.p / rls.lam
    p = 0.5 * (p + p.T)

    lo, hi = THETA_BOX
    if np.any(theta < lo) or np.any(theta > hi):
        theta = np.clip(theta, lo, hi)
        p = rls.p0 * np.eye(2)   # covariance reset after hitting the box
    return replace(rls, theta=theta, p=p)


def adapt_lambda(rls: RlsState, epsilon_k: float) -> float:
    """Forgetting factor from the current identification error magnitude."""
    q_k = math.floor((epsilon_k / rls.sigma_eps) ** 2)
    return rls.lambda_min + (1.0 - rls.lambda_min) * rls.h_coef ** q_k


class RlsIdentifier:
    """Drives the recursion over measurement samples and exposes the
    stiffness range consumed by the robust gain synthesis."""

    def __init__(self, params: VehicleParams, cfg: RlsConfig,
                 theta0: Optional[np.ndarray] = None, v_eps: float = 0.5):
        self.params = params
        self.cfg = cfg
        self.v_eps = v_eps
        theta0 = np.array([params.c_sigma, params.c_alpha]) if theta0 is None else theta0
        self.state = RlsState.fresh(theta0, cfg)
        self._window: deque[np.ndarray] = deque(maxlen=cfg.pe_window)
        self._resid_var = 0.0
        self._n_updates = 0
        self.history: list[tuple] = []

    @property
    def theta(self) -> np.ndarray:
        return self.state.theta.copy()

    def pe_metric(self) -> float:
        if len(self._window) < 2:
            return 0.0
        stack = np.vstack(list(self._window))
        return float(np.linalg.svd(stack, compute_uv=False)[-1])

    def update(self, state: VehicleState, inp: PlantInput,
               accel: tuple[float, float, float]) -> Optional[Regression]:
        reg = build_regressor(state, inp, self.params, accel,
                              theta_gate=self.state.theta, v_eps=self.v_eps)
        if reg is None:
            return None
        innovation = reg.y - reg.phi @ self.state.theta
        eps_norm = float(np.linalg.norm(innovation))
        self.state.lam = adapt_lambda(self.state, eps_norm)
        self.state = rls_step(self.state, reg)
        self._window.append(reg.phi)
        reg.pe_metric = self.pe_metric()
        self._n_updates += 1
        self._resid_var += (eps_norm ** 2 / 3.0 - self._resid_var) / self._n_updates
        self.history.append((self._n_updates, float(self.state.theta[0]),
                             float(self.state.theta[1]), self.state.lam, eps_norm,
                             float(self.state.p[0, 0]), float(self.state.p[1, 1])))
        return reg

    def theta_range(self, alpha_btheta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        """Identified stiffness box: theta_hat +/- range_sigmas posterior
        std, widened multiplicatively by the tuning coefficient (upper bound
        scaled by alpha, lower divided by it)."""
        theta = self.state.theta
        noise_var = max(self._resid_var, 1.0)
        std = np.sqrt(np.maximum(np.diag(self.state.p), 0.0) * noise_var)
        half = np.maximum(self.cfg.range_sigmas * std, self.cfg.range_floor * np.abs(theta))
        lo = (theta - half) / alpha_btheta
        hi = (theta + half) * alpha_btheta
        lo = np.clip(lo, THETA_BOX[0], THETA_BOX[1])
        hi = np.clip(hi, THETA_BOX[0], THETA_BOX[1])
        return lo, hi

    def export_rows(self) -> list[tuple]:
        """(step, C_sigma, C_alpha, lambda, epsilon, P00, P11) rows for CSV."""
        return list(self.history)
