"""Sliding-mode yaw-stability controller: tracks the desired (beta, omega_z)
pair through a differential-longitudinal-force yaw moment, with the sign
term smoothed inside a boundary layer and the switching gain driven by the
fitted mismatch envelope.

The scalar control u_s is the difference 1/(1+sigma_l) - 1/(1+sigma_r); in
the pre-saturation tire region the induced yaw moment is exactly
2*d*C_sigma*u_s, which makes the input coefficient k(x) positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .plant import VehicleParams, VehicleState, _dugoff
from .tracking_lqr import PhaseTrajectory


class SmcBypassError(Exception):
    """Input coefficient too small; yaw-moment command must be zeroed."""


@dataclass
class SlidingState:
    xi: float = 3.0
    eps_s: float = 0.05
    eta: float = 2.0
    kappa0: float = 0.02
    boundary_layer: float = 0.01
    k_min: float = 1e-3
    s: float = 0.0

    def __post_init__(self):
        if self.xi < 0 or self.eta <= 0 or self.eps_s < 0 or self.kappa0 < 0:
            raise ValueError("sliding gains out of range")
        if self.boundary_layer <= 0:
            raise ValueError("boundary layer must be positive")


@dataclass
class MismatchEnvelope:
    delta_bound: Callable[[float, float], float]
    source: str = "static"

    @classmethod
    def constant(cls, value: float) -> "MismatchEnvelope":
        return cls(delta_bound=lambda beta, omega_z: value, source="static")


def sat(value: float, layer: float) -> float:
    """Sign function smoothed linearly inside the boundary layer."""
    if value > layer:
        return 1.0
    if value < -layer:
        return -1.0
    return value / layer


def surface(x: tuple[float, float], traj: PhaseTrajectory, xi: float) -> float:
    """s = (omega_z - omega_z_des) + xi * (beta - beta_des)."""
    beta, omega_z = x
    return (omega_z - traj.omega_z_des) + xi * (beta - traj.beta_des)


def nominal_sliding_model(state: VehicleState, traj: PhaseTrajectory,
                          sigma_des: float, alpha_des: float,
                          theta_hat: tuple[float, float],
                          params: VehicleParams, xi: float,
                          g: float = 9.81) -> tuple[float, float]:
    """Nominal drift and input coefficient of the surface dynamics.

    h is everything in s' that does not multiply u_s: the lateral-force yaw
    moment, the side-slip row scaled by xi, minus the desired-trajectory
    rates. k is the differential-longitudinal moment coefficient."""
    c_sigma, c_alpha = theta_hat
    v_x = max(abs(state.v_x), 0.5)
    f_z = params.m * g / 4.0
    alpha_r = (state.v_y - params.l_r * state.omega_z) / v_x

    _, fy_f, _ = _dugoff(sigma_des, alpha_des, f_z, c_sigma, c_alpha, params.mu)
    _, fy_r, _ = _dugoff(sigma_des, alpha_r, f_z, c_sigma, c_alpha, params.mu)
    fy_f, fy_r = -fy_f, -fy_r   # restoring orientation

    domega_drift = (2.0 * params.l_f * fy_f - 2.0 * params.l_r * fy_r) / params.i_z
    beta_rate = (2.0 * fy_f + 2.0 * fy_r) / (params.m * v_x) - state.omega_z
    h_hat = (domega_drift + xi * beta_rate
             - traj.omega_z_dot_des - xi * traj.beta_dot_des)
    k_hat = 2.0 * params.d * c_sigma / params.i_z
    return h_hat, k_hat


def control_law(x: tuple[float, float], s: float,
                nominal: tuple[float, float], env: MismatchEnvelope,
                gains: SlidingState) -> float:
    """Reaching law with envelope compensation:
    u_s = (-eps*sat(s) - eta*s - h)/k + v_s, v_s = -(Delta + kappa0)*sat(s)."""
    h_hat, k_hat = nominal
    if k_hat <= gains.k_min:
        raise SmcBypassError(f"input coefficient {k_hat:.2e} below {gains.k_min:.2e}")
    sw = sat(s, gains.boundary_layer)
    u_eq = (-gains.eps_s * sw - gains.eta * s - h_hat) / k_hat
    kappa_s = env.delta_bound(x[0], x[1]) + gains.kappa0
    return u_eq - kappa_s * sw


@dataclass
class ReachingReport:
    n_samples: int
    n_checked: int
    n_violations: int

    @property
    def violation_fraction(self) -> float:
        return self.n_violations / self.n_checked if self.n_checked else 0.0


def reaching_check(trace: Iterable[tuple[float, float]],
                   boundary_layer: float = 0.01) -> ReachingReport:
    """Count samples outside the boundary layer where s*s' fails to be
    negative. Diagnostic only."""
    n = checked = violations = 0
    for s, s_dot in trace:
        n += 1
        if abs(s) > boundary_layer:
            checked += 1
            if s * s_dot >= 0.0:
                violations += 1
    return ReachingReport(n_samples=n, n_checked=checked, n_violations=violations)


@dataclass
class SlipAllocation:
    sigma_l: float
    sigma_r: float
    converged: bool
    residual: tuple[float, float] = (math.nan, math.nan)


def _side_forces(sigma: float, alpha_f: float, alpha_r: float, f_z: float,
                 theta: tuple[float, float], mu: float) -> float:
    """Total longitudinal tire force of one side (front + rear wheel)."""
    fx_f, _, _ = _dugoff(sigma, alpha_f, f_z, theta[0], theta[1], mu)
    fx_r, _, _ = _dugoff(sigma, alpha_r, f_z, theta[0], theta[1], mu)
    return fx_f + fx_r


def allocation_residual(sigma_l: float, sigma_r: float, u_s: float,
                        sigma_des: float, alpha_des: float,
                        state: VehicleState, params: VehicleParams,
                        theta_hat: tuple[float, float], g: float = 9.81
                        ) -> tuple[float, float]:
    """Residuals of the reallocation system: longitudinal-acceleration
    preservation (m/s^2) and the achieved-vs-commanded u_s (dimensionless)."""
    v_x = max(abs(state.v_x), 0.5)
    f_z = params.m * g / 4.0
    alpha_r = (state.v_y - params.l_r * state.omega_z) / v_x
    sym = 2.0 * _side_forces(sigma_des, alpha_des, alpha_r, f_z, theta_hat, params.mu)
    split = (_side_forces(sigma_l, alpha_des, alpha_r, f_z, theta_hat, params.mu)
             + _side_forces(sigma_r, alpha_des, alpha_r, f_z, theta_hat, params.mu))
    r1 = (split - sym) / params.m
    r2 = (1.0 / (1.0 + sigma_l) - 1.0 / (1.0 + sigma_r)) - u_s
    return r1, r2


def allocate_slip(u_s: float, sigma_des: float, alpha_des: float,
                  state: VehicleState, params: VehicleParams,
                  theta_hat: tuple[float, float] | None = None,
                  max_iter: int = 30, tol: float = 1e-6,
                  sigma_limit: float = 0.95) -> SlipAllocation:
    """Split the symmetric slip command into left/right references achieving
    the commanded u_s while preserving the longitudinal acceleration.

    Damped Newton on (sigma_l, sigma_r); on non-convergence (typically a
    saturated tire, where the force curve is flat) the symmetric command is
    returned with a failure flag."""
    theta = (params.c_sigma, params.c_alpha) if theta_hat is None else tuple(theta_hat)

    p_des = 1.0 / (1.0 + sigma_des)
    p_l = max(p_des + 0.5 * u_s, 1e-3)
    p_r = max(p_des - 0.5 * u_s, 1e-3)
    u = np.array([1.0 / p_l - 1.0, 1.0 / p_r - 1.0])

    def res(vec: np.ndarray) -> np.ndarray:
        return np.array(allocation_residual(vec[0], vec[1], u_s, sigma_des,
                                            alpha_des, state, params, theta))

    converged = False
    for _ in range(max_iter):
        r = res(u)
        if np.max(np.abs(r)) <= tol:
            converged = True
            break
        jac = np.zeros((2, 2))
        for j in range(2):
            h = 1e-7 * max(1.0, abs(u[j]))
            du = np.zeros(2)
            du[j] = h
            jac[:, j] = (res(u + du) - res(u - du)) / (2.0 * h)
        try:
            step = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError:
            break
        base = np.linalg.norm(r)
        scale = 1.0
        improved = False
        for _ in range(8):
            trial = u + scale * step
            if np.max(np.abs(trial)) < sigma_limit and np.linalg.norm(res(trial)) < base:
                u = trial
                improved = True
                break
            scale *= 0.5
        if not improved:
            break

    if not converged or np.max(np.abs(u)) >= sigma_limit:
        return SlipAllocation(sigma_l=sigma_des, sigma_r=sigma_des,
                              converged=False)
    r = res(u)
    return SlipAllocation(sigma_l=float(u[0]), sigma_r=float(u[1]),
                          converged=True, residual=(float(r[0]), float(r[1])))
