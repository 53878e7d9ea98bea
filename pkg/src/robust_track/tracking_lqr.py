"""Trajectory-tracking layer: error-frame computation, LQR gain synthesis,
side-slip-rate allocation and the desired-motion phase trajectory handed to
the robust controllers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import plant as plant_mod
from .numerics import solve_care
from .plant import TireForces, VehicleParams, VehicleState, wrap_angle


class ControllabilityError(Exception):
    """Both reference speed and reference yaw rate are zero."""


@dataclass(frozen=True)
class ReferencePoint:
    x_ref: float
    y_ref: float
    psi_ref: float
    v_ref: float
    omega_ref: float
    curvature: float = 0.0


@dataclass(frozen=True)
class TrackingError:
    e_x: float
    e_y: float
    e_psi: float


@dataclass(frozen=True)
class PhaseTrajectory:
    v_x_des: float
    beta_des: float
    omega_z_des: float
    v_x_dot_des: float
    omega_z_dot_des: float
    beta_dot_des: float = 0.0

    @classmethod
    def initial(cls, v_des: float) -> "PhaseTrajectory":
        return cls(v_x_des=v_des, beta_des=0.0, omega_z_des=0.0,
                   v_x_dot_des=0.0, omega_z_dot_des=0.0)


def compute_error(state: VehicleState, ref: ReferencePoint) -> TrackingError:
    """Global pose error rotated into the vehicle frame."""
    dx = state.x - ref.x_ref
    dy = state.y - ref.y_ref
    c, s = math.cos(state.psi), math.sin(state.psi)
    return TrackingError(e_x=c * dx + s * dy,
                         e_y=-s * dx + c * dy,
                         e_psi=wrap_angle(state.psi - ref.psi_ref))


def error_system_matrices(ref: ReferencePoint) -> tuple[np.ndarray, np.ndarray]:
    a_e = np.array([[0.0, ref.omega_ref, 0.0],
                    [-ref.omega_ref, 0.0, ref.v_ref],
                    [0.0, 0.0, 0.0]])
    b_e = np.array([[1.0, 0.0],
                    [0.0, 0.0],
                    [0.0, 1.0]])
    return a_e, b_e


def lqr_gain(ref: ReferencePoint, q_k: np.ndarray, r_k: np.ndarray) -> np.ndarray:
    """State-feedback gain K with u_e = -K z_e for the linear error system."""
    if abs(ref.v_ref) < 1e-9 and abs(ref.omega_ref) < 1e-9:
        raise ControllabilityError(
            "error system loses rank when reference speed and yaw rate are both zero")
    a_e, b_e = error_system_matrices(ref)
    q_k = np.atleast_2d(np.asarray(q_k, dtype=float))
    r_k = np.atleast_2d(np.asarray(r_k, dtype=float))
    p_k = solve_care(a_e, b_e, q_k, r_k)
    k = np.linalg.solve(r_k, b_e.T @ p_k)
    closed = a_e - b_e @ k
    if np.any(np.linalg.eigvals(closed).real >= 0.0):
        raise ControllabilityError("synthesized gain is not stabilizing")
    return k


def desired_motion(error: TrackingError, k_gain: np.ndarray,
                   ref: ReferencePoint) -> tuple[float, float]:
    """Desired (speed, yaw rate): feedback on the tracking error plus the
    reference feedforward; speed clamped nonnegative."""
    z_e = np.array([error.e_x, error.e_y, error.e_psi])
    u_e = -np.asarray(k_gain) @ z_e
    v_des = max(0.0, ref.v_ref + float(u_e[0]))
    omega_des = ref.omega_ref + float(u_e[1])
    return v_des, omega_des


@dataclass(frozen=True)
class BetaAllocation:
    beta_dot: float
    phi_max: float
    cost: float
    saturated: bool = False


def golden_section(f: Callable[[float], float], lo: float, hi: float,
                   tol: float = 1e-6) -> float:
    """Scalar minimizer of a unimodal f on [lo, hi]."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def allocate_beta_from_phi(phi_fns: Sequence[Callable[[float], float]],
                           w_beta: float, beta_dot_max: float = 0.5
                           ) -> BetaAllocation:
    """Minimize sum(phi_i) + w_beta*rate^2 over the clamped rate; if no rate
    keeps every utilization <= 1, return the max-utilization minimizer with a
    saturation flag."""
    def cost(rate: float) -> float:
        return sum(fn(rate) for fn in phi_fns) + w_beta * rate * rate

    rate = golden_section(cost, -beta_dot_max, beta_dot_max)
    phis = [fn(rate) for fn in phi_fns]
    phi_max = max(phis) if phis else 0.0
    if phi_max <= 1.0:
        return BetaAllocation(beta_dot=rate, phi_max=phi_max, cost=cost(rate))

    def worst(r: float) -> float:
        return max(fn(r) for fn in phi_fns)

    rate = golden_section(worst, -beta_dot_max, beta_dot_max)
    return BetaAllocation(beta_dot=rate, phi_max=worst(rate), cost=cost(rate),
                          saturated=True)


def allocate_beta(state: VehicleState, forces: Sequence[TireForces],
                  params: VehicleParams, w_beta: float,
                  period: float = 0.01, beta_dot_max: float = 0.5
                  ) -> BetaAllocation:
    """Pick the desired side-slip rate minimizing total tire friction
    utilization over one controller period.

    A candidate rate shifts the desired side slip by rate*period and the
    desired yaw rate by -rate; the induced slip-angle changes are re-run
    through the tire model at the current slip ratios.
    """
    v_x = max(abs(state.v_x), 1.0)
    d_alpha_f = period - params.l_f / v_x
    d_alpha_r = period + params.l_r / v_x

    phi_fns = []
    for i, tf in enumerate(forces):
        shift = d_alpha_f if i < 2 else d_alpha_r
        sigma, alpha0, f_z, mu_fz = tf.sigma, tf.alpha, tf.f_z, tf.mu_fz

        def phi(rate: float, sigma=sigma, alpha0=alpha0, f_z=f_z,
                mu_fz=mu_fz, shift=shift) -> float:
            fx, fy = plant_mod.dugoff_force(sigma, alpha0 + shift * rate, f_z, params)
            return (fx * fx + fy * fy) / (mu_fz * mu_fz)

        phi_fns.append(phi)
    return allocate_beta_from_phi(phi_fns, w_beta, beta_dot_max)


def phase_trajectory(prev: PhaseTrajectory, v_des: float, omega_des: float,
                     beta_dot_des: float, period: float,
                     beta_des_max: float = 0.12) -> PhaseTrajectory:
    """Advance the desired (v_x, beta, omega_z) triple one controller period;
    derivatives by backward difference."""
    if period <= 0.0:
        raise ValueError("controller period must be positive")
    beta_des = prev.beta_des + beta_dot_des * period
    beta_des = max(-beta_des_max, min(beta_des_max, beta_des))
    v_x_des = v_des * math.cos(beta_des)
    omega_z_des = omega_des - beta_dot_des
    return PhaseTrajectory(
        v_x_des=v_x_des,
        beta_des=beta_des,
        omega_z_des=omega_z_des,
        v_x_dot_des=(v_x_des - prev.v_x_des) / period,
        omega_z_dot_des=(omega_z_des - prev.omega_z_des) / period,
        beta_dot_des=beta_dot_des,
    )


class TrackingController:
    """Stateful wrapper: cached LQR gain with re-synthesis thresholds and the
    running phase trajectory."""

    def __init__(self, q_k: np.ndarray, r_k: np.ndarray, v_ref: float,
                 resynth_dv: float = 0.5, resynth_domega: float = 0.02,
                 w_beta: float = 25.0, period: float = 0.01,
                 beta_des_max: float = 0.12, beta_dot_max: float = 0.5):
        self.q_k = np.atleast_2d(np.asarray(q_k, dtype=float))
        self.r_k = np.atleast_2d(np.asarray(r_k, dtype=float))
        self.resynth_dv = resynth_dv
        self.resynth_domega = resynth_domega
        self.w_beta = w_beta
        self.period = period
        self.beta_des_max = beta_des_max
        self.beta_dot_max = beta_dot_max
        self.traj = PhaseTrajectory.initial(v_ref)
        self._gain: np.ndarray | None = None
        self._gain_ref: tuple[float, float] | None = None

    def gain(self, ref: ReferencePoint) -> np.ndarray:
        if self._gain is not None and self._gain_ref is not None:
            dv = abs(ref.v_ref - self._gain_ref[0])
            domega = abs(ref.omega_ref - self._gain_ref[1])
            if dv <= self.resynth_dv and domega <= self.resynth_domega:
                return self._gain
        self._gain = lqr_gain(ref, self.q_k, self.r_k)
        self._gain_ref = (ref.v_ref, ref.omega_ref)
        return self._gain

    def update(self, state: VehicleState, ref: ReferencePoint,
               forces: Sequence[TireForces], params: VehicleParams
               ) -> tuple[TrackingError, PhaseTrajectory, BetaAllocation]:
        error = compute_error(state, ref)
        v_des, omega_des = desired_motion(error, self.gain(ref), ref)
        alloc = allocate_beta(state, forces, params, self.w_beta,
                              period=self.period, beta_dot_max=self.beta_dot_max)
        self.traj = phase_trajectory(self.traj, v_des, omega_des,
                                     alloc.beta_dot, self.period,
                                     beta_des_max=self.beta_des_max)
        return error, self.traj, alloc
