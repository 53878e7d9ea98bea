"""Per-wheel torque controller: converts reference slip ratios into wheel
speed references and tracks them with a drift-compensating law robust to
the unknown friction moment.

All quantities are in torque units; the compensation term cancels the
modeled tire reaction, damping and reference acceleration, leaving the
error dynamics j_w*e' = -k*e + v + G with |G| bounded by the envelope.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

from .plant import VehicleParams
from .smc_ctrl import sat


@dataclass
class WheelEnvelope:
    rho_bound: Callable[[float], float]
    gamma0: float = 0.2
    k_omega: float = 10.0
    boundary_layer: float = 0.5

    @classmethod
    def constant(cls, value: float, gamma0: float = 0.2, k_omega: float = 10.0,
                 boundary_layer: float = 0.5) -> "WheelEnvelope":
        return cls(rho_bound=lambda e: value, gamma0=gamma0,
                   k_omega=k_omega, boundary_layer=boundary_layer)


def wheel_ref_from_slip(sigma_ref: float, v_wx: float, r_w: float,
                        prev_ref: float = 0.0, v_eps: float = 0.5) -> float:
    """Wheel speed realizing the reference slip at the current ground speed;
    driving and braking branches invert the two slip definitions. Holds the
    previous reference below the speed guard."""
    if abs(v_wx) <= v_eps:
        return prev_ref
    if sigma_ref >= 0.0:
        denom = 1.0 - sigma_ref
        if denom <= 1e-6:
            denom = 1e-6
        return v_wx / (r_w * denom)
    return v_wx * (1.0 + sigma_ref) / r_w


def g_hat_estimate(w: float, omega_ref_dot: float, f_x_est: float,
                   params: VehicleParams) -> float:
    """Known drift of the wheel error equation in torque units: tire
    reaction, viscous damping, and the reference acceleration feedforward."""
    return -params.r_w * f_x_est - params.b_e * w - params.j_w * omega_ref_dot


def torque_law(e_omega: float, g_hat: float, env: WheelEnvelope,
               torque_max: float = 1500.0) -> float:
    """u = -k*e - g_hat + v with v = -(rho(e) + Gamma0)*sat(e), clamped."""
    gamma = env.rho_bound(e_omega) + env.gamma0
    u = (-env.k_omega * e_omega - g_hat
         - gamma * sat(e_omega, env.boundary_layer))
    return max(-torque_max, min(torque_max, u))


@dataclass
class LyapunovReport:
    n_samples: int
    n_checked: int
    n_violations: int

    @property
    def violation_fraction(self) -> float:
        return self.n_violations / self.n_checked if self.n_checked else 0.0


def lyapunov_check(trace: Iterable[tuple[float, float]],
                   boundary_layer: float = 0.5) -> LyapunovReport:
    """Count samples outside the layer where e*e' > 0 (diagnostic)."""
    n = checked = violations = 0
    for e, e_dot in trace:
        n += 1
        if abs(e) > boundary_layer:
            checked += 1
            if e * e_dot > 0.0:
                violations += 1
    return LyapunovReport(n_samples=n, n_checked=checked, n_violations=violations)


class WheelController:
    """One wheel: keeps the previous speed reference for the low-speed hold
    and differentiates it for the feedforward term."""

    def __init__(self, params: VehicleParams, env: WheelEnvelope,
                 period: float, torque_max: float = 1500.0, v_eps: float = 0.5):
        self.params = params
        self.env = env
        self.period = period
        self.torque_max = torque_max
        self.v_eps = v_eps
        self.omega_ref = 0.0
        self._have_ref = False

    def reset(self, omega_ref: float) -> None:
        self.omega_ref = omega_ref
        self._have_ref = True

    def update(self, sigma_ref: float, v_wx: float, w: float,
               f_x_est: float) -> tuple[float, float]:
        """Returns (torque command, wheel-speed error)."""
        new_ref = wheel_ref_from_slip(sigma_ref, v_wx, self.params.r_w,
                                      prev_ref=self.omega_ref, v_eps=self.v_eps)
        if not self._have_ref:
            self.omega_ref = new_ref
            self._have_ref = True
        omega_ref_dot = (new_ref - self.omega_ref) / self.period
        self.omega_ref = new_ref
        e_omega = w - new_ref
        g_hat = g_hat_estimate(w, omega_ref_dot, f_x_est, self.params)
        torque = torque_law(e_omega, g_hat, self.env, self.torque_max)
        return torque, e_omega
