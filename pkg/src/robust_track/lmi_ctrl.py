"""Robust longitudinal-lateral controller: linearizes the (v_x, omega_z)
dynamics around the desired motion, wraps the identified stiffness range
into a four-vertex polytope, synthesizes a state-feedback gain through the
semidefinite condition in numerics, and emits desired slip ratio, desired
tire side-slip angle and the steering command.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import LmiConfig
from .numerics import SdpProblem, dlqr_gain, solve_lmi, spectral_radius
from .plant import VehicleParams, VehicleState, _dugoff
from .tracking_lqr import PhaseTrajectory

log = logging.getLogger(__name__)


class DegradedModeError(Exception):
    """The gain has been stale longer than the tolerated window."""


def plane_dynamics(v_x: float, omega_z: float, sigma: float, alpha_f: float,
                   theta: tuple[float, float], params: VehicleParams,
                   v_y: float, g: float = 9.81) -> tuple[float, float]:
    """(v_x', omega_z') rows of the planar force balance with all four
    wheels at slip ``sigma`` and the front axle at side-slip ``alpha_f``.
    The lateral velocity is a frozen parameter of the model."""
    c_sigma, c_alpha = theta
    v_x = max(v_x, 0.5)
    f_z = params.m * g / 4.0
    alpha_r = (v_y - params.l_r * omega_z) / v_x
    fx_f, fy_f, _ = _dugoff(sigma, alpha_f, f_z, c_sigma, c_alpha, params.mu)
    fx_r, fy_r, _ = _dugoff(sigma, alpha_r, f_z, c_sigma, c_alpha, params.mu)
    fy_f, fy_r = -fy_f, -fy_r   # restoring orientation
    dv_x = (2.0 * fx_f + 2.0 * fx_r) / params.m + v_y * omega_z
    domega = (2.0 * params.l_f * fy_f - 2.0 * params.l_r * fy_r) / params.i_z
    return dv_x, domega


@dataclass(frozen=True)
class LinearizedModel:
    a: np.ndarray
    b: np.ndarray
    saturated: bool = False


def linearize(x_ref: tuple[float, float], u_ref: tuple[float, float],
              theta_hat: tuple[float, float], period: float,
              params: VehicleParams, v_y: float = 0.0,
              g: float = 9.81) -> LinearizedModel:
    """Discrete (A, B) = (I + T df/dx, T df/du) by central differences with
    relative step 1e-6. A reference in the saturated tire region only tags
    the result; the derivative itself stays well defined."""
    if period <= 0.0:
        raise ValueError("discretization period must be positive")

    def f(x, u):
        return np.array(plane_dynamics(x[0], x[1], u[0], u[1], theta_hat,
                                       params, v_y, g))

    x0 = np.asarray(x_ref, dtype=float)
    u0 = np.asarray(u_ref, dtype=float)
    a_c = np.zeros((2, 2))
    b_c = np.zeros((2, 2))
    for j in range(2):
        h = 1e-6 * max(1.0, abs(x0[j]))
        dx = np.zeros(2)
        dx[j] = h
        a_c[:, j] = (f(x0 + dx, u0) - f(x0 - dx, u0)) / (2.0 * h)
        h = 1e-6 * max(1.0, abs(u0[j]))
        du = np.zeros(2)
        du[j] = h
        b_c[:, j] = (f(x0, u0 + du) - f(x0, u0 - du)) / (2.0 * h)

    f_z = params.m * g / 4.0
    alpha_r = (v_y - params.l_r * x0[1]) / max(x0[0], 0.5)
    saturated = any(
        _dugoff(u0[0], a, f_z, theta_hat[0], theta_hat[1], params.mu)[2] < 1.0
        for a in (u0[1], alpha_r))
    if saturated:
        log.debug("linearization reference lies in the saturated tire region")
    return LinearizedModel(a=np.eye(2) + period * a_c, b=period * b_c,
                           saturated=saturated)


@dataclass
class PolytopicModel:
    a_hat: np.ndarray
    b_hat: np.ndarray
    vertices: list[tuple[np.ndarray, np.ndarray]]   # deviations from nominal
    m_struct: np.ndarray
    n_a: np.ndarray
    n_b: np.ndarray
    saturated: bool = False

    def vertex_systems(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.a_hat + da, self.b_hat + db) for da, db in self.vertices]


def build_polytope(theta_range: tuple[np.ndarray, np.ndarray],
                   x_ref: tuple[float, float], u_ref: tuple[float, float],
                   period: float, params: VehicleParams, v_y: float = 0.0,
                   theta_hat: tuple[float, float] | None = None,
                   g: float = 9.81) -> PolytopicModel:
    """Vertex linearizations at the four stiffness-range corners, expressed
    as deviations from the nominal model."""
    lo = np.asarray(theta_range[0], dtype=float)
    hi = np.asarray(theta_range[1], dtype=float)
    if np.any(lo > hi):
        raise ValueError("stiffness range must satisfy lo <= hi")
    if theta_hat is None:
        theta_hat = tuple(0.5 * (lo + hi))
    theta_hat = (min(max(theta_hat[0], lo[0]), hi[0]),
                 min(max(theta_hat[1], lo[1]), hi[1]))

    nominal = linearize(x_ref, u_ref, theta_hat, period, params, v_y, g)
    vertices = []
    for c_sigma in (lo[0], hi[0]):
        for c_alpha in (lo[1], hi[1]):
            vert = linearize(x_ref, u_ref, (c_sigma, c_alpha), period,
                             params, v_y, g)
            vertices.append((vert.a - nominal.a, vert.b - nominal.b))

    abs_a = np.stack([nominal.a + da for da, _ in vertices])
    abs_b = np.stack([nominal.b + db for _, db in vertices])
    slack = 1e-6 * (1.0 + np.abs(nominal.a).max() + np.abs(nominal.b).max())
    if (np.any(nominal.a > abs_a.max(axis=0) + slack)
            or np.any(nominal.a < abs_a.min(axis=0) - slack)
            or np.any(nominal.b > abs_b.max(axis=0) + slack)
            or np.any(nominal.b < abs_b.min(axis=0) - slack)):
        raise ValueError("nominal model escapes the vertex hull")

    return PolytopicModel(
        a_hat=nominal.a, b_hat=nominal.b, vertices=vertices,
        m_struct=np.hstack([np.eye(2)] * 4),
        n_a=np.vstack([da for da, _ in vertices]),
        n_b=np.vstack([db for _, db in vertices]),
        saturated=nominal.saturated)


@dataclass
class LmiGain:
    k: np.ndarray
    p: np.ndarray
    y: np.ndarray
    eps: float
    synthesized_at: int = 0
    conservative: bool = False
    flags: list[str] = field(default_factory=list)


def synthesize(model: PolytopicModel, q: np.ndarray, r: np.ndarray,
               tol: float = 1e-7, step: int = 0,
               x0: np.ndarray | None = None) -> LmiGain | None:
    """Solve the robust stabilization block for this polytope; the returned
    gain is additionally re-checked to place every vertex closed loop
    strictly inside the unit circle. None means infeasible."""
    problem = SdpProblem(a_nom=model.a_hat, b_nom=model.b_hat,
                         n_a=model.n_a, n_b=model.n_b,
                         m_struct=model.m_struct, q_weight=q, r_weight=r,
                         tol=tol, x0=x0)
    sol = solve_lmi(problem)
    if not sol.feasible:
        return None
    k = sol.y @ np.linalg.inv(sol.p)
    for a_v, b_v in model.vertex_systems():
        if spectral_radius(a_v + b_v @ k) >= 1.0:
            log.warning("verified block but a vertex loop is not contractive")
            return None
    return LmiGain(k=k, p=sol.p, y=sol.y, eps=sol.eps, synthesized_at=step)


def control(gain: LmiGain, x: tuple[float, float], traj: PhaseTrajectory,
            u_ref: tuple[float, float], sigma_max: float = 0.15,
            alpha_max: float = 0.12, stale_periods: int = 0,
            stale_limit: int = 5) -> tuple[float, float, bool]:
    """Desired (slip ratio, tire side-slip): feedback on the phase-trajectory
    error plus the reference input, clamped. Returns a saturation flag."""
    if stale_periods > stale_limit:
        raise DegradedModeError(f"gain stale for {stale_periods} periods")
    x_err = np.array([x[0] - traj.v_x_des, x[1] - traj.omega_z_des])
    u = gain.k @ x_err + np.asarray(u_ref, dtype=float)
    sigma_des = float(u[0])
    alpha_des = float(u[1])
    saturated = abs(sigma_des) > sigma_max or abs(alpha_des) > alpha_max
    sigma_des = max(-sigma_max, min(sigma_max, sigma_des))
    alpha_des = max(-alpha_max, min(alpha_max, alpha_des))
    return sigma_des, alpha_des, saturated


def steering_command(state: VehicleState, alpha_des: float,
                     params: VehicleParams, prev_delta: float = 0.0,
                     v_eps: float = 0.5) -> float:
    """Invert the front side-slip relation for the steering angle; hold the
    previous command below the speed guard."""
    if abs(state.v_x) <= v_eps:
        return prev_delta
    return (state.v_y + state.omega_z * params.l_f) / state.v_x - alpha_des


def reference_input(traj: PhaseTrajectory, theta_hat: tuple[float, float],
                    params: VehicleParams, sigma_max: float = 0.15,
                    alpha_max: float = 0.12, g: float = 9.81
                    ) -> tuple[float, float]:
    """(sigma_ref, alpha_ref) sustaining the desired accelerations, found by
    damped Newton on the planar model; falls back to the small-slip linear
    inversion when the tires cannot deliver the request."""
    c_sigma, c_alpha = theta_hat
    v_x = max(traj.v_x_des, 0.5)
    v_y = v_x * math.tan(traj.beta_des)
    target = np.array([traj.v_x_dot_des, traj.omega_z_dot_des])

    sigma0 = params.m * (target[0] - v_y * traj.omega_z_des) / (4.0 * c_sigma)
    alpha_r_des = (v_y - params.l_r * traj.omega_z_des) / v_x
    tan_a0 = ((2.0 * params.l_r * c_alpha * math.tan(alpha_r_des)
               - params.i_z * target[1]) / (2.0 * params.l_f * c_alpha))
    u = np.array([sigma0, math.atan(tan_a0)])

    def residual(cand: np.ndarray) -> np.ndarray:
        dv, dw = plane_dynamics(v_x, traj.omega_z_des, cand[0], cand[1],
                                theta_hat, params, v_y, g)
        return np.array([dv, dw]) - target

    converged = False
    for _ in range(12):
        res = residual(u)
        if np.max(np.abs(res)) < 1e-8:
            converged = True
            break
        jac = np.zeros((2, 2))
        for j in range(2):
            h = 1e-6 * max(1.0, abs(u[j]))
            du = np.zeros(2)
            du[j] = h
            jac[:, j] = (residual(u + du) - residual(u - du)) / (2.0 * h)
        try:
            step = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        base = np.linalg.norm(res)
        for _ in range(6):
            trial = u + scale * step
            if np.linalg.norm(residual(trial)) < base:
                u = trial
                break
            scale *= 0.5
        else:
            break
    if not converged and np.max(np.abs(residual(u))) > 1e-3:
        u = np.array([sigma0, math.atan(tan_a0)])
    return (max(-sigma_max, min(sigma_max, float(u[0]))),
            max(-alpha_max, min(alpha_max, float(u[1]))))


class LmiController:
    """Cadenced synthesis plus the infeasibility fallback ladder: keep the
    previous gain while stale, drop to a vertex-averaged discrete LQR when
    there is nothing to keep, raise DegradedModeError past the stale limit."""

    def __init__(self, params: VehicleParams, cfg: LmiConfig, period: float):
        self.params = params
        self.cfg = cfg
        self.period = period
        self.q = np.diag(cfg.q_diag)
        self.r = np.diag(cfg.r_diag)
        self.gain: LmiGain | None = None
        self.stale_periods = 0
        self.ticks_since_synth = 10 ** 9
        self.last_theta: np.ndarray | None = None
        self.infeasible_count = 0
        self.conservative_count = 0
        self.step_index = 0

    def _needs_synthesis(self, theta_hat: np.ndarray) -> bool:
        if self.gain is None or self.stale_periods > 0:
            return True
        if self.ticks_since_synth >= self.cfg.cadence:
            return True
        if self.last_theta is not None:
            change = np.max(np.abs(theta_hat - self.last_theta) / self.last_theta)
            if change > self.cfg.theta_change:
                return True
        return False

    def _fallback_dlqr(self, model: PolytopicModel) -> LmiGain:
        systems = model.vertex_systems()
        a_bar = sum(a for a, _ in systems) / len(systems)
        b_bar = sum(b for _, b in systems) / len(systems)
        k = -dlqr_gain(a_bar, b_bar, self.q, self.r)
        self.conservative_count += 1
        return LmiGain(k=k, p=np.eye(2), y=k.copy(), eps=0.0,
                       synthesized_at=self.step_index, conservative=True,
                       flags=["dlqr-fallback"])

    def update(self, state: VehicleState, traj: PhaseTrajectory,
               theta_hat: np.ndarray, theta_range: tuple[np.ndarray, np.ndarray]
               ) -> tuple[float, float, dict]:
        """One controller period: cadenced synthesis, then the feedback law.
        Returns (sigma_des, alpha_des, flags)."""
        self.step_index += 1
        self.ticks_since_synth += 1
        flags = {"infeasible": False, "conservative": False, "stale": False,
                 "saturated": False, "degraded": False, "lin_saturated": False}

        u_ref = reference_input(traj, tuple(theta_hat), self.params,
                                self.cfg.sigma_max, self.cfg.alpha_max)
        model = None
        if self._needs_synthesis(theta_hat):
            model = build_polytope(theta_range, (traj.v_x_des, traj.omega_z_des),
                                   u_ref, self.period, self.params,
                                   v_y=state.v_y, theta_hat=tuple(theta_hat))
            flags["lin_saturated"] = model.saturated
            gain = synthesize(model, self.q, self.r, tol=self.cfg.sdp_tol,
                              step=self.step_index)
            if gain is not None:
                self.gain = gain
                self.stale_periods = 0
                self.ticks_since_synth = 0
                self.last_theta = np.asarray(theta_hat, dtype=float).copy()
            else:
                self.infeasible_count += 1
                flags["infeasible"] = True
                if self.gain is None:
                    self.gain = self._fallback_dlqr(model)
                    flags["conservative"] = True
                    self.ticks_since_synth = 0
                    self.last_theta = np.asarray(theta_hat, dtype=float).copy()
                else:
                    self.stale_periods += 1
                    flags["stale"] = True

        try:
            sigma_des, alpha_des, saturated = control(
                self.gain, (state.v_x, state.omega_z), traj, u_ref,
                self.cfg.sigma_max, self.cfg.alpha_max,
                stale_periods=self.stale_periods, stale_limit=self.cfg.stale_limit)
        except DegradedModeError:
            flags["degraded"] = True
            if model is None:
                model = build_polytope(theta_range, (traj.v_x_des, traj.omega_z_des),
                                       u_ref, self.period, self.params,
                                       v_y=state.v_y, theta_hat=tuple(theta_hat))
            self.gain = self._fallback_dlqr(model)
            self.stale_periods = 0
            sigma_des, alpha_des, saturated = control(
                self.gain, (state.v_x, state.omega_z), traj, u_ref,
                self.cfg.sigma_max, self.cfg.alpha_max)
        flags["saturated"] = saturated
        flags["conservative"] = flags["conservative"] or self.gain.conservative
        return sigma_des, alpha_des, flags
