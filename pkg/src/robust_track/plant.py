"""Ground-truth 7-DoF vehicle model: chassis longitudinal/lateral/yaw
dynamics, four wheel spin states, Dugoff tire forces and global kinematics.

Conventions: body x forward, y left, yaw counter-clockwise positive. The
heading state ``psi`` is the course angle (direction of travel), so the
global kinematics close as x' = v cos(psi), y' = v sin(psi),
psi' = omega_z + beta'. Tire side-slip angles are measured velocity-angle
minus steering; the assembled lateral force opposes the slip angle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .config import PlantConfig, VehicleConfig
from .numerics import integrate_rk4

WHEELS = ("fl", "fr", "rl", "rr")


class LowSpeedError(Exception):
    """Slip quantities are undefined below the low-speed guard."""


def wrap_angle(angle: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.fmod(angle + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class VehicleParams:
    m: float
    i_z: float
    l_f: float
    l_r: float
    d: float
    r_w: float
    j_w: float
    b_e: float
    c_sigma: float
    c_alpha: float
    mu: float
    h: float

    def __post_init__(self):
        for name in ("m", "i_z", "l_f", "l_r", "d", "r_w", "j_w", "b_e",
                     "c_sigma", "c_alpha", "mu", "h"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"vehicle parameter {name} must be positive")
        if self.mu > 1.2:
            raise ValueError("adhesion coefficient out of range (0, 1.2]")

    @classmethod
    def from_config(cls, cfg: VehicleConfig) -> "VehicleParams":
        return cls(m=cfg.m, i_z=cfg.i_z, l_f=cfg.l_f, l_r=cfg.l_r, d=cfg.d,
                   r_w=cfg.r_w, j_w=cfg.j_w, b_e=cfg.b_e, c_sigma=cfg.c_sigma,
                   c_alpha=cfg.c_alpha, mu=cfg.mu, h=cfg.h)

    def with_stiffness(self, c_sigma: float, c_alpha: float) -> "VehicleParams":
        return replace(self, c_sigma=c_sigma, c_alpha=c_alpha)


@dataclass
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    v_x: float = 0.0
    v_y: float = 0.0
    omega_z: float = 0.0
    w_fl: float = 0.0
    w_fr: float = 0.0
    w_rl: float = 0.0
    w_rr: float = 0.0

    @property
    def beta(self) -> float:
        if self.v_x == 0.0 and self.v_y == 0.0:
            return 0.0
        return math.atan2(self.v_y, self.v_x)

    @property
    def wheel_speeds(self) -> tuple[float, float, float, float]:
        return (self.w_fl, self.w_fr, self.w_rl, self.w_rr)

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.v_x, self.v_y,
                         self.omega_z, self.w_fl, self.w_fr, self.w_rl, self.w_rr])

    @classmethod
    def from_array(cls, vec: np.ndarray) -> "VehicleState":
        return cls(x=float(vec[0]), y=float(vec[1]), psi=wrap_angle(float(vec[2])),
                   v_x=float(vec[3]), v_y=float(vec[4]), omega_z=float(vec[5]),
                   w_fl=float(vec[6]), w_fr=float(vec[7]),
                   w_rl=float(vec[8]), w_rr=float(vec[9]))


@dataclass
class PlantInput:
    delta: float = 0.0
    t_fl: float = 0.0
    t_fr: float = 0.0
    t_rl: float = 0.0
    t_rr: float = 0.0
    f_ex: float = 0.0
    f_ey: float = 0.0
    m_ez: float = 0.0
    t_f: float = 0.0    # extra friction moment applied to every wheel

    @property
    def torques(self) -> tuple[float, float, float, float]:
        return (self.t_fl, self.t_fr, self.t_rl, self.t_rr)


@dataclass
class TireForces:
    """Per-wheel forces; f_x/f_y are body frame, f_x_wheel is the tire-frame
    longitudinal component driving the wheel spin equation."""
    f_x: float
    f_y: float
    f_z: float
    sigma: float
    alpha: float
    lam: float
    f_x_wheel: float
    mu_fz: float = 0.0

    @property
    def utilization(self) -> float:
        return (self.f_x ** 2 + self.f_y ** 2) / (self.mu_fz ** 2) if self.mu_fz > 0 else 0.0


def slip_ratio(w: float, v_wx: float, r_w: float) -> float:
    """Signed tire slip ratio; driving and braking branches, 0 at the
    degenerate points."""
    wr = w * r_w
    s = wr - v_wx
    if wr > v_wx and wr != 0.0:
        return s / wr
    if wr < v_wx and v_wx != 0.0:
        return s / v_wx
    return 0.0


def side_slip_angles(state: VehicleState, delta: float,
                     params: VehicleParams, v_eps: float = 0.5) -> tuple[float, float]:
    """Front/rear axle side-slip angles (velocity angle minus steering)."""
    if abs(state.v_x) <= v_eps:
        raise LowSpeedError(f"|v_x|={abs(state.v_x):.3f} <= {v_eps}")
    alpha_f = (state.v_y + params.l_f * state.omega_z) / state.v_x - delta
    alpha_r = (state.v_y - params.l_r * state.omega_z) / state.v_x
    return alpha_f, alpha_r


def dugoff_lambda(sigma: float, alpha: float, f_z: float,
                  c_sigma: float, c_alpha: float, mu: float) -> float:
    norm = math.hypot(c_sigma * sigma, c_alpha * math.tan(alpha))
    if norm < 1e-12:
        return math.inf
    return mu * f_z * (1.0 + sigma) / (2.0 * norm)


def _dugoff(sigma: float, alpha: float, f_z: float,
            c_sigma: float, c_alpha: float, mu: float) -> tuple[float, float, float]:
    fx_lin = c_sigma * sigma
    fy_lin = c_alpha * math.tan(alpha)
    norm = math.hypot(fx_lin, fy_lin)
    if norm < 1e-12:
        return 0.0, 0.0, math.inf
    denom = 1.0 + sigma
    lam = mu * f_z * denom / (2.0 * norm) if denom > 0.0 else 0.0
    if lam >= 1.0:
        factor = 1.0 / denom
    else:
        # algebraically f(lam)/denom with f = lam*(2-lam); stays finite as
        # denom -> 0 (locked wheel)
        lam = max(lam, 0.0)
        factor = mu * f_z * (2.0 - lam) / (2.0 * norm)
    return fx_lin * factor, fy_lin * factor, lam


def dugoff_force(sigma: float, alpha: float, f_z: float,
                 params: VehicleParams) -> tuple[float, float]:
    """Dugoff tire forces in the tire frame, raw sign convention (positive
    alpha gives positive lateral force)."""
    f_x, f_y, _ = _dugoff(sigma, alpha, f_z, params.c_sigma, params.c_alpha, params.mu)
    return f_x, f_y


def wheel_positions(params: VehicleParams) -> tuple[tuple[float, float], ...]:
    """Wheel contact positions (x, y) in body frame, order fl, fr, rl, rr."""
    return ((params.l_f, params.d), (params.l_f, -params.d),
            (-params.l_r, params.d), (-params.l_r, -params.d))


def wheel_slip_states(state: VehicleState, delta: float, params: VehicleParams,
                      v_eps: float = 0.5) -> tuple[tuple[float, float, float], ...]:
    """Per-wheel (sigma, alpha, v_wx) with v_wx the tire-frame longitudinal
    wheel-center speed. Returns zero slip quantities below the speed guard."""
    if abs(state.v_x) <= v_eps:
        return tuple((0.0, 0.0, state.v_x) for _ in WHEELS)
    alpha_f, alpha_r = side_slip_angles(state, delta, params, v_eps)
    cos_d, sin_d = math.cos(delta), math.sin(delta)
    out = []
    speeds = state.wheel_speeds
    for i, (x_w, y_w) in enumerate(wheel_positions(params)):
        cx = state.v_x - state.omega_z * y_w
        cy = state.v_y + state.omega_z * x_w
        front = x_w > 0.0
        v_wx = cx * cos_d + cy * sin_d if front else cx
        sigma = slip_ratio(speeds[i], v_wx, params.r_w)
        alpha = alpha_f if front else alpha_r
        out.append((sigma, alpha, v_wx))
    return tuple(out)


def wheel_forces(state: VehicleState, delta: float, params: VehicleParams,
                 g: float = 9.81, v_eps: float = 0.5) -> tuple[TireForces, ...]:
    """Tire forces for all four wheels, body frame, with static vertical
    loads m*g/4. The lateral force opposes the slip angle."""
    f_z = params.m * g / 4.0
    mu_fz = params.mu * f_z
    slips = wheel_slip_states(state, delta, params, v_eps)
    cos_d, sin_d = math.cos(delta), math.sin(delta)
    forces = []
    for i, (sigma, alpha, _) in enumerate(slips):
        fx_t, fy_t, lam = _dugoff(sigma, alpha, f_z, params.c_sigma,
                                  params.c_alpha, params.mu)
        fy_t = -fy_t  # restoring orientation
        if i < 2:  # steered front wheels rotate into the body frame
            fx_b = fx_t * cos_d - fy_t * sin_d
            fy_b = fx_t * sin_d + fy_t * cos_d
        else:
            fx_b, fy_b = fx_t, fy_t
        forces.append(TireForces(f_x=fx_b, f_y=fy_b, f_z=f_z, sigma=sigma,
                                 alpha=alpha, lam=lam, f_x_wheel=fx_t, mu_fz=mu_fz))
    return tuple(forces)


def linear_force_coefficients(state: VehicleState, delta: float,
                              params: VehicleParams, v_eps: float = 0.5
                              ) -> tuple[tuple[float, float, float, float], ...]:
    """Per-wheel stiffness coefficients of the body-frame forces in the
    pre-saturation region: F_xb = C_sigma*kxs + C_alpha*kxa and
    F_yb = C_sigma*kys + C_alpha*kya."""
    slips = wheel_slip_states(state, delta, params, v_eps)
    cos_d, sin_d = math.cos(delta), math.sin(delta)
    coeffs = []
    for i, (sigma, alpha, _) in enumerate(slips):
        gx = sigma / (1.0 + sigma)
        gy = -math.tan(alpha) / (1.0 + sigma)   # restoring orientation
        if i < 2:
            coeffs.append((gx * cos_d, -gy * sin_d, gx * sin_d, gy * cos_d))
        else:
            coeffs.append((gx, 0.0, 0.0, gy))
    return tuple(coeffs)


def chassis_derivatives(state: VehicleState, forces: tuple[TireForces, ...],
                        inp: PlantInput, params: VehicleParams
                        ) -> tuple[float, float, float]:
    """Body-frame accelerations (v_x', v_y', omega_z') from the force and
    moment balance; expects body-frame tire forces."""
    f_fl, f_fr, f_rl, f_rr = forces
    sum_fx = f_fl.f_x + f_fr.f_x + f_rl.f_x + f_rr.f_x
    sum_fy = f_fl.f_y + f_fr.f_y + f_rl.f_y + f_rr.f_y
    dv_x = (sum_fx + inp.f_ex) / params.m + state.v_y * state.omega_z
    dv_y = (sum_fy + inp.f_ey) / params.m - state.v_x * state.omega_z
    moment = (params.d * (f_fr.f_x + f_rr.f_x - f_fl.f_x - f_rl.f_x)
              + params.l_f * (f_fr.f_y + f_fl.f_y)
              - params.l_r * (f_rr.f_y + f_rl.f_y)
              + inp.m_ez)
    return dv_x, dv_y, moment / params.i_z


def wheel_derivative(w: float, torque: float, f_x: float, t_f: float,
                     params: VehicleParams) -> float:
    """Wheel spin acceleration from the torque balance; f_x is the
    tire-frame longitudinal force."""
    return (torque + t_f - params.r_w * f_x - params.b_e * w) / params.j_w


def rolling_resistance(w: float, f_z: float, params: VehicleParams,
                       c_roll: float) -> float:
    if w > 0.0:
        return -c_roll * f_z * params.r_w
    if w < 0.0:
        return c_roll * f_z * params.r_w
    return 0.0


class Plant:
    """Owns one vehicle state and advances it with RK4 at a fixed step.

    ``last_forces`` and ``last_derivs`` hold the tire forces and chassis
    accelerations evaluated at the start of the most recent step; they act
    as the measurement port for identification and metrics.
    """

    def __init__(self, params: VehicleParams, state: VehicleState | None = None,
                 cfg: PlantConfig | None = None):
        self.params = params
        self.cfg = cfg or PlantConfig()
        self.state = state or VehicleState()
        self.last_forces: tuple[TireForces, ...] | None = None
        self.last_derivs: tuple[float, float, float] | None = None
        self.last_accels: tuple[float, float, float] | None = None
        self.last_wheel_accels: tuple[float, float, float, float] | None = None

    def clamp_input(self, inp: PlantInput) -> PlantInput:
        lim_d, lim_t = self.cfg.delta_max, self.cfg.torque_max

        def clamp(v, lim):
            return max(-lim, min(lim, v))

        return PlantInput(delta=clamp(inp.delta, lim_d),
                          t_fl=clamp(inp.t_fl, lim_t), t_fr=clamp(inp.t_fr, lim_t),
                          t_rl=clamp(inp.t_rl, lim_t), t_rr=clamp(inp.t_rr, lim_t),
                          f_ex=inp.f_ex, f_ey=inp.f_ey, m_ez=inp.m_ez, t_f=inp.t_f)

    def _derivatives(self, vec: np.ndarray, inp: PlantInput) -> np.ndarray:
        st = VehicleState(x=vec[0], y=vec[1], psi=vec[2], v_x=vec[3], v_y=vec[4],
                          omega_z=vec[5], w_fl=vec[6], w_fr=vec[7],
                          w_rl=vec[8], w_rr=vec[9])
        forces = wheel_forces(st, inp.delta, self.params, g=self.cfg.g,
                              v_eps=self.cfg.v_eps)
        dv_x, dv_y, dw_z = chassis_derivatives(st, forces, inp, self.params)

        out = np.empty(10)
        v = math.hypot(st.v_x, st.v_y)
        if v > self.cfg.v_eps:
            beta_dot = (dv_y * st.v_x - st.v_y * dv_x) / (st.v_x ** 2 + st.v_y ** 2)
        else:
            beta_dot = 0.0
        out[0] = v * math.cos(st.psi)
        out[1] = v * math.sin(st.psi)
        out[2] = st.omega_z + beta_dot
        out[3] = dv_x
        out[4] = dv_y
        out[5] = dw_z
        torques = inp.torques
        speeds = st.wheel_speeds
        for i in range(4):
            t_f = rolling_resistance(speeds[i], forces[i].f_z, self.params,
                                     self.cfg.c_roll) + inp.t_f
            out[6 + i] = wheel_derivative(speeds[i], torques[i],
                                          forces[i].f_x_wheel, t_f, self.params)
        return out

    def step(self, inp: PlantInput, dt: float | None = None) -> VehicleState:
        dt = self.cfg.dt if dt is None else dt
        if not (0.0 < dt <= 0.01):
            raise ValueError(f"plant step must satisfy 0 < dt <= 0.01, got {dt}")
        inp = self.clamp_input(inp)

        self.last_forces = wheel_forces(self.state, inp.delta, self.params,
                                        g=self.cfg.g, v_eps=self.cfg.v_eps)
        pre = self.state
        d0 = self._derivatives(pre.to_array(), inp)
        dv_x, dv_y, dw_z = float(d0[3]), float(d0[4]), float(d0[5])
        self.last_derivs = (dv_x, dv_y, dw_z)
        speed_sq = pre.v_x ** 2 + pre.v_y ** 2
        beta_dot = ((dv_y * pre.v_x - pre.v_y * dv_x) / speed_sq
                    if speed_sq > self.cfg.v_eps ** 2 else 0.0)
        self.last_accels = (dv_x, beta_dot, dw_z)
        self.last_wheel_accels = (float(d0[6]), float(d0[7]),
                                  float(d0[8]), float(d0[9]))

        vec = integrate_rk4(lambda x: self._derivatives(x, inp),
                            pre.to_array(), dt)
        self.state = VehicleState.from_array(vec)
        return self.state

    def measured_accelerations(self) -> tuple[float, float, float]:
        """(v_x', beta', omega_z') at the start of the last step."""
        if self.last_accels is None:
            raise RuntimeError("no step has been taken yet")
        return self.last_accels

    def kinetic_energy(self) -> float:
        st = self.state
        chassis = 0.5 * self.params.m * (st.v_x ** 2 + st.v_y ** 2)
        yaw = 0.5 * self.params.i_z * st.omega_z ** 2
        wheels = 0.5 * self.params.j_w * sum(w ** 2 for w in st.wheel_speeds)
        return chassis + yaw + wheels
