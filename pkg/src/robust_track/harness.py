"""Scenario orchestration: double-lane-change reference generation,
disturbance injection, the full adaptive control loop (and its
fixed-boundary variant), run metrics, comparison reports and CSV/plot
emission.

Loop order per controller period: tracking LQR -> side-slip allocation ->
phase trajectory -> robust slip/side-slip control -> sliding-mode
reallocation -> wheel torque control -> plant substeps (exact 10:1 rate
ratio, zero-order-held commands).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import bayes_tune, bsc_ctrl, gpr_bounds, lmi_ctrl, rls_ident, smc_ctrl
from . import tracking_lqr as tlqr
from .config import Config, default_config
from .plant import (Plant, PlantInput, VehicleParams, VehicleState,
                    wheel_forces, wheel_slip_states)

# flag bits of the per-sample trace column
FLAG_LMI_INFEASIBLE = 1
FLAG_LMI_STALE = 2
FLAG_LMI_CONSERVATIVE = 4
FLAG_SMC_BYPASS = 8
FLAG_ALLOC_FAIL = 16
FLAG_BETA_SAT = 32
FLAG_U_SAT = 64
FLAG_LMI_DEGRADED = 128
FLAG_LIN_SAT = 256

TRACE_COLUMNS = ("t", "x", "y", "psi", "v_x", "v_y", "omega_z", "beta",
                 "delta", "sigma_fl", "sigma_fr", "sigma_rl", "sigma_rr",
                 "T_fl", "T_fr", "T_rl", "T_rr", "e_x", "e_y", "e_psi",
                 "s", "flags")


class ComparisonError(Exception):
    """Metrics from different scenarios cannot be compared."""


class EmitError(Exception):
    """Output files could not be written."""


# ---------------------------------------------------------------------------
# Reference path
# ---------------------------------------------------------------------------

def _quintic_blend(t: float) -> tuple[float, float, float]:
    """Smoothstep with zero slope and curvature at both ends; returns
    (value, first, second) derivatives w.r.t. t."""
    value = t ** 3 * (10.0 - 15.0 * t + 6.0 * t ** 2)
    first = 30.0 * t ** 2 - 60.0 * t ** 3 + 30.0 * t ** 4
    second = 60.0 * t - 180.0 * t ** 2 + 120.0 * t ** 3
    return value, first, second


@dataclass
class PathGeometry:
    """Double-lane-change centerline: straight approach, quintic entry
    transition, offset lane, quintic return, exit straight."""
    offset: float
    lengths: tuple[float, float, float, float, float]

    def __post_init__(self):
        if any(length <= 0.0 for length in self.lengths):
            raise ValueError("section lengths must be positive")
        self._bounds = np.cumsum((0.0,) + tuple(self.lengths))
        xs = np.linspace(0.0, self.total_x, max(int(self.total_x / 0.05), 64))
        slopes = np.array([self.profile(x)[1] for x in xs])
        ds = np.sqrt(1.0 + slopes ** 2)
        s = np.concatenate(([0.0], np.cumsum(0.5 * (ds[1:] + ds[:-1]) * np.diff(xs))))
        self._x_grid = xs
        self._s_grid = s

    @property
    def total_x(self) -> float:
        return float(self._bounds[-1])

    @property
    def total_arclength(self) -> float:
        return float(self._s_grid[-1])

    def profile(self, x: float) -> tuple[float, float, float]:
        """(y, y', y'') of the centerline at abscissa x."""
        b = self._bounds
        if x < b[1] or x >= b[4]:
            return 0.0, 0.0, 0.0
        if x < b[2]:
            t = (x - b[1]) / self.lengths[1]
            v, d1, d2 = _quintic_blend(t)
            return (self.offset * v, self.offset * d1 / self.lengths[1],
                    self.offset * d2 / self.lengths[1] ** 2)
        if x < b[3]:
            return self.offset, 0.0, 0.0
        t = (x - b[3]) / self.lengths[3]
        v, d1, d2 = _quintic_blend(t)
        return (self.offset * (1.0 - v), -self.offset * d1 / self.lengths[3],
                -self.offset * d2 / self.lengths[3] ** 2)

    def at_arclength(self, s: float) -> tuple[float, float, float, float]:
        """(x, y, psi, curvature) at arc length s along the centerline."""
        s = min(max(s, 0.0), self.total_arclength)
        x = float(np.interp(s, self._s_grid, self._x_grid))
        y, slope, second = self.profile(x)
        psi = math.atan(slope)
        kappa = second / (1.0 + slope ** 2) ** 1.5
        return x, y, psi, kappa


@dataclass
class Scenario:
    """One experiment description: path, speed, disturbances, and the
    controller-vs-plant mismatch."""
    cfg: Config = field(default_factory=default_config)
    kind: str = "dlc"              # dlc | straight
    straight_length: float = 300.0

    def geometry(self) -> Optional[PathGeometry]:
        if self.kind == "dlc":
            return PathGeometry(self.cfg.scenario.lateral_offset,
                                self.cfg.scenario.section_lengths)
        return None

    def identity(self) -> str:
        payload = (self.kind, self.straight_length,
                   tuple(sorted(dataclasses.asdict(self.cfg.scenario).items())))
        return hashlib.md5(repr(payload).encode()).hexdigest()[:12]


def generate_reference(scenario: Scenario) -> list[tlqr.ReferencePoint]:
    """Reference points sampled at the controller period; heading is the
    path tangent and the yaw-rate reference is v * curvature."""
    sc = scenario.cfg.scenario
    period, v_ref = sc.period, sc.v_ref
    refs = []
    if scenario.kind == "straight":
        n = int(scenario.straight_length / (v_ref * period))
        for k in range(n):
            refs.append(tlqr.ReferencePoint(x_ref=v_ref * k * period, y_ref=0.0,
                                            psi_ref=0.0, v_ref=v_ref,
                                            omega_ref=0.0, curvature=0.0))
        return refs
    geom = scenario.geometry()
    n = int(geom.total_arclength / (v_ref * period))
    for k in range(n):
        x, y, psi, kappa = geom.at_arclength(v_ref * k * period)
        refs.append(tlqr.ReferencePoint(x_ref=x, y_ref=y, psi_ref=psi,
                                        v_ref=v_ref, omega_ref=v_ref * kappa,
                                        curvature=kappa))
    return refs


class DisturbanceSchedule:
    """Seeded piecewise-constant lateral-force / yaw-moment disturbance.
    ``uniform`` draws inside the box, ``edge`` sits exactly on it."""

    def __init__(self, kind: str, f_max: float, m_max: float,
                 resample: float, horizon: float, seed: int):
        if kind not in ("none", "uniform", "edge"):
            raise ValueError(f"unknown disturbance kind {kind!r}")
        self.kind = kind
        self.f_max, self.m_max = f_max, m_max
        self.resample = resample
        n = max(int(horizon / resample) + 2, 1)
        rng = np.random.default_rng(seed)
        if kind == "uniform":
            self._values = rng.uniform(-1.0, 1.0, size=(n, 2)) * (f_max, m_max)
        elif kind == "edge":
            self._values = rng.choice((-1.0, 1.0), size=(n, 2)) * (f_max, m_max)
        else:
            self._values = np.zeros((n, 2))
        assert np.all(np.abs(self._values[:, 0]) <= f_max)
        assert np.all(np.abs(self._values[:, 1]) <= m_max)

    def at(self, t: float) -> tuple[float, float]:
        idx = min(int(t / self.resample), self._values.shape[0] - 1)
        return float(self._values[idx, 0]), float(self._values[idx, 1])


# ---------------------------------------------------------------------------
# Trace and metrics
# ---------------------------------------------------------------------------

@dataclass
class Trace:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray
    v_x: np.ndarray
    v_y: np.ndarray
    omega_z: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray          # (n, 4) plant slip ratios
    torque: np.ndarray         # (n, 4)
    e_x: np.ndarray
    e_y: np.ndarray
    e_psi: np.ndarray
    s: np.ndarray
    flags: np.ndarray
    s_dot: np.ndarray          # frozen-reference surface rate
    omega_err: np.ndarray
    a_v: np.ndarray            # (n, 2) chassis accelerations
    phi_v: np.ndarray          # (n, 4) friction utilizations
    e_omega: np.ndarray        # (n, 4) wheel-speed errors
    e_omega_dot: np.ndarray    # (n, 4) frozen-reference error rates
    diverged: bool = False

    def __len__(self) -> int:
        return self.t.shape[0]

    def rows(self):
        for k in range(len(self)):
            yield (self.t[k], self.x[k], self.y[k], self.psi[k], self.v_x[k],
                   self.v_y[k], self.omega_z[k], self.beta[k], self.delta[k],
                   self.sigma[k, 0], self.sigma[k, 1], self.sigma[k, 2],
                   self.sigma[k, 3], self.torque[k, 0], self.torque[k, 1],
                   self.torque[k, 2], self.torque[k, 3], self.e_x[k],
                   self.e_y[k], self.e_psi[k], self.s[k], int(self.flags[k]))


@dataclass
class RunMetrics:
    scenario_id: str
    mode: str
    seed: int
    completed: bool
    max_abs_ey: float
    rms_ey: float
    max_abs_beta: float
    max_omega_err: float
    steer_cost: float          # sum |delta(k) - delta(k-1)|
    j_g: float
    lmi_infeasible: int
    smc_bypass: int
    alloc_failures: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def compute_metrics(trace: Trace, scenario_id: str, mode: str, seed: int,
                    weights: bayes_tune.CostWeights) -> RunMetrics:
    return RunMetrics(
        scenario_id=scenario_id, mode=mode, seed=seed,
        completed=not trace.diverged,
        max_abs_ey=float(np.max(np.abs(trace.e_y))) if len(trace) else math.nan,
        rms_ey=float(np.sqrt(np.mean(trace.e_y ** 2))) if len(trace) else math.nan,
        max_abs_beta=float(np.max(np.abs(trace.beta))) if len(trace) else math.nan,
        max_omega_err=float(np.max(np.abs(trace.omega_err))) if len(trace) else math.nan,
        steer_cost=float(np.sum(np.abs(np.diff(trace.delta)))) if len(trace) > 1 else 0.0,
        j_g=bayes_tune.global_cost(trace, weights),
        lmi_infeasible=int(np.sum(trace.flags & FLAG_LMI_INFEASIBLE > 0)),
        smc_bypass=int(np.sum(trace.flags & FLAG_SMC_BYPASS > 0)),
        alloc_failures=int(np.sum(trace.flags & FLAG_ALLOC_FAIL > 0)),
    )


# ---------------------------------------------------------------------------
# Robust boundary wiring
# ---------------------------------------------------------------------------

@dataclass
class IdentificationArtifacts:
    """Outputs of the identification stage consumed by runs and tuning.
    ``features_*`` hold the GP input rows and are only present on freshly
    collected artifacts (they are not persisted)."""
    theta_hat: np.ndarray
    traces: gpr_bounds.MismatchTraces
    holdout: Optional[gpr_bounds.MismatchTraces] = None
    features_s: Optional[np.ndarray] = None
    features_w: Optional[np.ndarray] = None
    seed: int = 0
    models: Optional[tuple] = None

    def save(self, path: str | Path) -> None:
        tr, ho = self.traces, self.holdout
        np.savez(path, theta_hat=self.theta_hat,
                 x_s=tr.x_s, xdot_gpr=tr.xdot_gpr, xdot_rls=tr.xdot_rls,
                 xdot_true=tr.xdot_true, e_omega=tr.e_omega,
                 edot_gpr=tr.edot_gpr, edot_rls=tr.edot_rls,
                 edot_true=tr.edot_true,
                 h_x_s=ho.x_s if ho else np.zeros((0, 2)),
                 h_xdot_gpr=ho.xdot_gpr if ho else np.zeros((0, 2)),
                 h_xdot_rls=ho.xdot_rls if ho else np.zeros((0, 2)),
                 h_xdot_true=ho.xdot_true if ho else np.zeros((0, 2)),
                 h_e_omega=ho.e_omega if ho else np.zeros(0),
                 h_edot_gpr=ho.edot_gpr if ho else np.zeros(0),
                 h_edot_rls=ho.edot_rls if ho else np.zeros(0),
                 h_edot_true=ho.edot_true if ho else np.zeros(0))

    @classmethod
    def load(cls, path: str | Path) -> "IdentificationArtifacts":
        data = np.load(path)
        traces = gpr_bounds.MismatchTraces(
            x_s=data["x_s"], xdot_gpr=data["xdot_gpr"], xdot_rls=data["xdot_rls"],
            xdot_true=data["xdot_true"], e_omega=data["e_omega"],
            edot_gpr=data["edot_gpr"], edot_rls=data["edot_rls"],
            edot_true=data["edot_true"])
        holdout = None
        if data["h_e_omega"].shape[0]:
            holdout = gpr_bounds.MismatchTraces(
                x_s=data["h_x_s"], xdot_gpr=data["h_xdot_gpr"],
                xdot_rls=data["h_xdot_rls"], xdot_true=data["h_xdot_true"],
                e_omega=data["h_e_omega"], edot_gpr=data["h_edot_gpr"],
                edot_rls=data["h_edot_rls"], edot_true=data["h_edot_true"])
        return cls(theta_hat=data["theta_hat"], traces=traces, holdout=holdout)

    def envelope_table(self, alpha_b, cfg: Config) -> gpr_bounds.EnvelopeTable:
        return gpr_bounds.build_envelopes(
            self.traces, alpha_b, delta_cells=cfg.gpr.delta_grid,
            rho_cells=cfg.gpr.rho_grid, holdout=self.holdout)


def boundary_sets(artifacts: IdentificationArtifacts, alpha_b,
                  cfg: Config, identifier: rls_ident.RlsIdentifier) -> dict:
    """Emitted boundary description at a scaling triple: stiffness box,
    sliding/wheel mismatch envelopes (grid maxima) and disturbance bounds."""
    lo, hi = identifier.theta_range(float(alpha_b[0]))
    table = artifacts.envelope_table(alpha_b, cfg)
    return {
        "alpha_b": [float(a) for a in alpha_b],
        "theta_lo": lo.tolist(),
        "theta_hi": hi.tolist(),
        "delta_max": float(np.max(table.delta_grid)),
        "rho_max": float(np.max(table.rho_grid)),
        "omega_s": table.omega_s,
        "omega_t": table.omega_t,
    }


# ---------------------------------------------------------------------------
# Control stack
# ---------------------------------------------------------------------------

class ControlStack:
    """All controller state for one run. ``mode`` selects the adaptive stack
    (RLS-updated stiffness, fitted envelopes) or the fixed-boundary variant
    (nominal stiffness, wide static range, inflated envelopes)."""

    def __init__(self, cfg: Config, mode: str,
                 table: Optional[gpr_bounds.EnvelopeTable] = None,
                 theta0: Optional[np.ndarray] = None,
                 alpha_btheta: float = 1.0):
        if mode not in ("arc", "lmi"):
            raise ValueError(f"unknown controller mode {mode!r}")
        self.cfg = cfg
        self.mode = mode
        self.alpha_btheta = alpha_btheta
        self.params = VehicleParams.from_config(cfg.vehicle)
        sc = cfg.scenario
        self.period = sc.period

        if mode == "lmi":
            theta0 = np.array([self.params.c_sigma, self.params.c_alpha])
            table = table.scaled(sc.fixed_envelope_scale) if table else None

        self.tracking = tlqr.TrackingController(
            np.diag(cfg.lqr.q_diag), np.diag(cfg.lqr.r_diag), sc.v_ref,
            resynth_dv=cfg.lqr.resynth_dv, resynth_domega=cfg.lqr.resynth_domega,
            w_beta=cfg.lqr.w_beta, period=self.period,
            beta_des_max=cfg.lqr.beta_des_max, beta_dot_max=cfg.lqr.beta_dot_max)
        self.identifier = rls_ident.RlsIdentifier(
            self.params, cfg.rls, theta0=theta0, v_eps=cfg.plant.v_eps)
        self.lmi = lmi_ctrl.LmiController(self.params, cfg.lmi, self.period)
        self.sliding = smc_ctrl.SlidingState(
            xi=cfg.smc.xi, eps_s=cfg.smc.eps_s, eta=cfg.smc.eta,
            kappa0=cfg.smc.kappa0, boundary_layer=cfg.smc.boundary_layer,
            k_min=cfg.smc.k_min)
        self.table = table
        env_scale = sc.fixed_envelope_scale if mode == "lmi" else 1.0
        self.static_delta = cfg.smc.static_delta * env_scale
        self.static_rho = cfg.bsc.static_rho * env_scale
        self.wheels = [bsc_ctrl.WheelController(
            self.params, self._wheel_envelope(), self.period,
            torque_max=cfg.plant.torque_max, v_eps=cfg.plant.v_eps)
            for _ in range(4)]
        self.prev_delta = 0.0
        self.alloc_failures = 0
        self.smc_bypasses = 0

    def theta_hat(self) -> np.ndarray:
        if self.mode == "lmi":
            return np.array([self.params.c_sigma, self.params.c_alpha])
        return self.identifier.theta

    def theta_range(self) -> tuple[np.ndarray, np.ndarray]:
        if self.mode == "lmi":
            width = self.cfg.scenario.fixed_theta_width
            nominal = self.theta_hat()
            return nominal * (1.0 - width), nominal * (1.0 + width)
        return self.identifier.theta_range(self.alpha_btheta)

    def _mismatch_envelope(self, k_hat: float) -> smc_ctrl.MismatchEnvelope:
        factor = math.sqrt(1.0 + self.sliding.xi ** 2)
        if self.table is None:
            return smc_ctrl.MismatchEnvelope.constant(self.static_delta)
        table = self.table

        def bound(beta: float, omega_z: float) -> float:
            raw = table.delta_at(beta, omega_z) + table.omega_s
            return factor * raw / max(k_hat, 1e-6)

        return smc_ctrl.MismatchEnvelope(delta_bound=bound, source="gpr")

    def _wheel_envelope(self) -> bsc_ctrl.WheelEnvelope:
        cfg = self.cfg.bsc
        if self.table is None:
            return bsc_ctrl.WheelEnvelope.constant(
                self.static_rho, gamma0=cfg.gamma0, k_omega=cfg.k_omega,
                boundary_layer=cfg.boundary_layer)
        table = self.table
        j_w = self.params.j_w

        def bound(e_omega: float) -> float:
            return j_w * (table.rho_at(e_omega) + table.omega_t)

        return bsc_ctrl.WheelEnvelope(rho_bound=bound, gamma0=cfg.gamma0,
                                      k_omega=cfg.k_omega,
                                      boundary_layer=cfg.boundary_layer)

    def rls_update(self, state: VehicleState, delta_meas: float,
                   torques: tuple[float, float, float, float],
                   accel: tuple[float, float, float]) -> None:
        if self.mode != "arc":
            return
        inp = PlantInput(delta=delta_meas, t_fl=torques[0], t_fr=torques[1],
                         t_rl=torques[2], t_rr=torques[3])
        self.identifier.update(state, inp, accel)

    def tick(self, state: VehicleState, ref: tlqr.ReferencePoint) -> dict:
        """One controller period; returns the command record."""
        cfg = self.cfg
        theta_hat = self.theta_hat()
        ctrl_params = self.params.with_stiffness(theta_hat[0], theta_hat[1])
        est_forces = wheel_forces(state, self.prev_delta, ctrl_params,
                                  g=cfg.plant.g, v_eps=cfg.plant.v_eps)

        error, traj, alloc = self.tracking.update(state, ref, est_forces,
                                                  ctrl_params)
        sigma_des, alpha_des, lmi_flags = self.lmi.update(
            state, traj, theta_hat, self.theta_range())
        delta_cmd = lmi_ctrl.steering_command(state, alpha_des, ctrl_params,
                                              prev_delta=self.prev_delta,
                                              v_eps=cfg.plant.v_eps)
        delta_cmd = max(-cfg.plant.delta_max, min(cfg.plant.delta_max, delta_cmd))
        self.prev_delta = delta_cmd

        x_s = (state.beta, state.omega_z)
        s = smc_ctrl.surface(x_s, traj, self.sliding.xi)
        self.sliding.s = s
        nominal = smc_ctrl.nominal_sliding_model(
            state, traj, sigma_des, alpha_des, tuple(theta_hat), ctrl_params,
            self.sliding.xi, g=cfg.plant.g)
        bypass = False
        try:
            env = self._mismatch_envelope(nominal[1])
            u_s = smc_ctrl.control_law(x_s, s, nominal, env, self.sliding)
        except smc_ctrl.SmcBypassError:
            u_s, bypass = 0.0, True
            self.smc_bypasses += 1

        allocation = smc_ctrl.allocate_slip(u_s, sigma_des, alpha_des, state,
                                            ctrl_params, tuple(theta_hat))
        if not allocation.converged:
            self.alloc_failures += 1

        slips = wheel_slip_states(state, delta_cmd, ctrl_params,
                                  v_eps=cfg.plant.v_eps)
        torques = []
        e_omegas = []
        side_sigma = (allocation.sigma_l, allocation.sigma_r,
                      allocation.sigma_l, allocation.sigma_r)
        for i in range(4):
            torque, e_omega = self.wheels[i].update(
                side_sigma[i], slips[i][2], state.wheel_speeds[i],
                est_forces[i].f_x_wheel)
            torques.append(torque)
            e_omegas.append(e_omega)

        flags = 0
        if lmi_flags["infeasible"]:
            flags |= FLAG_LMI_INFEASIBLE
        if lmi_flags["stale"]:
            flags |= FLAG_LMI_STALE
        if lmi_flags["conservative"]:
            flags |= FLAG_LMI_CONSERVATIVE
        if lmi_flags["degraded"]:
            flags |= FLAG_LMI_DEGRADED
        if lmi_flags["lin_saturated"]:
            flags |= FLAG_LIN_SAT
        if lmi_flags["saturated"]:
            flags |= FLAG_U_SAT
        if bypass:
            flags |= FLAG_SMC_BYPASS
        if not allocation.converged:
            flags |= FLAG_ALLOC_FAIL
        if alloc.saturated:
            flags |= FLAG_BETA_SAT

        return {
            "error": error, "traj": traj, "delta_cmd": delta_cmd,
            "sigma_des": sigma_des, "alpha_des": alpha_des, "u_s": u_s,
            "s": s, "torques": tuple(torques), "e_omegas": tuple(e_omegas),
            "omega_refs": tuple(w.omega_ref for w in self.wheels),
            "flags": flags,
        }


# ---------------------------------------------------------------------------
# Run loop
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    trace: Trace
    metrics: RunMetrics
    stack: ControlStack


def _plant_params(cfg: Config) -> VehicleParams:
    sc = cfg.scenario
    nominal = VehicleParams.from_config(cfg.vehicle)
    return dataclasses.replace(
        nominal,
        c_sigma=nominal.c_sigma * sc.plant_c_sigma_scale,
        c_alpha=nominal.c_alpha * sc.plant_c_alpha_scale,
        j_w=nominal.j_w * sc.plant_j_w_scale,
        b_e=nominal.b_e * sc.plant_b_e_scale)


def run(scenario: Scenario, mode: str, seed: int,
        artifacts: Optional[IdentificationArtifacts] = None,
        alpha_b=None, dist_kind: Optional[str] = None) -> RunResult:
    """Execute one scenario under the selected controller mode."""
    cfg = scenario.cfg
    sc = cfg.scenario
    refs = generate_reference(scenario)
    horizon = len(refs) * sc.period

    n_sub = round(sc.period / cfg.plant.dt)
    assert abs(n_sub * cfg.plant.dt - sc.period) < 1e-12 and n_sub == 10, \
        "controller/plant rate ratio must be exactly 10"

    table = None
    theta0 = None
    alpha = np.asarray(alpha_b if alpha_b is not None else (1.0, 1.0, 1.0),
                       dtype=float)
    if artifacts is not None:
        table = artifacts.envelope_table(alpha, cfg)
        theta0 = artifacts.theta_hat.copy()
    stack = ControlStack(cfg, mode, table=table, theta0=theta0,
                         alpha_btheta=float(alpha[0]))

    plant = Plant(_plant_params(cfg),
                  VehicleState(v_x=sc.v_ref,
                               w_fl=sc.v_ref / cfg.vehicle.r_w,
                               w_fr=sc.v_ref / cfg.vehicle.r_w,
                               w_rl=sc.v_ref / cfg.vehicle.r_w,
                               w_rr=sc.v_ref / cfg.vehicle.r_w),
                  cfg.plant)
    schedule = DisturbanceSchedule(dist_kind or sc.dist_kind, sc.dist_f_max,
                                   sc.dist_m_max, sc.dist_resample,
                                   horizon, seed)

    delta_act = 0.0
    lag = sc.steer_lag
    rows: list[dict] = []
    diverged = False
    meas: Optional[tuple] = None   # (state, delta_meas, torques, accel)

    for k, ref in enumerate(refs):
        t = k * sc.period
        state = plant.state

        if meas is not None:
            stack.rls_update(*meas)

        rec = stack.tick(state, ref)
        error = rec["error"]
        traj = rec["traj"]
        if abs(error.e_y) > sc.diverge_ey or abs(state.beta) > sc.diverge_beta:
            diverged = True
            break

        f_ey, m_ez = schedule.at(t)
        torques = rec["torques"]
        plant_sigma = tuple(sl[0] for sl in
                            wheel_slip_states(state, delta_act, plant.params,
                                              v_eps=cfg.plant.v_eps))

        first_accel = None
        for _ in range(n_sub):
            if lag > 0.0:
                delta_act += (cfg.plant.dt / lag) * (rec["delta_cmd"] - delta_act)
            else:
                delta_act = rec["delta_cmd"]
            plant.step(PlantInput(delta=delta_act, t_fl=torques[0],
                                  t_fr=torques[1], t_rl=torques[2],
                                  t_rr=torques[3], f_ey=f_ey, m_ez=m_ez),
                       cfg.plant.dt)
            if first_accel is None:
                first_accel = (plant.measured_accelerations(),
                               plant.last_derivs,
                               tuple(f.utilization for f in plant.last_forces))
        accel, derivs, utilization = first_accel

        next_state = plant.state
        s_next = smc_ctrl.surface((next_state.beta, next_state.omega_z),
                                  traj, stack.sliding.xi)
        e_omega_next = tuple(next_state.wheel_speeds[i] - rec["omega_refs"][i]
                             for i in range(4))

        # identification sees the actuator position, not the command
        meas = (state, delta_act, torques, accel)

        rows.append({
            "t": t, "state": state, "delta": rec["delta_cmd"],
            "sigma": plant_sigma, "torque": torques, "error": error,
            "s": rec["s"], "s_dot": (s_next - rec["s"]) / sc.period,
            "omega_err": state.omega_z - traj.omega_z_des,
            "a_v": (derivs[0], derivs[1]), "phi_v": utilization,
            "e_omega": rec["e_omegas"],
            "e_omega_dot": tuple((e_omega_next[i] - rec["e_omegas"][i]) / sc.period
                                 for i in range(4)),
            "flags": rec["flags"],
        })

    trace = _assemble_trace(rows, diverged)
    weights = bayes_tune.CostWeights.from_config(cfg.tune)
    metrics = compute_metrics(trace, scenario.identity(), mode, seed, weights)
    return RunResult(trace=trace, metrics=metrics, stack=stack)


def _assemble_trace(rows: list[dict], diverged: bool) -> Trace:
    def arr(getter):
        return np.array([getter(r) for r in rows])

    return Trace(
        t=arr(lambda r: r["t"]),
        x=arr(lambda r: r["state"].x), y=arr(lambda r: r["state"].y),
        psi=arr(lambda r: r["state"].psi),
        v_x=arr(lambda r: r["state"].v_x), v_y=arr(lambda r: r["state"].v_y),
        omega_z=arr(lambda r: r["state"].omega_z),
        beta=arr(lambda r: r["state"].beta),
        delta=arr(lambda r: r["delta"]),
        sigma=arr(lambda r: r["sigma"]).reshape(-1, 4) if rows else np.zeros((0, 4)),
        torque=arr(lambda r: r["torque"]).reshape(-1, 4) if rows else np.zeros((0, 4)),
        e_x=arr(lambda r: r["error"].e_x), e_y=arr(lambda r: r["error"].e_y),
        e_psi=arr(lambda r: r["error"].e_psi),
        s=arr(lambda r: r["s"]), flags=arr(lambda r: r["flags"]).astype(int)
        if rows else np.zeros(0, dtype=int),
        s_dot=arr(lambda r: r["s_dot"]),
        omega_err=arr(lambda r: r["omega_err"]),
        a_v=arr(lambda r: r["a_v"]).reshape(-1, 2) if rows else np.zeros((0, 2)),
        phi_v=arr(lambda r: r["phi_v"]).reshape(-1, 4) if rows else np.zeros((0, 4)),
        e_omega=arr(lambda r: r["e_omega"]).reshape(-1, 4) if rows else np.zeros((0, 4)),
        e_omega_dot=arr(lambda r: r["e_omega_dot"]).reshape(-1, 4)
        if rows else np.zeros((0, 4)),
        diverged=diverged,
    )


# ---------------------------------------------------------------------------
# Identification stage
# ---------------------------------------------------------------------------

def run_identification(cfg: Config, seed: int, duration: float = 12.0,
                       excite_steer: float = 0.022, excite_slip: float = 0.012
                       ) -> tuple[IdentificationArtifacts, rls_ident.RlsIdentifier]:
    """Scripted excitation on a straight road: chirped steering plus a slow
    speed wobble, disturbances on, collecting the aligned prediction traces
    the envelope construction needs. GP predictions are filled in by
    ``fit_mismatch_gps``."""
    scenario = Scenario(cfg=cfg, kind="straight",
                        straight_length=duration * cfg.scenario.v_ref)
    sc = cfg.scenario
    refs = generate_reference(scenario)
    stack = ControlStack(cfg, "arc", table=None)
    plant = Plant(_plant_params(cfg),
                  VehicleState(v_x=sc.v_ref,
                               w_fl=sc.v_ref / cfg.vehicle.r_w,
                               w_fr=sc.v_ref / cfg.vehicle.r_w,
                               w_rl=sc.v_ref / cfg.vehicle.r_w,
                               w_rr=sc.v_ref / cfg.vehicle.r_w),
                  cfg.plant)
    schedule = DisturbanceSchedule(sc.dist_kind, sc.dist_f_max, sc.dist_m_max,
                                   sc.dist_resample, duration, seed)
    n_sub = round(sc.period / cfg.plant.dt)

    rows_s = []      # (beta, omega_z, delta, sigma_mean, bdot, wdot) truth
    rows_rls = []    # identified-model (bdot, wdot)
    rows_w = []      # (e_omega, w, torque, edot_true, edot_rls)
    delta_act = 0.0
    meas = None
    params = stack.params

    for k, ref in enumerate(refs):
        t = k * sc.period
        state = plant.state
        if meas is not None:
            stack.rls_update(*meas)
        rec = stack.tick(state, ref)

        # scripted excitation on top of the stack commands
        chirp_f = 0.2 + 0.05 * t
        delta_cmd = rec["delta_cmd"] + excite_steer * math.sin(
            2.0 * math.pi * chirp_f * t)
        stack.prev_delta = delta_cmd
        sigma_exc = excite_slip * math.sin(2.0 * math.pi * 0.15 * t + 1.0)
        torques = tuple(tq + sigma_exc * params.c_sigma * params.r_w
                        for tq in rec["torques"])

        f_ey, m_ez = schedule.at(t)
        first = None
        for _ in range(n_sub):
            if sc.steer_lag > 0.0:
                delta_act += (cfg.plant.dt / sc.steer_lag) * (delta_cmd - delta_act)
            else:
                delta_act = delta_cmd
            plant.step(PlantInput(delta=delta_act, t_fl=torques[0],
                                  t_fr=torques[1], t_rl=torques[2],
                                  t_rr=torques[3], f_ey=f_ey, m_ez=m_ez),
                       cfg.plant.dt)
            if first is None:
                first = (plant.measured_accelerations(), plant.last_wheel_accels)
        accel, wheel_accels = first
        meas = (state, delta_act, torques, accel)

        theta_hat = stack.theta_hat()
        reg = rls_ident.build_regressor(state, PlantInput(delta=delta_act,
                                                          t_fl=torques[0],
                                                          t_fr=torques[1],
                                                          t_rl=torques[2],
                                                          t_rr=torques[3]),
                                        params, accel, theta_gate=theta_hat,
                                        v_eps=cfg.plant.v_eps)
        if reg is not None:
            pred_force = reg.phi @ theta_hat
            bdot_rls = pred_force[1] / (params.m * state.v_x) - state.omega_z
            wdot_rls = pred_force[2] / params.i_z
            slips = wheel_slip_states(state, delta_act, params,
                                      v_eps=cfg.plant.v_eps)
            sigma_mean = sum(sl[0] for sl in slips) / 4.0
            rows_s.append((state.beta, state.omega_z, delta_act, sigma_mean,
                           accel[1], accel[2]))
            rows_rls.append((bdot_rls, wdot_rls))

        ctrl_params = params.with_stiffness(theta_hat[0], theta_hat[1])
        est_forces = wheel_forces(state, delta_act, ctrl_params,
                                  g=cfg.plant.g, v_eps=cfg.plant.v_eps)
        for i in range(4):
            w = state.wheel_speeds[i]
            edot_rls = (torques[i] - params.r_w * est_forces[i].f_x_wheel
                        - params.b_e * w) / params.j_w
            rows_w.append((rec["e_omegas"][i], w, torques[i],
                           wheel_accels[i], edot_rls))

    return (_make_artifacts(stack.theta_hat(), rows_s, rows_rls, rows_w, seed),
            stack.identifier)


def _make_artifacts(theta_hat, rows_s, rows_rls, rows_w, seed
                    ) -> IdentificationArtifacts:
    rows_s = np.asarray(rows_s, dtype=float)
    rows_rls = np.asarray(rows_rls, dtype=float)
    rows_w = np.asarray(rows_w, dtype=float)
    if rows_s.shape[0] < 10 or rows_w.shape[0] < 10:
        raise RuntimeError("identification produced too few usable samples")
    traces = gpr_bounds.MismatchTraces(
        x_s=rows_s[:, 0:2],
        xdot_gpr=np.zeros((rows_s.shape[0], 2)),   # filled by fit_mismatch_gps
        xdot_rls=rows_rls,
        xdot_true=rows_s[:, 4:6],
        e_omega=rows_w[:, 0],
        edot_gpr=np.zeros(rows_w.shape[0]),
        edot_rls=rows_w[:, 4],
        edot_true=rows_w[:, 3])
    return IdentificationArtifacts(theta_hat=np.asarray(theta_hat, dtype=float),
                                   traces=traces, features_s=rows_s[:, 0:4],
                                   features_w=rows_w[:, 0:3], seed=seed)


def fit_mismatch_gps(artifacts: IdentificationArtifacts, cfg: Config,
                     holdout_fraction: float = 0.3
                     ) -> IdentificationArtifacts:
    """Fit the three mismatch GPs (side-slip rate, yaw acceleration, wheel
    error rate) on the identification features and fill the prediction
    columns; the tail of each trace is split off for coverage checks."""
    if artifacts.features_s is None or artifacts.features_w is None:
        raise ValueError("artifacts lack GP features; refit from a fresh "
                         "identification run")
    rng = np.random.default_rng(artifacts.seed + 17)
    feats_s = artifacts.features_s
    feats_w = artifacts.features_w
    tr = artifacts.traces
    cap = cfg.gpr.max_train

    def thin(n_total):
        if n_total <= cap:
            return np.arange(n_total)
        return np.sort(rng.choice(n_total, size=cap, replace=False))

    idx_s = thin(feats_s.shape[0])
    gp_b = gpr_bounds.fit(feats_s[idx_s], tr.xdot_true[idx_s, 0],
                          n_restarts=cfg.gpr.restarts)
    gp_w = gpr_bounds.fit(feats_s[idx_s], tr.xdot_true[idx_s, 1],
                          n_restarts=cfg.gpr.restarts)
    xdot_gpr = np.column_stack([gpr_bounds.predict(gp_b, feats_s)[0],
                                gpr_bounds.predict(gp_w, feats_s)[0]])

    idx_w = thin(feats_w.shape[0])
    gp_e = gpr_bounds.fit(feats_w[idx_w], tr.edot_true[idx_w],
                          n_restarts=cfg.gpr.restarts)
    edot_gpr = gpr_bounds.predict(gp_e, feats_w)[0]

    n_s = feats_s.shape[0]
    n_w = feats_w.shape[0]
    cut_s = int(n_s * (1.0 - holdout_fraction))
    cut_w = int(n_w * (1.0 - holdout_fraction))
    train = gpr_bounds.MismatchTraces(
        x_s=tr.x_s[:cut_s], xdot_gpr=xdot_gpr[:cut_s],
        xdot_rls=tr.xdot_rls[:cut_s], xdot_true=tr.xdot_true[:cut_s],
        e_omega=tr.e_omega[:cut_w], edot_gpr=edot_gpr[:cut_w],
        edot_rls=tr.edot_rls[:cut_w], edot_true=tr.edot_true[:cut_w])
    holdout = gpr_bounds.MismatchTraces(
        x_s=tr.x_s[cut_s:], xdot_gpr=xdot_gpr[cut_s:],
        xdot_rls=tr.xdot_rls[cut_s:], xdot_true=tr.xdot_true[cut_s:],
        e_omega=tr.e_omega[cut_w:], edot_gpr=edot_gpr[cut_w:],
        edot_rls=tr.edot_rls[cut_w:], edot_true=tr.edot_true[cut_w:])
    return IdentificationArtifacts(theta_hat=artifacts.theta_hat,
                                   traces=train, holdout=holdout,
                                   seed=artifacts.seed,
                                   models=(gp_b, gp_w, gp_e))


# ---------------------------------------------------------------------------
# Comparison and emission
# ---------------------------------------------------------------------------

LOWER_IS_BETTER = ("max_abs_ey", "rms_ey", "max_abs_beta", "max_omega_err",
                   "steer_cost", "j_g", "lmi_infeasible", "smc_bypass",
                   "alloc_failures")


def compare(metrics_a: RunMetrics | list[RunMetrics],
            metrics_b: RunMetrics | list[RunMetrics]) -> dict:
    """Per-metric deltas (a - b) with the sign of improvement; batch inputs
    are reduced to medians seed-by-seed."""
    list_a = [metrics_a] if isinstance(metrics_a, RunMetrics) else list(metrics_a)
    list_b = [metrics_b] if isinstance(metrics_b, RunMetrics) else list(metrics_b)
    if len(list_a) != len(list_b):
        raise ComparisonError("metric lists differ in length")
    for a, b in zip(list_a, list_b):
        if a.scenario_id != b.scenario_id or a.seed != b.seed:
            raise ComparisonError(
                f"scenario/seed mismatch: {a.scenario_id}/{a.seed} vs "
                f"{b.scenario_id}/{b.seed}")
    report = {"mode_a": list_a[0].mode, "mode_b": list_b[0].mode,
              "n_runs": len(list_a), "metrics": {}}
    for name in LOWER_IS_BETTER:
        va = float(np.median([getattr(m, name) for m in list_a]))
        vb = float(np.median([getattr(m, name) for m in list_b]))
        report["metrics"][name] = {
            "a": va, "b": vb, "delta": va - vb,
            "a_improves": bool(va < vb),
        }
    return report


def format_comparison(report: dict) -> str:
    lines = [f"{report['mode_a']} vs {report['mode_b']} over "
             f"{report['n_runs']} run(s)",
             f"{'metric':<16}{'a':>14}{'b':>14}{'delta':>14}  better"]
    for name, row in report["metrics"].items():
        better = report["mode_a"] if row["a_improves"] else report["mode_b"]
        lines.append(f"{name:<16}{row['a']:>14.6g}{row['b']:>14.6g}"
                     f"{row['delta']:>14.6g}  {better}")
    return "\n".join(lines)


PLOT_SCRIPT = """\
#!/usr/bin/env python3
\"\"\"Render the run trace: trajectory, lateral error, steering, side slip
and yaw rate panels. Usage: python plot_trace.py trace.csv [out.png]\"\"\"
import csv
import sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt


def main():
    path = sys.argv[1] if len(sys.argv) > 1 else "trace.csv"
    out = sys.argv[2] if len(sys.argv) > 2 else "trace.png"
    cols = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            for key, val in row.items():
                cols.setdefault(key, []).append(float(val))
    fig, axes = plt.subplots(5, 1, figsize=(9, 12), sharex=False)
    axes[0].plot(cols["x"], cols["y"])
    axes[0].set_xlabel("x [m]"); axes[0].set_ylabel("y [m]")
    axes[0].set_title("trajectory")
    for ax, key, label in ((axes[1], "e_y", "lateral error [m]"),
                           (axes[2], "delta", "steering [rad]"),
                           (axes[3], "beta", "side slip [rad]"),
                           (axes[4], "omega_z", "yaw rate [rad/s]")):
        ax.plot(cols["t"], cols[key])
        ax.set_xlabel("t [s]"); ax.set_ylabel(label); ax.grid(True)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(out)


if __name__ == "__main__":
    main()
"""


def emit(trace: Trace, out_dir: str | Path, metrics: Optional[RunMetrics] = None
         ) -> list[Path]:
    """Write trace.csv (fixed 22-column schema), the standalone plot script
    and, when given, metrics.json."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "trace.csv"
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(TRACE_COLUMNS) + "\n")
            for row in trace.rows():
                rendered = [f"{v:.17g}" if isinstance(v, float) else str(v)
                            for v in row]
                fh.write(",".join(rendered) + "\n")
        script_path = out / "plot_trace.py"
        script_path.write_text(PLOT_SCRIPT, encoding="utf-8")
        paths = [csv_path, script_path]
        if metrics is not None:
            metrics_path = out / "metrics.json"
            metrics_path.write_text(json.dumps(metrics.to_dict(), indent=1),
                                    encoding="utf-8")
            paths.append(metrics_path)
        return paths
    except OSError as exc:
        raise EmitError(f"cannot write outputs under {out}: {exc}") from exc


def parse_trace_csv(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        data = np.array([[float(v) for v in line.strip().split(",")]
                         for line in fh if line.strip()])
    if data.size == 0:
        data = np.zeros((0, len(header)))
    return {name: data[:, i] for i, name in enumerate(header)}
