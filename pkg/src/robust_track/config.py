"""Run configuration: defaults for every tunable constant, plus a flat
``key = value`` config-file loader.

Keys use dotted section names (``smc.xi = 3.0``). Unknown keys are rejected
so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field


class ConfigError(Exception):
    pass


@dataclass
class VehicleConfig:
    m: float = 1653.0           # kg
    i_z: float = 3234.0         # kg m^2
    l_f: float = 1.402          # m, front axle to CoM
    l_r: float = 1.646          # m, rear axle to CoM
    d: float = 0.8              # m, half track width
    r_w: float = 0.3            # m, effective tire radius
    j_w: float = 1.2            # kg m^2, wheel spin inertia
    b_e: float = 0.05           # N m s, wheel damping
    c_sigma: float = 63292.5    # N per unit slip
    c_alpha: float = 64934.5    # N/rad
    mu: float = 0.85            # adhesion coefficient
    h: float = 0.57             # m, CoM height


@dataclass
class PlantConfig:
    g: float = 9.81
    dt: float = 0.001           # plant integration step, s
    v_eps: float = 0.5          # m/s, low-speed guard
    c_roll: float = 0.012       # rolling-resistance coefficient
    delta_max: float = 0.6      # rad, steering clamp
    torque_max: float = 1500.0  # N m, per-wheel torque clamp


@dataclass
class LqrConfig:
    q_diag: tuple[float, float, float] = (8.0, 12.0, 6.0)
    r_diag: tuple[float, float] = (1.0, 2.0)
    resynth_dv: float = 0.5       # m/s change that forces a gain re-solve
    resynth_domega: float = 0.02  # rad/s change that forces a gain re-solve
    w_beta: float = 25.0          # smoothing weight on beta-rate allocation
    beta_des_max: float = 0.12    # rad, desired side-slip clamp
    beta_dot_max: float = 0.5     # rad/s, allocation search range


@dataclass
class LmiConfig:
    q_diag: tuple[float, float] = (4.0, 10.0)
    r_diag: tuple[float, float] = (2.0, 2.0)
    cadence: int = 50             # controller periods between syntheses
    theta_change: float = 0.10    # fractional stiffness change forcing re-synthesis
    stale_limit: int = 5          # periods a stale gain may keep running
    sigma_max: float = 0.15       # desired slip-ratio clamp
    alpha_max: float = 0.12      # rad, desired tire side-slip clamp
    sdp_tol: float = 1e-7         # strictness margin for the synthesis block


@dataclass
class SmcConfig:
    xi: float = 3.0
    eps_s: float = 0.05
    eta: float = 2.0
    kappa0: float = 0.02
    boundary_layer: float = 0.01
    k_min: float = 1e-3
    static_delta: float = 0.02    # fallback envelope when no fitted table is loaded


@dataclass
class BscConfig:
    # k_omega = 10 rather than 8: settling from a 20 rad/s error into the
    # 0.5 rad/s layer within 0.5 s needs k >= j_w*ln(40)/0.5 = 8.85.
    k_omega: float = 10.0
    gamma0: float = 0.2
    boundary_layer: float = 0.5   # rad/s
    static_rho: float = 20.0      # N m fallback envelope


@dataclass
class RlsConfig:
    lambda_min: float = 0.95
    h_coef: float = 0.9
    sigma_eps: float = 45.0       # N, innovation threshold (~3x measurement noise)
    p0: float = 1e8
    theta_lo: float = 1e3
    theta_hi: float = 3e5
    range_sigmas: float = 3.0     # theta range half-width in posterior std units
    range_floor: float = 0.02     # minimum fractional half-width of theta range
    pe_window: int = 50


@dataclass
class GprConfig:
    max_train: int = 500
    jitter: float = 1e-6
    restarts: int = 5
    delta_grid: int = 8           # cells per axis of the (beta, omega_z) envelope grid
    rho_grid: int = 10            # cells of the wheel-error envelope grid


@dataclass
class TuneConfig:
    kappa_b: float = 2.0
    alpha_lo: float = 0.1
    alpha_hi: float = 5.0
    n_seed: int = 6
    candidates: int = 4096
    acquisition: str = "lcb"      # "lcb" or "paper-ucb" (literal mu + kappa*sigma)
    w_e: tuple[float, float, float] = (1.0, 100.0, 10.0)
    w_a: tuple[float, float] = (0.5, 0.5)
    w_phi: float = 5.0
    alpha0: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass
class ScenarioConfig:
    v_ref: float = 16.67              # m/s (60 km/h)
    lateral_offset: float = 3.5       # m
    section_lengths: tuple[float, float, float, float, float] = (
        25.0, 30.0, 25.0, 30.0, 40.0)  # approach, entry, offset lane, return, exit
    period: float = 0.01              # controller period, s
    dist_f_max: float = 1000.0        # N, lateral force disturbance extreme
    dist_m_max: float = 1000.0        # N m, yaw moment disturbance extreme
    dist_kind: str = "uniform"        # none | uniform | edge
    dist_resample: float = 0.05       # s, hold interval of the random schedule
    plant_c_sigma_scale: float = 1.15  # plant-vs-controller stiffness offset
    plant_c_alpha_scale: float = 0.85
    plant_j_w_scale: float = 1.0      # optional wheel-parameter offset
    plant_b_e_scale: float = 1.0
    steer_lag: float = 0.030          # s, first-order steering actuator lag
    diverge_ey: float = 5.0           # m, abort threshold
    diverge_beta: float = 0.5         # rad, abort threshold
    fixed_theta_width: float = 0.40   # stiffness range of the fixed-boundary mode
    fixed_envelope_scale: float = 2.0  # envelope inflation of the fixed-boundary mode


@dataclass
class Config:
    vehicle: VehicleConfig = field(default_factory=VehicleConfig)
    plant: PlantConfig = field(default_factory=PlantConfig)
    lqr: LqrConfig = field(default_factory=LqrConfig)
    lmi: LmiConfig = field(default_factory=LmiConfig)
    smc: SmcConfig = field(default_factory=SmcConfig)
    bsc: BscConfig = field(default_factory=BscConfig)
    rls: RlsConfig = field(default_factory=RlsConfig)
    gpr: GprConfig = field(default_factory=GprConfig)
    tune: TuneConfig = field(default_factory=TuneConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)


def default_config() -> Config:
    return Config()


def _coerce(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if len(parts) != len(current):
            raise ConfigError(f"expected {len(current)} comma-separated values, got {raw!r}")
        return tuple(float(p) for p in parts)
    return raw


def apply_overrides(cfg: Config, items: dict[str, str]) -> Config:
    """Apply ``section.key -> raw string`` overrides onto a config."""
    for key, raw in items.items():
        if "." not in key:
            raise ConfigError(f"unknown config key {key!r} (expected section.name)")
        section_name, field_name = key.split(".", 1)
        if not hasattr(cfg, section_name) or not dataclasses.is_dataclass(getattr(cfg, section_name)):
            raise ConfigError(f"unknown config section {section_name!r}")
        section = getattr(cfg, section_name)
        if field_name not in {f.name for f in dataclasses.fields(section)}:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            value = _coerce(raw, getattr(section, field_name))
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
        setattr(section, field_name, value)
    return cfg


def load_config(path: str | os.PathLike) -> Config:
    """Load a flat key=value config file on top of the defaults."""
    items: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {stripped!r}")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key in items:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            items[key] = raw.split("#", 1)[0].strip()
    return apply_overrides(default_config(), items)


def dump_config(cfg: Config) -> str:
    """Render a config back to the flat key=value form."""
    lines = []
    for section_field in dataclasses.fields(cfg):
        section = getattr(cfg, section_field.name)
        for f in dataclasses.fields(section):
            value = getattr(section, f.name)
            if isinstance(value, tuple):
                value = ", ".join(repr(v) for v in value)
            lines.append(f"{section_field.name}.{f.name} = {value}")
    return "\n".join(lines) + "\n"


def max_threads(default: int = 1) -> int:
    """Evaluation parallelism cap, overridable via ROBUST_TRACK_THREADS."""
    raw = os.environ.get("ROBUST_TRACK_THREADS")
    if raw is None:
        return default
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"ROBUST_TRACK_THREADS must be an integer, got {raw!r}") from exc
    return max(1, value)
