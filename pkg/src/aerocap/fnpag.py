"""Fully numeric predictor-corrector aerocapture guidance (apoapsis targeting).

Phase 1 flies a small bank ``sigma_0`` and solves for the time to switch to
``sigma_f``; phase 2 re-solves a constant bank magnitude every cycle. Both
solves drive the exit-energy error to zero with bracketed Brent iterations
on predictions made with the onboard models (bank held constant, no lag).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .dynamics import SimState, VehicleParams, inertial_velocity
from .environment import G0_EARTH, PlanetModel, PolyAtmosphere
from .roots import NoBracketError, brent

CHI_DEFAULT = math.exp(-1.0 / 6.0)
MIN_MODELED_ACCEL = 1e-9


@dataclass(frozen=True)
class FnpagConfig:
    r_a_target: float
    sigma_0: float = math.radians(10.0)
    sigma_f: float = math.radians(90.0)
    t_switch_init: float = 300.0
    g_limit: float = 0.1
    guidance_period: float = 1.0
    t_f: float = 1500.0
    h_exit: float = 1000.0e3
    pred_dt: float = 2.0
    # bracket-width tolerances for the two solves and an |err| stop
    t_switch_tol: float = 0.05
    sigma_tol: float = 1e-4
    brent_tol: float = 1e-9
    max_iter: int = 100
    use_filter: bool = True
    chi: float = CHI_DEFAULT
    target_inclination: float | None = None
    lateral_deadband: float = math.radians(0.25)
    max_reversals: int = 6

    def __post_init__(self):
        if not 0 <= self.sigma_0 < self.sigma_f <= math.pi:
            raise ValueError("need 0 <= sigma_0 < sigma_f <= pi")
        if not self.g_limit > 0:
            raise ValueError("g_limit must be positive")
        if not 0 < self.chi < 1:
            raise ValueError("chi must lie in (0, 1)")


@dataclass
class FnpagState:
    phase: int = 1
    t_switch: float = 300.0
    sigma_star: float = math.radians(90.0)
    guid_enabled: bool = False
    bank_sign: int = 1
    reversals: int = 0
    err: float = math.nan
    t_enable: float | None = None
    i_target: float | None = None
    last_command: float | None = None


@dataclass(frozen=True)
class FadingFilter:
    rho_L: float = 1.0
    rho_D: float = 1.0
    chi: float = CHI_DEFAULT

    def __post_init__(self):
        if not 0 < self.chi < 1:
            raise ValueError("chi must lie in (0, 1)")


def fading_filter_update(filt: FadingFilter, L: float, D: float, L_model: float,
                         D_model: float) -> FadingFilter:
    """One first-order fading-memory step on the lift and drag ratios.

    A channel whose modeled force is below ``MIN_MODELED_ACCEL`` is left as is.
    """
    g = 1.0 - filt.chi
    rho_L, rho_D = filt.rho_L, filt.rho_D
    if L_model > MIN_MODELED_ACCEL:
        rho_L = rho_L + g * (L / L_model - rho_L)
    if D_model > MIN_MODELED_ACCEL:
        rho_D = rho_D + g * (D / D_model - rho_D)
    return FadingFilter(rho_L, rho_D, filt.chi)


@dataclass(frozen=True)
class OnboardModels:
    """What guidance believes: planet, atmosphere and nominal vehicle."""

    planet: PlanetModel = field(default_factory=PlanetModel)
    atm: object = field(default_factory=PolyAtmosphere)
    vehicle: VehicleParams = field(default_factory=VehicleParams)

    def kernel_args(self):
        return self.planet.as_array(), *self.atm.kernel_args(), self.vehicle.as_array()


def energy_error(exit: SimState, r_a_target: float, planet: PlanetModel) -> float:
    """Nondimensional gap between exit energy and the energy of an orbit with
    apoapsis ``r_a_target`` and the same angular momentum.

    Positions scale by Re and speeds by sqrt(Re g0), g0 = mu/Re^2, so mu = 1.
    Positive means too little energy (apoapsis short of target).
    """
    V, gamma, _ = inertial_velocity(exit.V, exit.gamma, exit.psi, exit.r, exit.phi, planet)
    return _energy_error_nd(exit.r, V, gamma, r_a_target, planet)


def _energy_error_nd(r, V, gamma, r_a_target, planet):
    rf = r / planet.Re
    vf = V / math.sqrt(planet.Re * planet.g0)
    rt = r_a_target / planet.Re
    return (1.0 / rf - 0.5 * vf * vf) - (1.0 / rt - (rf * vf * math.cos(gamma)) ** 2 / (2.0 * rt * rt))


@dataclass(frozen=True)
class Prediction:
    state: SimState
    status: int  # _kernels.EXITED / TIMEOUT / IMPACT
    rows: np.ndarray | None = None

    @property
    def impacted(self) -> bool:
        return self.status == K.IMPACT


def predict_to_exit(current: SimState, profile, models: OnboardModels, filters: FadingFilter | None,
                    config: FnpagConfig, record: bool = False) -> Prediction:
    """Propagate the onboard model from ``current`` under a bank profile.

    ``profile`` is either a constant bank (float) or (sigma_a, sigma_b, t_switch).
    Stops at atmospheric exit (altitude >= h_exit while climbing), surface
    impact or ``config.t_f``. With ``record`` the run continues to ``t_f``
    regardless of exit and returns every step.
    """
    if isinstance(profile, tuple):
        sa, sb, ts = profile
    else:
        sa = sb = float(profile)
        ts = -math.inf
    kL = filters.rho_L if filters is not None else 1.0
    kD = filters.rho_D if filters is not None else 1.0
    pl, kind, coef, ap, grid, vals, va = models.kernel_args()
    max_rows = int(math.ceil((config.t_f - current.t) / config.pred_dt)) + 3 if record else 0
    y, t, status, rows = K.predict(
        current.as_array(), current.t, config.t_f, config.pred_dt, sa, sb, ts,
        config.h_exit, not record, pl, kind, coef, ap, grid, vals, va, kL, kD, max_rows,
    )
    return Prediction(SimState.from_array(t, y), int(status), rows if record else None)


def _prediction_error(current, profile, models, filters, config) -> float:
    pred = predict_to_exit(current, profile, models, filters, config)
    s = pred.state
    if not (s.V > 0 and math.isfinite(s.V)):
        # collapsed in the lower atmosphere: energy is gone, treat as large deficit
        return _energy_error_nd(max(s.r, models.planet.Re), 0.0, 0.0, config.r_a_target, models.planet)
    return energy_error(s, config.r_a_target, models.planet)


def _bracketed_solve(f, lo, hi, xtol, config):
    f_lo, f_hi = f(lo), f(hi)
    try:
        res = brent(f, lo, hi, tol=xtol, max_iter=config.max_iter, ftol=config.brent_tol, fa=f_lo, fb=f_hi)
    except NoBracketError as exc:
        return exc.best, exc.f_best
    return res.root, res.f_root


def solve_phase1(current: SimState, config: FnpagConfig, models: OnboardModels,
                 filters: FadingFilter | None, bank_sign: int = 1) -> tuple[float, float]:
    """Switch time on [t_now, t_f]; the endpoint with smaller |err| if unbracketed."""
    s0, sf = bank_sign * config.sigma_0, bank_sign * config.sigma_f

    def f(ts):
        return _prediction_error(current, (s0, sf, ts), models, filters, config)

    return _bracketed_solve(f, current.t, config.t_f, config.t_switch_tol, config)


def solve_phase2(current: SimState, config: FnpagConfig, models: OnboardModels,
                 filters: FadingFilter | None, bank_sign: int = 1) -> tuple[float, float]:
    """Constant bank magnitude on [0, pi]; saturates when unbracketed."""

    def f(sig):
        return _prediction_error(current, bank_sign * sig, models, filters, config)

    return _bracketed_solve(f, 0.0, math.pi, config.sigma_tol, config)


def inclination(state: SimState, planet: PlanetModel) -> float:
    _, _, psi_i = inertial_velocity(state.V, state.gamma, state.psi, state.r, state.phi, planet)
    return math.acos(max(-1.0, min(1.0, math.cos(state.phi) * math.cos(psi_i))))


def lateral_logic(current: SimState, target_inclination: float, deadband: float, bank_sign: int,
                  planet: PlanetModel | None = None) -> int:
    """Bank sign after the inclination deadband test.

    A positive bank turns the heading north (psi grows); with psi measured
    from east the inclination then grows when sin(psi) > 0.
    """
    planet = planet or PlanetModel()
    di = inclination(current, planet) - target_inclination
    if abs(di) <= deadband:
        return bank_sign
    _, _, psi_i = inertial_velocity(current.V, current.gamma, current.psi, current.r, current.phi, planet)
    effect = bank_sign * (1 if math.sin(psi_i) >= 0 else -1)
    if di * effect > 0:
        return -bank_sign
    return bank_sign


class Fnpag:
    """Guidance controller; call with (t, y, drag, lift) once per truth step."""

    def __init__(self, config: FnpagConfig, models: OnboardModels):
        self.config = config
        self.models = models
        self.state = FnpagState(t_switch=config.t_switch_init, sigma_star=config.sigma_f)
        self.filters = FadingFilter(chi=config.chi)
        self.log: list[dict] = []

    @property
    def active_filters(self) -> FadingFilter | None:
        return self.filters if self.config.use_filter else None

    def _modeled_accels(self, s: SimState) -> tuple[float, float]:
        m = self.models
        rho = m.atm.density(s.r - m.planet.Re)
        q = rho * s.V * s.V / (2.0 * m.vehicle.beta)
        return q * m.vehicle.LD, q

    def __call__(self, t: float, y: np.ndarray, drag: float, lift: float) -> float:
        s = SimState.from_array(t, y)
        cmd = self.guidance_step(s, drag, lift)
        return cmd

    def guidance_step(self, s: SimState, drag: float, lift: float) -> float:
        cfg, st = self.config, self.state
        if st.i_target is None:
            st.i_target = cfg.target_inclination if cfg.target_inclination is not None \
                else inclination(s, self.models.planet)
        if st.phase == 1 and s.t > st.t_switch:
            st.phase = 2

        st.guid_enabled = math.hypot(drag, lift) >= cfg.g_limit * G0_EARTH
        if st.guid_enabled and st.t_enable is None:
            st.t_enable = s.t
        if st.guid_enabled and cfg.use_filter:
            L_m, D_m = self._modeled_accels(s)
            self.filters = fading_filter_update(self.filters, lift, drag, L_m, D_m)

        magnitude = None
        extra = {}
        if st.guid_enabled:
            try:
                magnitude, extra = self._solve(s)
            except (ValueError, ArithmeticError):
                magnitude = None
            if st.i_target is not None:
                new_sign = lateral_logic(s, st.i_target, cfg.lateral_deadband, st.bank_sign, self.models.planet)
                if new_sign != st.bank_sign and st.reversals < cfg.max_reversals:
                    st.bank_sign = new_sign
                    st.reversals += 1
        if magnitude is None:
            if st.guid_enabled and st.last_command is not None:
                magnitude = abs(st.last_command)
            else:
                magnitude = cfg.sigma_0 if (st.phase == 1 and s.t < st.t_switch) else st.sigma_star
        cmd = st.bank_sign * min(max(magnitude, 0.0), math.pi)
        st.last_command = cmd
        row = {
            "t": s.t, "phase": st.phase, "sigma_command": cmd, "t_switch": st.t_switch,
            "err": st.err, "rho_L_tilde": self.filters.rho_L, "rho_D_tilde": self.filters.rho_D,
            "guid_enabled": int(st.guid_enabled),
        }
        row.update(extra)
        self.log.append(row)
        return cmd

    def _solve(self, s: SimState):
        """Run the phase solve; returns (bank magnitude, extra telemetry)."""
        cfg, st = self.config, self.state
        if st.phase == 1:
            st.t_switch, st.err = solve_phase1(s, cfg, self.models, self.active_filters, st.bank_sign)
            profile = (cfg.sigma_0, cfg.sigma_f, st.t_switch)
        else:
            st.sigma_star, st.err = solve_phase2(s, cfg, self.models, self.active_filters, st.bank_sign)
            profile = st.sigma_star
        magnitude, extra = self.post_solve(s, profile)
        return magnitude, extra

    def post_solve(self, s: SimState, profile):
        """Hook after each solve; FNPAG passes the phase command through."""
        st = self.state
        if st.phase == 1 and s.t < st.t_switch:
            return self.config.sigma_0, {}
        return st.sigma_star, {}

    def telemetry_csv(self, path, header: str | None = None) -> None:
        write_rows(path, self.log, header)


def write_rows(path, rows: list[dict], header: str | None = None, columns=None) -> None:
    keys = list(columns) if columns is not None else (list(rows[0].keys()) if rows else [])
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r.get(k)) for k in keys) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)

