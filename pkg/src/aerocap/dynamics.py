"""3-DOF point-mass flight over a rotating oblate planet.

Heading convention: psi is measured from local east, positive toward north,
so d(theta)/dt is proportional to cos(psi) and d(phi)/dt to sin(psi).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import _kernels as K
from .environment import PlanetModel

IMPACT_PERIAPSIS_ALT = 100.0e3
EXIT_INTERFACE_ALT = 1000.0e3
# Below this speed the vehicle is treated as having impacted; deep-atmosphere
# deceleration otherwise outruns a 1 s RK4 step.
V_FLOOR = 200.0


class SingularityError(ValueError):
    """cos(gamma) or cos(phi) vanished in the equations of motion."""


class TrajectoryMode(str, enum.Enum):
    CAPTURE = "capture"
    ESCAPE = "escape"
    IMPACT = "impact"


@dataclass(frozen=True)
class SimState:
    t: float
    r: float
    theta: float
    phi: float
    V: float
    gamma: float
    psi: float
    sigma: float = 0.0

    def as_array(self) -> np.ndarray:
        """State vector without time."""
        return np.array([self.r, self.theta, self.phi, self.V, self.gamma, self.psi, self.sigma])

    @classmethod
    def from_array(cls, t: float, y) -> SimState:
        return cls(float(t), *(float(v) for v in y[:7]))

    def altitude(self, planet: PlanetModel) -> float:
        return self.r - planet.Re


@dataclass(frozen=True)
class VehicleParams:
    beta: float = 145.0
    LD: float = 0.25
    m: float = 2847.068
    zeta: float = 1.0
    sigma_rate_max: float = math.radians(20.0)

    def __post_init__(self):
        if not self.beta > 0 or not self.zeta > 0 or not self.sigma_rate_max > 0:
            raise ValueError("beta, zeta and sigma_rate_max must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.beta, self.LD, self.zeta, self.sigma_rate_max])


@dataclass(frozen=True)
class EntryInterface:
    """Entry state with inertial speed / flight-path angle and relative heading."""

    h0: float
    theta0: float
    phi0: float
    V0_inertial: float
    gamma0_inertial: float
    psi0: float

    def __post_init__(self):
        if not self.h0 > 0:
            raise ValueError("entry altitude must be positive")


def aero_accels(rho: float, V: float, veh: VehicleParams) -> tuple[float, float]:
    """Tangential (drag, non-positive) and normal (lift) accelerations."""
    q = rho * V * V / (2.0 * veh.beta)
    return -q, q * veh.LD


def specific_energy(V, r, mu):
    return 0.5 * np.asarray(V) ** 2 - mu / np.asarray(r)


def inertial_energy(r, phi, V, gamma, psi, planet: PlanetModel):
    """Specific orbital energy from planet-relative states (vectorized).

    The planet rotation adds Omega r cos(phi) to the east velocity, so
    hyperbolic exits are exactly the ones with positive energy.
    """
    r, phi, V = np.asarray(r), np.asarray(phi), np.asarray(V)
    w = planet.Omega * r * np.cos(phi)
    v2 = V * V + 2.0 * V * np.cos(gamma) * np.cos(psi) * w + w * w
    return 0.5 * v2 - planet.mu / r


def energy_series(rows: np.ndarray, planet: PlanetModel) -> np.ndarray:
    """Inertial energy along [t, r, theta, phi, V, gamma, psi, ...] rows.

    A terminal row whose speed fell through the floor (the integrator step
    that ended the run is not resolved physically) repeats the previous
    energy instead of its own.
    """
    rows = np.asarray(rows, dtype=np.float64)
    eps = inertial_energy(rows[:, 1], rows[:, 3], rows[:, 4], rows[:, 5], rows[:, 6], planet)
    V = rows[-1, 4] if len(rows) else math.nan
    if len(rows) > 1 and not (math.isfinite(V) and V > V_FLOOR and math.isfinite(eps[-1])):
        eps[-1] = eps[-2]
    return eps


def eom(state: SimState, sigma_cmd: float, planet: PlanetModel, atm, veh: VehicleParams,
        truth: bool = True, lift_scale: float = 1.0, drag_scale: float = 1.0) -> np.ndarray:
    """Derivatives of [r, theta, phi, V, gamma, psi, sigma].

    ``truth=True`` applies the bank lag with rate clip; otherwise the bank is
    held at ``sigma_cmd`` with zero rate, as in guidance predictions.
    """
    out = np.empty(7)
    kind, coef, ap, grid, vals = atm.kernel_args()
    try:
        K.derivs(state.as_array(), float(sigma_cmd), planet.as_array(), kind, coef, ap, grid, vals,
                 veh.as_array(), lift_scale, drag_scale, bool(truth), out)
    except ValueError as exc:
        raise SingularityError(str(exc)) from None
    return out


def _enu_velocity(V, gamma, psi):
    cg = math.cos(gamma)
    return np.array([V * cg * math.cos(psi), V * cg * math.sin(psi), V * math.sin(gamma)])


def _speed_fpa_heading(v):
    speed = float(np.linalg.norm(v))
    if speed <= 0:
        raise ValueError("zero velocity has no flight-path angle")
    return speed, math.asin(max(-1.0, min(1.0, v[2] / speed))), math.atan2(v[1], v[0])


def inertial_velocity(V: float, gamma: float, psi: float, r: float, phi: float,
                      planet: PlanetModel) -> tuple[float, float, float]:
    """Inertial speed, flight-path angle and heading from relative ones."""
    v = _enu_velocity(V, gamma, psi)
    v[0] += planet.Omega * r * math.cos(phi)
    return _speed_fpa_heading(v)


def inertial_to_relative(entry: EntryInterface, planet: PlanetModel, sigma: float = 0.0) -> SimState:
    """Planet-relative state at t = 0.

    The inertial speed and flight-path angle are converted; the heading is
    taken as already planet-relative. The relative horizontal speed ``a``
    solves |a (cos psi, sin psi) + (w, 0)| = V_I cos gamma_I with w = Omega r cos phi.
    """
    r = planet.Re + entry.h0
    w = planet.Omega * r * math.cos(entry.phi0)
    H = entry.V0_inertial * math.cos(entry.gamma0_inertial)
    U = entry.V0_inertial * math.sin(entry.gamma0_inertial)
    cpsi = math.cos(entry.psi0)
    disc = w * w * cpsi * cpsi - w * w + H * H
    if disc < 0:
        raise ValueError("inertial horizontal speed too small for this heading")
    a = -w * cpsi + math.sqrt(disc)
    V = math.hypot(a, U)
    if V <= 0:
        raise ValueError("degenerate zero relative velocity")
    gamma = math.atan2(U, a)
    return SimState(0.0, r, entry.theta0, entry.phi0, V, gamma, entry.psi0, sigma)


def relative_to_inertial(state: SimState, planet: PlanetModel) -> EntryInterface:
    V_I, gamma_I, _ = inertial_velocity(state.V, state.gamma, state.psi, state.r, state.phi, planet)
    return EntryInterface(state.r - planet.Re, state.theta, state.phi, V_I, gamma_I, state.psi)


def orbital_quantities(exit: SimState, planet: PlanetModel) -> tuple[float, float, float, float]:
    """Semimajor axis, apoapsis, periapsis and specific energy of the exit state.

    Uses the inertial velocity. Hyperbolic exits give a < 0 and r_a < 0; the
    parabolic limit returns a = inf and r_a = -inf.
    """
    if not exit.V > 0:
        raise ValueError("exit velocity must be positive")
    mu = planet.mu
    V, gamma, _ = inertial_velocity(exit.V, exit.gamma, exit.psi, exit.r, exit.phi, planet)
    r = exit.r
    eps = 0.5 * V * V - mu / r
    h2 = (V * r * math.cos(gamma)) ** 2
    denom = 2.0 * mu / r - V * V
    if denom == 0.0:
        return math.inf, -math.inf, h2 / (2.0 * mu), eps
    a = mu / denom
    rad = 1.0 - h2 / (mu * a)
    if rad < 0:
        rad = 0.0
    root = math.sqrt(rad)
    return a, a * (1.0 + root), a * (1.0 - root), eps


@dataclass(frozen=True)
class Trajectory:
    """Time history; ``states`` rows are [t, r, theta, phi, V, gamma, psi, sigma]."""

    states: np.ndarray
    mode: TrajectoryMode
    r_a: float
    r_p: float
    energy_series: np.ndarray
    rho: np.ndarray = field(default=None, repr=False)
    sigma_cmd: np.ndarray = field(default=None, repr=False)

    @property
    def t(self) -> np.ndarray:
        return self.states[:, 0]

    @property
    def final(self) -> SimState:
        return SimState.from_array(self.states[-1, 0], self.states[-1, 1:])

    def state_at(self, i: int) -> SimState:
        return SimState.from_array(self.states[i, 0], self.states[i, 1:])

    def to_csv(self, path, planet: PlanetModel, header: str | None = None) -> None:
        cols = "t,h,theta,phi,V,gamma,psi,sigma,rho,eps"
        s = self.states
        rho = self.rho if self.rho is not None else np.full(len(s), np.nan)
        with Path(path).open("w") as fh:
            if header:
                fh.write(f"# {header}\n")
            fh.write(cols + "\n")
            for i in range(len(s)):
                vals = (s[i, 0], s[i, 1] - planet.Re, *s[i, 2:8], rho[i], self.energy_series[i])
                fh.write(",".join(f"{v:.10g}" for v in vals) + "\n")

    def summary(self, planet: PlanetModel) -> dict:
        f = self.final
        return {
            "mode": self.mode.value,
            "r_a": _finite_or_none(self.r_a),
            "r_p": _finite_or_none(self.r_p),
            "terminal": {
                "t": f.t, "h": f.r - planet.Re, "theta": f.theta, "phi": f.phi,
                "V": f.V, "gamma": f.gamma, "psi": f.psi, "sigma": f.sigma,
            },
        }

    def write_summary(self, path, planet: PlanetModel, extra: dict | None = None) -> None:
        d = self.summary(planet)
        if extra:
            d.update(extra)
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def _collapsed(s: SimState, planet: PlanetModel) -> bool:
    return not (math.isfinite(s.r) and math.isfinite(s.V)) or s.r <= planet.Re or not s.V > V_FLOOR


def _finite_or_none(x):
    return float(x) if math.isfinite(x) else None


def exit_index(states: np.ndarray, planet: PlanetModel, h_exit: float = EXIT_INTERFACE_ALT) -> int:
    """Row of the first climbing sample at or above ``h_exit`` after the
    vehicle has been below it; the last row if it never leaves."""
    h = states[:, 1] - planet.Re
    below = np.flatnonzero(h < h_exit)
    if below.size == 0:
        return len(states) - 1
    after = np.flatnonzero((h[below[0]:] >= h_exit) & (states[below[0]:, 5] > 0.0))
    if after.size == 0:
        return len(states) - 1
    return int(below[0] + after[0])


def classify_mode(traj_or_states, planet: PlanetModel, dt: float = 1.0,
                  h_exit: float = EXIT_INTERFACE_ALT) -> TrajectoryMode:
    """Escape if hyperbolic at atmospheric exit; impact if the exit periapsis
    altitude is below 100 km or altitude decreased over the last ``dt``
    seconds; otherwise capture.

    Orbital elements are taken at the exit interface rather than at the final
    time: with a large J2 the osculating energy keeps drifting on the coast.
    """
    states = traj_or_states.states if isinstance(traj_or_states, Trajectory) else np.asarray(traj_or_states)
    if len(states) == 0:
        raise ValueError("empty trajectory")
    last = SimState.from_array(states[-1, 0], states[-1, 1:])
    if _collapsed(last, planet):
        return TrajectoryMode.IMPACT
    i = exit_index(states, planet, h_exit)
    a, r_a, r_p, eps = orbital_quantities(SimState.from_array(states[i, 0], states[i, 1:]), planet)
    if a < 0 or eps >= 0 or r_a < 0:
        return TrajectoryMode.ESCAPE
    if r_p - planet.Re < IMPACT_PERIAPSIS_ALT:
        return TrajectoryMode.IMPACT
    if len(states) > 1:
        t_prev = states[-1, 0] - dt
        h_prev = np.interp(t_prev, states[:, 0], states[:, 1])
        if states[-1, 1] < h_prev:
            return TrajectoryMode.IMPACT
    return TrajectoryMode.CAPTURE


# Controller signature: (t, y, drag_accel, lift_accel) -> bank command [rad].
Controller = Callable[[float, np.ndarray, float, float], float]


def constant_controller(sigma: float) -> Controller:
    return lambda t, y, D, L: sigma


def propagate(initial: SimState, controller: Controller, planet: PlanetModel, atm,
              veh: VehicleParams, t_f: float, dt: float = 1.0) -> Trajectory:
    """Fixed-step RK4 truth propagation with bank lag and rate limit.

    The controller is sampled once per step with the sensed (truth) drag and
    lift accelerations. Integration stops early once altitude reaches zero.
    """
    if not dt > 0 or not t_f > initial.t:
        raise ValueError("need dt > 0 and t_f > initial time")
    n = int(math.ceil((t_f - initial.t) / dt - 1e-9))
    pl = planet.as_array()
    va = veh.as_array()
    kind, coef, ap, grid, vals = atm.kernel_args()
    Re = planet.Re
    rows = np.empty((n + 1, 8))
    rho = np.empty(n + 1)
    cmds = np.empty(n + 1)
    y = initial.as_array()
    t = initial.t
    rows[0, 0] = t
    rows[0, 1:] = y
    k = 0
    try:
        while k < n:
            rho_k = K.density(kind, coef, ap, grid, vals, y[0] - Re)
            rho[k] = rho_k
            q = rho_k * y[3] * y[3] / (2.0 * veh.beta)
            cmd = float(controller(t, y, q, q * veh.LD))
            cmds[k] = cmd
            h_step = min(dt, t_f - t)
            y = K.rk4_step(y, h_step, cmd, pl, kind, coef, ap, grid, vals, va, 1.0, 1.0, True)
            t = initial.t + (k + 1) * dt if h_step == dt else t_f
            k += 1
            rows[k, 0] = t
            rows[k, 1:] = y
            if y[0] - Re <= 0.0 or not y[3] > V_FLOOR:
                break
    except ValueError as exc:
        raise SingularityError(str(exc)) from None
    rows = rows[: k + 1]
    rho[k] = K.density(kind, coef, ap, grid, vals, y[0] - Re)
    cmds[k] = cmds[k - 1] if k > 0 else initial.sigma
    return make_trajectory(rows, planet, dt, rho[: k + 1], cmds[: k + 1])


def make_trajectory(rows: np.ndarray, planet: PlanetModel, dt: float = 1.0, rho=None, cmds=None,
                    h_exit: float = EXIT_INTERFACE_ALT) -> Trajectory:
    rows = np.asarray(rows, dtype=np.float64)
    mode = classify_mode(rows, planet, dt, h_exit)
    last = SimState.from_array(rows[-1, 0], rows[-1, 1:])
    if _collapsed(last, planet):
        r_a = r_p = math.nan
    else:
        i = exit_index(rows, planet, h_exit)
        _, r_a, r_p, _ = orbital_quantities(SimState.from_array(rows[i, 0], rows[i, 1:]), planet)
    eps = energy_series(rows, planet)
    return Trajectory(rows, mode, r_a, r_p, eps, rho, cmds)
