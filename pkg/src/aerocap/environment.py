"""Planet constants, gravity field and atmosphere models.

Three density models share one interface (``density(h)``):

* :class:`PolyAtmosphere` - onboard rational-polynomial fit of ln(rho).
* :class:`TabulatedAtmosphere` - density samples on an altitude grid,
  linearly interpolated.
* :func:`generate_truth_atmosphere` - builds a perturbed tabulated profile
  around a mean model (stand-in for a GRAM draw).

Altitudes are in meters everywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

# Uranus (Jacobson 2014 gravity solution, 17.24 h rotation period).
URANUS_MU = 5.793939e15
URANUS_RE = 25_559.0e3
URANUS_J2 = 3.51068e-3
URANUS_OMEGA = 2.0 * math.pi / (17.24 * 3600.0)

G0_EARTH = 9.80665

# Table of c1..c9 for the ln(rho) rational fit (altitude in meters).
URANUS_POLY_COEFFS = (
    -1.01e00,
    1.18e07,
    -8.47e07,
    -3.61e01,
    1.81e02,
    4.10e-05,
    -4.78e-05,
    1.86e-11,
    -7.03e-10,
)

KIND_POLY = 0
KIND_TABLE = 1


class AtmosphereError(ValueError):
    """Invalid atmosphere configuration or evaluation."""


@dataclass(frozen=True)
class PlanetModel:
    mu: float = URANUS_MU
    Re: float = URANUS_RE
    J2: float = URANUS_J2
    Omega: float = URANUS_OMEGA

    def __post_init__(self):
        if not self.mu > 0 or not self.Re > 0:
            raise ValueError("mu and Re must be positive")
        if self.Omega < 0 or self.J2 < 0:
            raise ValueError("Omega and J2 must be non-negative")

    @property
    def g0(self) -> float:
        """Surface gravity mu/Re^2, used for nondimensional velocity."""
        return self.mu / self.Re**2

    def as_array(self) -> np.ndarray:
        return np.array([self.mu, self.Re, self.J2, self.Omega], dtype=np.float64)


def gravity(planet: PlanetModel, r: float, phi: float) -> tuple[float, float]:
    """Radial (positive toward the center) and latitudinal gravity with J2."""
    if not r > 0:
        raise ValueError(f"radius must be positive, got {r}")
    base = planet.mu / r**2
    k = planet.J2 * (planet.Re / r) ** 2
    s = math.sin(phi)
    g_r = base * (1.0 + k * (1.5 - 4.5 * s * s))
    g_phi = 3.0 * base * k * s * math.cos(phi)
    return g_r, g_phi


@dataclass(frozen=True)
class PolyAtmosphere:
    """ln(rho) as a quartic-over-quartic rational function of altitude.

    ``form="odd_even"`` uses odd coefficients in the numerator and even ones
    in the denominator; ``form="printed"`` reproduces the literal published
    expression (c2 in both, c5 unused) for comparison only.
    """

    c: tuple[float, ...] = URANUS_POLY_COEFFS
    h_min: float = 200.0e3
    h_max: float = 2000.0e3
    form: str = "odd_even"
    h_unit: float = 1.0  # meters per coefficient altitude unit

    def __post_init__(self):
        if len(self.c) != 9:
            raise AtmosphereError("need exactly nine coefficients")
        if self.form not in ("odd_even", "printed"):
            raise AtmosphereError(f"unknown polynomial form {self.form!r}")
        if not self.h_max > self.h_min:
            raise AtmosphereError("h_max must exceed h_min")

    def log_density(self, h: float) -> float:
        return _poly_log_density(self.c, self.form, self.h_unit, self.h_min, self.h_max, h)

    def density(self, h: float) -> float:
        return math.exp(self.log_density(h))

    def with_bounds(self, h_min: float, h_max: float) -> PolyAtmosphere:
        return PolyAtmosphere(self.c, h_min, h_max, self.form, self.h_unit)

    def kernel_args(self):
        empty = np.zeros(1)
        coef = np.array(self.c, dtype=np.float64)
        lit = 1.0 if self.form == "printed" else 0.0
        params = np.array([self.h_min, self.h_max, lit, self.h_unit])
        return KIND_POLY, coef, params, empty, empty


def _poly_log_density(c, form, h_unit, h_min, h_max, h):
    h = min(max(h, h_min), h_max) / h_unit
    c1, c2, c3, c4, c5, c6, c7, c8, c9 = c
    if form == "printed":
        num = c1 + c3 * h + c2 * h**2 + c7 * h**3 + c9 * h**4
    else:
        num = c1 + c3 * h + c5 * h**2 + c7 * h**3 + c9 * h**4
    den = 1.0 + c2 * h + c4 * h**2 + c6 * h**3 + c8 * h**4
    if abs(den) < 1e-12:
        raise AtmosphereError(f"rational fit denominator vanishes at h={h}")
    return num / den


def poly_density(atm: PolyAtmosphere, h: float) -> float:
    """Density from the rational fit; altitudes outside the fit range clamp."""
    return atm.density(h)


def poly_out_of_range(atm: PolyAtmosphere, h: float) -> bool:
    return h < atm.h_min or h > atm.h_max


def check_poly_monotone(atm: PolyAtmosphere, step: float = 1.0) -> bool:
    """Dense sweep: density positive, finite and strictly decreasing over the fit range."""
    h = np.arange(atm.h_min, atm.h_max + 0.5 * step, step) / atm.h_unit
    c1, c2, c3, c4, c5, c6, c7, c8, c9 = atm.c
    if atm.form == "printed":
        num = c1 + h * (c3 + h * (c2 + h * (c7 + h * c9)))
    else:
        num = c1 + h * (c3 + h * (c5 + h * (c7 + h * c9)))
    den = 1.0 + h * (c2 + h * (c4 + h * (c6 + h * c8)))
    if np.any(np.abs(den) < 1e-12):
        return False
    logr = num / den
    if not np.all(np.isfinite(logr)) or np.any(logr > 700):
        return False
    return bool(np.all(np.diff(logr) < 0))


def select_poly_units(c=URANUS_POLY_COEFFS, h_min=200.0e3, h_max=2000.0e3, step=1.0):
    """Pick the altitude unit (m, else km) under which the odd/even fit is monotone."""
    for unit in (1.0, 1000.0):
        atm = PolyAtmosphere(tuple(c), h_min, h_max, "odd_even", unit)
        if check_poly_monotone(atm, step):
            return atm
    raise AtmosphereError("rational fit is not monotone under either altitude unit")


@dataclass(frozen=True)
class TabulatedAtmosphere:
    altitude_grid: np.ndarray
    density_values: np.ndarray
    seed: int = -1
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        grid = np.array(self.altitude_grid, dtype=np.float64)
        dens = np.array(self.density_values, dtype=np.float64)
        if grid.size == 0 or dens.size == 0:
            raise AtmosphereError("empty density table")
        if grid.shape != dens.shape or grid.ndim != 1:
            raise AtmosphereError("grid and density must be 1-D of equal length")
        if grid.size > 1 and not np.all(np.diff(grid) > 0):
            raise AtmosphereError("altitude grid must be strictly increasing")
        if not np.all(dens > 0):
            raise AtmosphereError("densities must be positive")
        grid.setflags(write=False)
        dens.setflags(write=False)
        object.__setattr__(self, "altitude_grid", grid)
        object.__setattr__(self, "density_values", dens)

    def density(self, h: float) -> float:
        return tabulated_density(self, h)

    def kernel_args(self):
        return KIND_TABLE, np.zeros(9), np.zeros(4), self.altitude_grid, self.density_values

    def to_csv(self, path, header: str | None = None) -> None:
        path = Path(path)
        with path.open("w") as fh:
            if header:
                fh.write(f"# {header}\n")
            fh.write("altitude_m,density_kg_m3\n")
            for h, r in zip(self.altitude_grid, self.density_values):
                fh.write(f"{h:.6f},{r:.17e}\n")
        sidecar = {"seed": int(self.seed), **self.meta}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_csv(cls, path) -> TabulatedAtmosphere:
        path = Path(path)
        lines = [ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#")]
        data = np.loadtxt(lines[1:], delimiter=",", ndmin=2)
        side = path.with_suffix(".json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        seed = int(meta.pop("seed", -1))
        return cls(data[:, 0], data[:, 1], seed, meta)


def tabulated_density(atm: TabulatedAtmosphere, h: float) -> float:
    """Linear interpolation on the grid; clamps to the end samples outside it."""
    grid, dens = atm.altitude_grid, atm.density_values
    if h <= grid[0]:
        return float(dens[0])
    if h >= grid[-1]:
        return float(dens[-1])
    i = int(np.searchsorted(grid, h, side="right")) - 1
    w = (h - grid[i]) / (grid[i + 1] - grid[i])
    return float(dens[i] + w * (dens[i + 1] - dens[i]))


@dataclass(frozen=True)
class PerturbationSpec:
    delta_p: float = 2.0
    correlation_length: float = 60.0e3
    sigma_base: float = 0.15
    altitude_range: tuple[float, float] = (0.0, 5000.0e3)
    grid_step: float = 1.0e3
    density_scale: float = 1.0  # multiplicative bias on the mean profile

    def __post_init__(self):
        if self.delta_p < 0:
            raise ValueError("delta_p must be non-negative")
        if not self.correlation_length > 0 or not self.grid_step > 0:
            raise ValueError("correlation_length and grid_step must be positive")
        if not self.altitude_range[1] > self.altitude_range[0]:
            raise ValueError("altitude_range must be increasing")
        if not self.density_scale > 0:
            raise ValueError("density_scale must be positive")

    def grid(self) -> np.ndarray:
        lo, hi = self.altitude_range
        n = int(round((hi - lo) / self.grid_step)) + 1
        return lo + self.grid_step * np.arange(n)


def correlated_noise(n: int, step: float, spec: PerturbationSpec, rng: np.random.Generator) -> np.ndarray:
    """Stationary AR(1) sequence with unit-free std ``sigma_base``."""
    a = math.exp(-step / spec.correlation_length)
    e = rng.standard_normal(n)
    e[1:] *= math.sqrt(1.0 - a * a)
    return spec.sigma_base * lfilter([1.0], [1.0, -a], e)


def generate_truth_atmosphere(mean, spec: PerturbationSpec, seed: int) -> TabulatedAtmosphere:
    """Perturbed density table around ``mean``; a pure function of its inputs.

    ln rho(h) = ln rho_mean(h) + ln(density_scale) + delta_p * x(h) where x is
    an exponentially correlated Gaussian sequence along altitude.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    grid = spec.grid()
    log_mean = np.array([math.log(mean.density(float(h))) for h in grid])
    log_rho = log_mean + math.log(spec.density_scale)
    if spec.delta_p > 0:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x61746D]))
        log_rho = log_rho + spec.delta_p * correlated_noise(grid.size, spec.grid_step, spec, rng)
    meta = {"spec": _spec_dict(spec)}
    return TabulatedAtmosphere(grid, np.exp(log_rho), int(seed), meta)


def _spec_dict(spec: PerturbationSpec) -> dict:
    d = asdict(spec)
    d["altitude_range"] = list(spec.altitude_range)
    return d
