"""Dispersed campaigns: sampling, guided trials, recoverability replays,
parameter sweeps and GMVAE training-set generation.

Every trial owns a seed derived from (master seed, trial id); dispersion
and atmosphere draws use separate named sub-streams of it, so campaigns are
reproducible, paired across guidance variants and independent of the worker
count.
"""

from __future__ import annotations

import csv
import functools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dynamics import (
    EntryInterface, Trajectory, TrajectoryMode, VehicleParams, inertial_to_relative, propagate,
)
from .environment import PerturbationSpec, PlanetModel, PolyAtmosphere, generate_truth_atmosphere
from .fnpag import Fnpag, FnpagConfig, OnboardModels
from .gmvae import EnergyDataset, GmvaeModel, default_time_grid
from .pipag import NEAR_ESCAPE_PARAMS, NEAR_IMPACT_PARAMS, Pipag, PipagParams

STREAM_DISPERSION = 0x6469
STREAM_ATMOSPHERE = 0x6174
NOMINAL_MASS = 2847.068
NOMINAL_BETA = 145.0
NOMINAL_LD = 0.25
T_FINAL = 1500.0
DT = 1.0

VARIANTS = ("fnpag", "fnpag-nofilter", "pipag", "pipag-nofilter")


@dataclass(frozen=True)
class DispersionSpec:
    """Three-sigma values: LD [-], m [kg], h0 [m], theta0/phi0 [rad],
    V0 [m/s], gamma0 [rad]."""

    ld_3s: float = 0.075
    m_3s: float = 854.12
    h0_3s: float = 100.0e3
    theta0_3s: float = 0.227
    phi0_3s: float = 0.116
    V0_3s: float = 750.0
    gamma0_3s: float = math.radians(0.5)
    variance_scale: float = 1.0

    def __post_init__(self):
        if min(self.ld_3s, self.m_3s, self.h0_3s, self.theta0_3s, self.phi0_3s,
               self.V0_3s, self.gamma0_3s) < 0:
            raise ValueError("three-sigma values must be non-negative")
        if not self.variance_scale > 0:
            raise ValueError("variance_scale must be positive")

    def sigmas(self) -> dict[str, float]:
        k = math.sqrt(self.variance_scale) / 3.0
        return {
            "LD": self.ld_3s * k, "m": self.m_3s * k, "h0": self.h0_3s * k,
            "theta0": self.theta0_3s * k, "phi0": self.phi0_3s * k,
            "V0": self.V0_3s * k, "gamma0": self.gamma0_3s * k,
        }


ZERO_DISPERSION = DispersionSpec(0, 0, 0, 0, 0, 0, 0)


@dataclass(frozen=True)
class Scenario:
    name: str
    entry: EntryInterface
    r_a_target: float
    failure_mode: TrajectoryMode

    def __post_init__(self):
        if not self.r_a_target > PlanetModel().Re:
            raise ValueError("r_a_target must exceed the planet radius")


def _table_entry(gamma_deg: float) -> EntryInterface:
    return EntryInterface(1000.0e3, math.radians(190.045), math.radians(-9.764), 24936.0,
                          math.radians(gamma_deg), math.radians(45.0))


_RE = PlanetModel().Re
NEAR_ESCAPE = Scenario("near-escape", _table_entry(-10.572), _RE + 550_000.0e3, TrajectoryMode.ESCAPE)
NEAR_IMPACT = Scenario("near-impact", _table_entry(-11.277), _RE + 100_000.0e3, TrajectoryMode.IMPACT)
SCENARIOS = {s.name: s for s in (NEAR_ESCAPE, NEAR_IMPACT)}


def default_pipag_params(scenario: Scenario) -> PipagParams:
    return NEAR_IMPACT_PARAMS if scenario.failure_mode == TrajectoryMode.IMPACT else NEAR_ESCAPE_PARAMS


def trial_seed(master_seed: int, trial_id: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(trial_id)]).generate_state(1)[0])


def sample_trial(spec: DispersionSpec, scenario: Scenario, seed: int) -> tuple[EntryInterface, VehicleParams, int]:
    """Gaussian draw of entry state and vehicle, plus an atmosphere seed in [1, 29999].

    Mass dispersions carry through the ballistic coefficient (fixed drag
    area and C_D); L/D is perturbed directly.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), STREAM_DISPERSION]))
    z = rng.standard_normal(7)
    sd = spec.sigmas()
    e = scenario.entry
    entry = EntryInterface(
        e.h0 + sd["h0"] * z[2], e.theta0 + sd["theta0"] * z[3], e.phi0 + sd["phi0"] * z[4],
        e.V0_inertial + sd["V0"] * z[5], e.gamma0_inertial + sd["gamma0"] * z[6], e.psi0,
    )
    m = NOMINAL_MASS + sd["m"] * z[1]
    veh = VehicleParams(beta=NOMINAL_BETA * m / NOMINAL_MASS, LD=NOMINAL_LD + sd["LD"] * z[0], m=m)
    atm_rng = np.random.default_rng(np.random.SeedSequence([int(seed), STREAM_ATMOSPHERE]))
    return entry, veh, int(atm_rng.integers(1, 30000))


@dataclass(frozen=True)
class CampaignSetup:
    """Everything a worker needs to run a trial; picklable and immutable."""

    scenario: Scenario = NEAR_ESCAPE
    dispersion: DispersionSpec = DispersionSpec()
    perturbation: PerturbationSpec | None = PerturbationSpec()
    master_seed: int = 0
    planet: PlanetModel = PlanetModel()
    onboard_atm: PolyAtmosphere = PolyAtmosphere()
    truth_mean: PolyAtmosphere = PolyAtmosphere(h_min=0.0, h_max=5000.0e3)
    fnpag: dict = field(default_factory=dict)  # FnpagConfig overrides
    pipag: PipagParams | None = None
    t_f: float = T_FINAL
    dt: float = DT

    def fnpag_config(self, use_filter: bool) -> FnpagConfig:
        kw = {"t_f": self.t_f, **self.fnpag, "use_filter": use_filter}
        return FnpagConfig(r_a_target=self.scenario.r_a_target, **kw)


@dataclass(frozen=True)
class TrialResult:
    trial_id: int
    seed: int
    variant: str
    mode: TrajectoryMode | None
    r_a: float
    r_a_error: float  # [m], capture only
    corrected_cycles: int = 0
    t_enable: float = math.nan
    atm_seed: int = 0
    error: str = ""

    def row(self) -> dict:
        return {
            "trial_id": self.trial_id, "seed": self.seed, "variant": self.variant,
            "mode": self.mode.value if self.mode else "error",
            "r_a": _num(self.r_a), "r_a_error": _num(self.r_a_error),
            "corrected_cycles": self.corrected_cycles, "t_enable": _num(self.t_enable),
            "atm_seed": self.atm_seed, "error": self.error,
        }

    @classmethod
    def from_row(cls, r: dict) -> TrialResult:
        mode = None if r["mode"] == "error" else TrajectoryMode(r["mode"])
        return cls(int(r["trial_id"]), int(r["seed"]), r["variant"], mode, float(r["r_a"]),
                   float(r["r_a_error"]), int(r["corrected_cycles"]), float(r["t_enable"]),
                   int(r["atm_seed"]), r.get("error", ""))


def _num(x) -> str:
    return "nan" if x is None or not math.isfinite(x) else repr(float(x))


@functools.lru_cache(maxsize=64)
def _truth_atmosphere(mean: PolyAtmosphere, spec: PerturbationSpec | None, seed: int):
    if spec is None:
        return mean
    return generate_truth_atmosphere(mean, spec, seed)


def trial_environment(setup: CampaignSetup, trial_id: int):
    seed = trial_seed(setup.master_seed, trial_id)
    entry, veh, atm_seed = sample_trial(setup.dispersion, setup.scenario, seed)
    truth = _truth_atmosphere(setup.truth_mean, setup.perturbation, atm_seed)
    return seed, entry, veh, atm_seed, truth


def make_controller(setup: CampaignSetup, variant: str, model: GmvaeModel | None):
    if variant not in VARIANTS:
        raise ValueError(f"unknown guidance variant {variant!r}")
    use_filter = not variant.endswith("nofilter")
    cfg = setup.fnpag_config(use_filter)
    onboard = OnboardModels(setup.planet, setup.onboard_atm, VehicleParams())
    if variant.startswith("pipag"):
        if model is None:
            raise ValueError("pipag variants need a trained model")
        params = setup.pipag or default_pipag_params(setup.scenario)
        return Pipag(cfg, onboard, model, params, setup.scenario.failure_mode)
    return Fnpag(cfg, onboard)


def simulate_trial(setup: CampaignSetup, trial_id: int, variant: str = "fnpag",
                   model: GmvaeModel | None = None) -> tuple[Trajectory, Fnpag, TrialResult]:
    seed, entry, veh, atm_seed, truth = trial_environment(setup, trial_id)
    ctrl = make_controller(setup, variant, model)
    s0 = inertial_to_relative(entry, setup.planet, sigma=ctrl.config.sigma_0)
    traj = propagate(s0, ctrl, setup.planet, truth, veh, setup.t_f, setup.dt)
    err = traj.r_a - setup.scenario.r_a_target if traj.mode == TrajectoryMode.CAPTURE else math.nan
    t_en = ctrl.state.t_enable if ctrl.state.t_enable is not None else math.nan
    res = TrialResult(trial_id, seed, variant, traj.mode, traj.r_a, err,
                      getattr(ctrl, "corrected_cycles", 0), t_en, atm_seed)
    return traj, ctrl, res


def run_trial(setup: CampaignSetup, trial_id: int, variant: str = "fnpag",
              model: GmvaeModel | None = None, energy_grid=None):
    """One guided trial. Failures are captured in the result, never raised.

    With ``energy_grid`` the truth energy sampled on that grid is returned
    alongside the result (for dataset generation).
    """
    try:
        traj, _, res = simulate_trial(setup, trial_id, variant, model)
    except Exception as exc:  # a trial must never abort the campaign
        seed = trial_seed(setup.master_seed, trial_id)
        res = TrialResult(trial_id, seed, variant, None, math.nan, math.nan, error=f"{type(exc).__name__}: {exc}")
        return (res, None) if energy_grid is not None else res
    if energy_grid is not None:
        return res, np.interp(energy_grid, traj.t, traj.energy_series)
    return res


def _run_one(args):
    setup, trial_id, variant, model, grid = args
    return run_trial(setup, trial_id, variant, model, grid)


def _map(fn, jobs, threads: int):
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * threads))))


@dataclass(frozen=True)
class CampaignSummary:
    n_trials: int
    n_errors: int
    capture_pct: float
    escape_pct: float
    impact_pct: float
    mean_ra_err_km: float
    std_ra_err_km: float
    n_recoverable: int = 0
    n_saved: int = 0
    save_pct: float = math.nan

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                for k, v in asdict(self).items()}


def summarize(results: list[TrialResult], recoverable: dict[int, bool] | None = None) -> CampaignSummary:
    """Mode percentages over completed trials, captured r_a error statistics,
    and (with ``recoverable``) the share of recoverable trials that captured."""
    done = [r for r in results if r.mode is not None]
    n = len(done)

    def pct(mode):
        return 100.0 * sum(r.mode == mode for r in done) / n if n else 0.0

    errs = np.array([r.r_a_error for r in done if r.mode == TrajectoryMode.CAPTURE]) / 1e3
    mean = float(errs.mean()) if errs.size else math.nan
    std = float(errs.std()) if errs.size else math.nan
    n_rec = n_saved = 0
    save = math.nan
    if recoverable is not None:
        rec_ids = {i for i, ok in recoverable.items() if ok}
        n_rec = len(rec_ids)
        n_saved = sum(1 for r in done if r.trial_id in rec_ids and r.mode == TrajectoryMode.CAPTURE)
        save = 100.0 * n_saved / n_rec if n_rec else math.nan
    return CampaignSummary(len(results), len(results) - n, pct(TrajectoryMode.CAPTURE),
                           pct(TrajectoryMode.ESCAPE), pct(TrajectoryMode.IMPACT), mean, std,
                           n_rec, n_saved, save)


def run_campaign(setup: CampaignSetup, n_trials: int, variant: str = "fnpag",
                 model: GmvaeModel | None = None, threads: int = 1,
                 first_trial: int = 0) -> tuple[list[TrialResult], CampaignSummary]:
    jobs = [(setup, first_trial + i, variant, model, None) for i in range(n_trials)]
    results = sorted(_map(_run_one, jobs, threads), key=lambda r: r.trial_id)
    return results, summarize(results)


# ---------------------------------------------------------------- recoverability

def _replay(args) -> tuple[int, TrajectoryMode | None]:
    setup, res = args
    if not math.isfinite(res.t_enable):
        return res.trial_id, None
    _, entry, veh, _, truth = trial_environment(setup, res.trial_id)
    cfg = setup.fnpag_config(True)
    full = math.pi if res.mode == TrajectoryMode.ESCAPE else 0.0
    t_en = res.t_enable

    def ctrl(t, y, D, L):
        return cfg.sigma_0 if t < t_en else full

    s0 = inertial_to_relative(entry, setup.planet, sigma=cfg.sigma_0)
    try:
        traj = propagate(s0, ctrl, setup.planet, truth, veh, setup.t_f, setup.dt)
    except Exception:
        return res.trial_id, None
    return res.trial_id, traj.mode


def recoverability(setup: CampaignSetup, failed: list[TrialResult], threads: int = 1) -> dict[int, bool]:
    """Replay each escaped (impacted) trial in its own environment with full
    lift-down (lift-up) from its guidance enable time; recoverable iff the
    replayed mode differs from the original one."""
    todo = [r for r in failed if r.mode in (TrajectoryMode.ESCAPE, TrajectoryMode.IMPACT)]
    out = dict(_map(_replay, [(setup, r) for r in todo], threads))
    modes = {r.trial_id: r.mode for r in todo}
    return {i: (m is not None and m != modes[i]) for i, m in out.items()}


# ---------------------------------------------------------------- sweep

def sweep(setup: CampaignSetup, n_trials: int, model: GmvaeModel, sigma_primes, taus, eps_Cs,
          eps_F: float = 0.025, recoverable: dict[int, bool] | None = None,
          threads: int = 1, variant: str = "pipag") -> list[dict]:
    """Full-factorial πPAG campaigns over (sigma_prime, tau, eps_C) on shared seeds."""
    if not (len(sigma_primes) and len(taus) and len(eps_Cs)):
        raise ValueError("sweep grids must be non-empty")
    rows = []
    for sp in sigma_primes:
        for tau in taus:
            for ec in eps_Cs:
                s = replace(setup, pipag=PipagParams(ec, eps_F, sp, tau))
                res, _ = run_campaign(s, n_trials, variant, model, threads)
                summ = summarize(res, recoverable)
                rows.append({
                    "sigma_prime": math.degrees(sp), "tau": tau, "eps_C": ec,
                    "captures": sum(r.mode == TrajectoryMode.CAPTURE for r in res),
                    "capture_pct": summ.capture_pct, "save_pct": summ.save_pct,
                })
    return rows


# ---------------------------------------------------------------- datasets

def split_counts(n: int) -> tuple[int, int, int]:
    if n == 1280:
        return 1024, 128, 128
    n_val = n // 10
    return n - 2 * n_val, n_val, n_val


def build_dataset(setup: CampaignSetup, n_samples: int, variant: str = "fnpag", threads: int = 1,
                  time_grid=None, warn=None, max_trials: int | None = None
                  ) -> tuple[EnergyDataset, list[TrialResult]]:
    """Guided campaign turned into normalized 64-point energy rows with labels.

    Only capture and the scenario's failure mode are kept (each model is
    trained on two modes); further trials are run in id order until
    ``n_samples`` rows exist. The normalization constant is the population
    mean |energy| at the first grid time.
    """
    grid = default_time_grid(setup.t_f) if time_grid is None else np.asarray(time_grid)
    keep_modes = (TrajectoryMode.CAPTURE, setup.scenario.failure_mode)
    max_trials = max_trials or 2 * n_samples + 100
    results, rows = [], []
    next_id = 0
    while len(rows) < n_samples and next_id < max_trials:
        chunk = min(max_trials - next_id, max(n_samples - len(rows), 8))
        jobs = [(setup, next_id + i, variant, None, grid) for i in range(chunk)]
        next_id += chunk
        for res, e in sorted(_map(_run_one, jobs, threads), key=lambda p: p[0].trial_id):
            results.append(res)
            if res.mode in keep_modes and len(rows) < n_samples:
                rows.append((res, e))
    dropped = sum(1 for r in results if r.mode not in keep_modes)
    if warn is not None:
        if len(rows) < n_samples:
            warn(f"only {len(rows)} usable samples after {len(results)} trials")
        if dropped:
            warn(f"{dropped} trials outside {{capture, {setup.scenario.failure_mode.value}}} skipped")
        present = {r.mode for r, _ in rows}
        for m in keep_modes:
            if m not in present:
                warn(f"mode {m.value} absent from the dataset")
    raw = np.array([e for _, e in rows]).reshape(len(rows), len(grid))
    labels = tuple(r.mode for r, _ in rows)
    norm = float(np.mean(np.abs(raw[:, 0]))) if rows else 1.0
    split = split_counts(len(rows)) if rows else None
    ds = EnergyDataset(raw / norm, labels, norm, grid, setup.scenario.name, split)
    return ds, results


# ---------------------------------------------------------------- outputs

TRIAL_FIELDS = ["trial_id", "seed", "variant", "mode", "r_a", "r_a_error", "corrected_cycles",
                "t_enable", "atm_seed", "error"]


def write_trials(path, results: list[TrialResult], header: str | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.DictWriter(fh, TRIAL_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in results:
            w.writerow(r.row())


def read_trials(path) -> list[TrialResult]:
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return [TrialResult.from_row(r) for r in csv.DictReader(lines)]


def write_summary(path, summary: CampaignSummary, extra: dict | None = None) -> None:
    d = summary.to_dict()
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def write_error_histogram(path, results: list[TrialResult], bin_km: float = 10_000.0,
                          header: str | None = None) -> None:
    """Histogram-ready captured apoapsis errors: one (bin_lo_km, bin_hi_km, count) row per bin."""
    errs = np.array([r.r_a_error for r in results if r.mode == TrajectoryMode.CAPTURE]) / 1e3
    with Path(path).open("w") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("bin_lo_km,bin_hi_km,count\n")
        if errs.size == 0:
            return
        lo = math.floor(errs.min() / bin_km) * bin_km
        hi = math.floor(errs.max() / bin_km) * bin_km + bin_km
        edges = np.arange(lo, hi + 0.5 * bin_km, bin_km)
        counts, _ = np.histogram(errs, edges)
        for a, b, c in zip(edges[:-1], edges[1:], counts):
            fh.write(f"{a:.1f},{b:.1f},{int(c)}\n")


def write_sweep(path, rows: list[dict], header: str | None = None) -> None:
    cols = ["sigma_prime", "tau", "eps_C", "captures", "capture_pct", "save_pct"]
    with Path(path).open("w") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(_num(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n")
