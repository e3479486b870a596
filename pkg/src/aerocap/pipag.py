"""FNPAG with a probabilistic mode indicator in the loop.

Each enabled guidance cycle joins the flown energy history with the energy
of the onboard prediction under the freshly solved bank profile, classifies
the whole curve with a trained GMVAE, and biases the bank magnitude toward
lift-down (escape risk) or lift-up (impact risk) when the capture
probability is low or the failure probability is high.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import SimState, TrajectoryMode, energy_series, inertial_energy
from .fnpag import Fnpag, FnpagConfig, OnboardModels, predict_to_exit, solve_phase2
from .gmvae import GmvaeModel, encode, mode_probabilities, preprocess_series


class IndicatorConfigError(ValueError):
    """Model and indicator inputs do not belong together."""


@dataclass(frozen=True)
class PipagParams:
    eps_C: float = 0.975
    eps_F: float = 0.025
    sigma_prime: float = math.radians(40.0)
    tau: float = 40.0

    def __post_init__(self):
        if not (0 <= self.eps_C <= 1 and 0 <= self.eps_F <= 1):
            raise ValueError("thresholds must lie in [0, 1]")
        if self.sigma_prime < 0 or self.tau < 0:
            raise ValueError("sigma_prime and tau must be non-negative")

    @property
    def inert(self) -> bool:
        """True when no correction or forced switch can ever happen."""
        return self.sigma_prime == 0.0 or (self.eps_C <= 0.0 and self.eps_F >= 1.0)


NEAR_ESCAPE_PARAMS = PipagParams(0.975, 0.025, math.radians(40.0), 40.0)
NEAR_IMPACT_PARAMS = PipagParams(0.975, 0.025, math.radians(10.0), 10.0)


@dataclass
class PipagState:
    t_c: float = -math.inf
    bank_corrected: bool = False
    mode_probabilities: dict = field(default_factory=dict)


def indicator(history_t, history_eps, pred_t, pred_eps, model: GmvaeModel,
              time_grid=None, norm_constant: float | None = None) -> dict[TrajectoryMode, float]:
    """Mode probabilities for flown history + predicted continuation."""
    x = indicator_input(history_t, history_eps, pred_t, pred_eps, model, time_grid, norm_constant)
    return mode_probabilities(model, x)


def indicator_input(history_t, history_eps, pred_t, pred_eps, model: GmvaeModel,
                    time_grid=None, norm_constant: float | None = None) -> np.ndarray:
    """Join the flown and predicted energy series and process them exactly
    like training rows. Prediction samples at or before the last flown time
    are dropped."""
    if norm_constant is not None and norm_constant != model.norm_constant:
        raise IndicatorConfigError("normalization constant does not match the model")
    grid = model.time_grid if time_grid is None else np.asarray(time_grid)
    ht = np.asarray(history_t, dtype=np.float64)
    pt = np.asarray(pred_t, dtype=np.float64)
    he = np.asarray(history_eps, dtype=np.float64)
    pe = np.asarray(pred_eps, dtype=np.float64)
    if ht.size and pt.size:
        if pt[0] - ht[-1] > 1.0 + 1e-9:
            raise ValueError("prediction does not start where the history ends")
        keep = pt > ht[-1]
        pt, pe = pt[keep], pe[keep]
    t = np.concatenate([ht, pt])
    e = np.concatenate([he, pe])
    return preprocess_series(t, e, grid, model.norm_constant)


def correct(sigma_star: float, probs: dict, phase: int, params: PipagParams, st: PipagState,
            t_k: float, failure_mode: TrajectoryMode) -> tuple[float, PipagState, bool]:
    """Algorithm-level correction of a bank magnitude.

    Returns (magnitude, state, forced_phase2). In phase 1 a trigger only
    requests the switch to phase 2; the caller re-solves and calls again.
    """
    if params.inert:
        st.bank_corrected = False
        return sigma_star, st, False
    p_cap = probs.get(TrajectoryMode.CAPTURE, 0.0)
    p_fail = probs.get(failure_mode, 0.0)
    st.mode_probabilities = dict(probs)
    st.bank_corrected = False
    shift = params.sigma_prime if failure_mode == TrajectoryMode.ESCAPE else -params.sigma_prime
    out = sigma_star
    if p_cap < params.eps_C or p_fail > params.eps_F:
        if phase == 1:
            return sigma_star, st, True
        out = sigma_star + shift
        st.bank_corrected = True
        st.t_c = t_k
    elif t_k - st.t_c < params.tau:
        out = sigma_star + shift
        st.bank_corrected = True
    return min(max(out, 0.0), math.pi), st, False


class Pipag(Fnpag):
    """FNPAG controller with the indicator evaluated after every solve."""

    def __init__(self, config: FnpagConfig, models: OnboardModels, model: GmvaeModel,
                 params: PipagParams = NEAR_ESCAPE_PARAMS,
                 failure_mode: TrajectoryMode | None = None):
        super().__init__(config, models)
        self.model = model
        self.params = params
        self.failure_mode = failure_mode or model.failure_mode
        self.pstate = PipagState()
        self._ht: list[float] = []
        self._he: list[float] = []
        self.corrected_cycles = 0
        self.latent_trace: list[np.ndarray] = []

    def guidance_step(self, s: SimState, drag: float, lift: float) -> float:
        self._ht.append(s.t)
        self._he.append(float(inertial_energy(s.r, s.phi, s.V, s.gamma, s.psi, self.models.planet)))
        cmd = super().guidance_step(s, drag, lift)
        row = self.log[-1]
        for k, v in (("P_capture", math.nan), ("P_failure", math.nan), ("corrected", 0),
                     ("forced_phase2", 0), ("sigma_corrected", math.nan)):
            row.setdefault(k, v)
        return cmd

    def post_solve(self, s: SimState, profile):
        st = self.state
        base, _ = super().post_solve(s, profile)
        extra = {"P_capture": math.nan, "P_failure": math.nan, "corrected": 0,
                 "forced_phase2": 0, "sigma_corrected": base}
        probs = self._probabilities(s, profile)
        extra["P_capture"] = probs.get(TrajectoryMode.CAPTURE, 0.0)
        extra["P_failure"] = probs.get(self.failure_mode, 0.0)
        forced = False
        if st.phase == 1:
            _, self.pstate, forced = correct(base, probs, 1, self.params, self.pstate, s.t, self.failure_mode)
            if not forced:
                extra["sigma_corrected"] = base
                return base, extra
            # switch now and fly the phase-2 solution this cycle, uncorrected
            st.phase = 2
            st.t_switch = s.t
            extra["forced_phase2"] = 1
            st.sigma_star, st.err = solve_phase2(s, self.config, self.models, self.active_filters, st.bank_sign)
            extra["sigma_corrected"] = st.sigma_star
            return st.sigma_star, extra
        out, self.pstate, _ = correct(st.sigma_star, probs, 2, self.params, self.pstate, s.t, self.failure_mode)
        if self.pstate.bank_corrected:
            self.corrected_cycles += 1
        extra["corrected"] = int(self.pstate.bank_corrected)
        extra["sigma_corrected"] = out
        return out, extra

    def _probabilities(self, s: SimState, profile) -> dict:
        sign = self.state.bank_sign
        if isinstance(profile, tuple):
            prof = (sign * profile[0], sign * profile[1], profile[2])
        else:
            prof = sign * profile
        pred = predict_to_exit(s, prof, self.models, self.active_filters, self.config, record=True)
        rows = pred.rows
        pe = energy_series(rows, self.models.planet)
        x = indicator_input(self._ht, self._he, rows[:, 0], pe, self.model)
        probs = mode_probabilities(self.model, x)
        self.latent_trace.append(np.concatenate([[s.t], encode(self.model, x)[0]]))
        self.pstate.mode_probabilities = probs
        return probs
