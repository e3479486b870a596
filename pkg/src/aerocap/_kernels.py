"""Compiled inner loops: density lookup, equations of motion, RK4 and the
onboard prediction. Everything here works on flat float64 arrays so the
Python layer can stay object-oriented without paying per-step overhead.

State vector layout: [r, theta, phi, V, gamma, psi, sigma].
planet = [mu, Re, J2, Omega]; veh = [beta, LD, zeta, sigma_rate_max].
"""

import math

import numpy as np
from numba import njit

R, THETA, PHI, V, GAMMA, PSI, SIGMA = range(7)
NSTATE = 7

EXITED = 0
TIMEOUT = 1
IMPACT = 2

SING_TOL = 1e-12
V_FLOOR = 200.0


@njit(cache=True)
def density(kind, coef, aparams, grid, vals, h):
    if kind == 0:
        hh = min(max(h, aparams[0]), aparams[1]) / aparams[3]
        if aparams[2] > 0.5:
            num = coef[0] + hh * (coef[2] + hh * (coef[1] + hh * (coef[6] + hh * coef[8])))
        else:
            num = coef[0] + hh * (coef[2] + hh * (coef[4] + hh * (coef[6] + hh * coef[8])))
        den = 1.0 + hh * (coef[1] + hh * (coef[3] + hh * (coef[5] + hh * coef[7])))
        return math.exp(num / den)
    n = grid.shape[0]
    if h <= grid[0]:
        return vals[0]
    if h >= grid[n - 1]:
        return vals[n - 1]
    i = np.searchsorted(grid, h, side="right") - 1
    w = (h - grid[i]) / (grid[i + 1] - grid[i])
    return vals[i] + w * (vals[i + 1] - vals[i])


@njit(cache=True)
def derivs(y, cmd, planet, kind, coef, aparams, grid, vals, veh, kL, kD, lag, out):
    """Time derivatives of the state.

    With ``lag`` the bank follows a first-order lag toward ``cmd`` with a rate
    clip and lift uses the actual bank y[SIGMA]; without it the bank is held
    at ``cmd`` and its derivative is zero.
    """
    mu, Re, J2, Om = planet[0], planet[1], planet[2], planet[3]
    r, phi, Vel, gam, psi = y[R], y[PHI], y[V], y[GAMMA], y[PSI]
    sig = y[SIGMA] if lag else cmd

    cg = math.cos(gam)
    cp = math.cos(phi)
    if abs(cg) < SING_TOL or abs(cp) < SING_TOL:
        raise ValueError("singular attitude: cos(gamma) or cos(phi) vanished")
    sg = math.sin(gam)
    sp = math.sin(phi)
    cs = math.cos(psi)
    ss = math.sin(psi)

    base = mu / (r * r)
    k = J2 * (Re / r) ** 2
    g_r = base * (1.0 + k * (1.5 - 4.5 * sp * sp))
    g_phi = 3.0 * base * k * sp * cp

    rho = density(kind, coef, aparams, grid, vals, r - Re)
    q = rho * Vel * Vel / (2.0 * veh[0])
    F_T = -q * kD
    F_N = q * veh[1] * kL

    out[R] = Vel * sg
    out[THETA] = Vel * cg * cs / (r * cp)
    out[PHI] = Vel * cg * ss / r
    out[V] = F_T - g_r * sg - g_phi * cg * ss + Om * Om * r * cp * (sg * cp - cg * sp * ss)
    out[GAMMA] = (
        F_N * math.cos(sig)
        - g_r * cg
        + Vel * Vel / r * cg
        + g_phi * sg * ss
        + 2.0 * Om * Vel * cp * cs
        + Om * Om * r * cp * (cg * cp + sg * sp * ss)
    ) / Vel
    out[PSI] = (
        F_N * math.sin(sig) / cg
        - Vel * Vel / r * cg * cs * sp / cp
        - g_phi * cs / cg
        + 2.0 * Om * Vel * (sg / cg * cp * ss - sp)
        - Om * Om * r * sp * cp * cs / cg
    ) / Vel
    if lag:
        rate = (cmd - y[SIGMA]) / veh[2]
        rmax = veh[3]
        if rate > rmax:
            rate = rmax
        elif rate < -rmax:
            rate = -rmax
        out[SIGMA] = rate
    else:
        out[SIGMA] = 0.0


@njit(cache=True)
def rk4_into(y, dt, cmd, planet, kind, coef, aparams, grid, vals, veh, kL, kD, lag, work, out):
    """One RK4 step written to ``out``; ``work`` is a (5, n) scratch array."""
    n = y.shape[0]
    k1, k2, k3, k4, tmp = work[0], work[1], work[2], work[3], work[4]
    derivs(y, cmd, planet, kind, coef, aparams, grid, vals, veh, kL, kD, lag, k1)
    for i in range(n):
        tmp[i] = y[i] + 0.5 * dt * k1[i]
    derivs(tmp, cmd, planet, kind, coef, aparams, grid, vals, veh, kL, kD, lag, k2)
    for i in range(n):
        tmp[i] = y[i] + 0.5 * dt * k2[i]
    derivs(tmp, cmd, planet, kind, coef, aparams, grid, vals, veh, kL, kD, lag, k3)
    for i in range(n):
        tmp[i] = y[i] + dt * k3[i]
    derivs(tmp, cmd, planet, kind, coef, aparams, grid, vals, veh, kL, kD, lag, k4)
    for i in range(n):
        out[i] = y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@njit(cache=True)
def rk4_step(y, dt, cmd, planet, kind, coef, aparams, grid, vals, veh, kL, kD, lag):
    work = np.empty((5, y.shape[0]))
    out = np.empty(y.shape[0])
    rk4_into(y, dt, cmd, planet, kind, coef, aparams, grid, vals, veh, kL, kD, lag, work, out)
    return out


@njit(cache=True)
def _profile_bank(t, sig_a, sig_b, t_sw):
    return sig_a if t < t_sw else sig_b


@njit(cache=True)
def predict(y0, t0, t_f, dt, sig_a, sig_b, t_sw, h_exit, stop_at_exit,
            planet, kind, coef, aparams, grid, vals, veh, kL, kD, max_rows):
    """Integrate the onboard model under a two-level bank profile.

    The bank is ``sig_a`` before ``t_sw`` and ``sig_b`` after; the step that
    straddles ``t_sw`` is split so the outcome is continuous in ``t_sw``.
    Returns (terminal state, terminal time, status, recorded rows) where rows
    hold [t, state...] for every accepted step when ``max_rows`` > 0.
    """
    Re = planet[1]
    y = y0.copy()
    y_new = np.empty(NSTATE)
    work = np.empty((5, NSTATE))
    t = t0
    rows = np.empty((max(max_rows, 1), NSTATE + 1))
    nrow = 0
    if max_rows > 0:
        rows[0, 0] = t
        rows[0, 1:] = y
        nrow = 1
    if stop_at_exit and y[R] - Re >= h_exit and y[GAMMA] > 0.0:
        return y, t, EXITED, rows[:nrow]
    if y[R] - Re <= 0.0:
        return y, t, IMPACT, rows[:nrow]
    status = TIMEOUT
    while t < t_f - 1e-9:
        h_step = min(dt, t_f - t)
        if t < t_sw < t + h_step - 1e-9:
            h_step = t_sw - t
        cmd = _profile_bank(t, sig_a, sig_b, t_sw)
        rk4_into(y, h_step, cmd, planet, kind, coef, aparams, grid, vals, veh, kL, kD, False, work, y_new)
        y, y_new = y_new, y
        y[SIGMA] = _profile_bank(t + h_step, sig_a, sig_b, t_sw)
        t = t + h_step
        if max_rows > 0 and nrow < max_rows:
            rows[nrow, 0] = t
            rows[nrow, 1:] = y
            nrow += 1
        h = y[R] - Re
        if h <= 0.0 or not y[V] > V_FLOOR:
            status = IMPACT
            break
        if stop_at_exit and h >= h_exit and y[GAMMA] > 0.0:
            status = EXITED
            break
    return y, t, status, rows[:nrow]
