import math

import numpy as np
import pytest

from aerocap.environment import PlanetModel


@pytest.fixture(scope="session")
def planet():
    return PlanetModel()


def cartesian_state(r, theta, phi, V, gamma, psi, omega):
    """Inertial position and velocity from a planet-relative spherical state.

    Built from east/north/up unit vectors, independently of the package's
    frame helpers.
    """
    ct, st, cp, sp = math.cos(theta), math.sin(theta), math.cos(phi), math.sin(phi)
    up = np.array([cp * ct, cp * st, sp])
    east = np.array([-st, ct, 0.0])
    north = np.array([-sp * ct, -sp * st, cp])
    v_rel = V * (math.cos(gamma) * math.cos(psi) * east + math.cos(gamma) * math.sin(psi) * north
                 + math.sin(gamma) * up)
    pos = r * up
    v_in = v_rel + np.cross([0.0, 0.0, omega], pos)
    return pos, v_in


def j2_accel(pos, mu, Re, J2):
    x, y, z = pos
    r2 = pos @ pos
    r = math.sqrt(r2)
    k = 1.5 * J2 * Re**2 / r2
    f = 5.0 * z * z / r2
    ax = -mu * x / r**3 * (1 + k * (1 - f))
    ay = -mu * y / r**3 * (1 + k * (1 - f))
    az = -mu * z / r**3 * (1 + k * (3 - f))
    return np.array([ax, ay, az])


# one line per acceptance criterion, printed at the end of the session
CRITERIA: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    CRITERIA[number] = (name, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        name, ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {name}: {detail}")
