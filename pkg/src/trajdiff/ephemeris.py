"""Heliocentric planar states of Earth and Mars from mean Keplerian elements.

Standard low-precision mean elements (J2000 values plus linear secular rates
per Julian century, valid 1800-2050) are evaluated at the requested epoch,
Kepler's equation is solved by Newton iteration, and the resulting ecliptic
state is projected onto the plane by dropping the z components.  Good to
<0.1% in geometry over the 2005-2006 analysis window, which is all the
dataset builder needs.
"""

from dataclasses import dataclass

import numpy as np

from .accel import maybe_njit
from .constants import AU, MU_SUN

KEPLER_TOL = 1e-12   # rad, residual of Kepler's equation
KEPLER_MAX_ITER = 50

# Mean elements at J2000 and centennial rates:
# [a AU, a_dot, e, e_dot, I deg, I_dot, L deg, L_dot, peri deg, peri_dot,
#  node deg, node_dot].  Earth row is the Earth-Moon barycenter.
_ELEMENTS = {
    "earth": np.array([
        1.00000261, 0.00000562,
        0.01671123, -0.00004392,
        -0.00001531, -0.01294668,
        100.46457166, 35999.37244981,
        102.93768193, 0.32327364,
        0.0, 0.0,
    ]),
    "mars": np.array([
        1.52371034, 0.00001847,
        0.09339410, 0.00007882,
        1.84969142, -0.00813131,
        -4.55343205, 19140.30268499,
        -23.94362959, 0.44441088,
        49.55953891, -0.29257343,
    ]),
}


@dataclass(frozen=True)
class PlanarState:
    """Heliocentric ecliptic-plane position (m) and velocity (m/s)."""

    r: np.ndarray
    v: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.array([self.r[0], self.r[1], self.v[0], self.v[1]])


@maybe_njit(cache=True)
def solve_kepler(mean_anomaly, ecc):
    """Eccentric anomaly from Kepler's equation, Newton iteration."""
    m = mean_anomaly % (2.0 * np.pi)
    e_anom = m + ecc * np.sin(m)
    for _ in range(KEPLER_MAX_ITER):
        resid = e_anom - ecc * np.sin(e_anom) - m
        if abs(resid) < KEPLER_TOL:
            break
        e_anom = e_anom - resid / (1.0 - ecc * np.cos(e_anom))
    return e_anom


@maybe_njit(cache=True)
def _state_kernel(elems, mjd2000, mu, au):
    t = mjd2000 / 36525.0  # Julian centuries from J2000 (TT)
    a = (elems[0] + elems[1] * t) * au
    ecc = elems[2] + elems[3] * t
    inc = np.deg2rad(elems[4] + elems[5] * t)
    mean_lon = np.deg2rad(elems[6] + elems[7] * t)
    lon_peri = np.deg2rad(elems[8] + elems[9] * t)
    lon_node = np.deg2rad(elems[10] + elems[11] * t)

    arg_peri = lon_peri - lon_node
    mean_anom = mean_lon - lon_peri
    e_anom = solve_kepler(mean_anom, ecc)

    # Perifocal position/velocity.
    b_over_a = np.sqrt(1.0 - ecc * ecc)
    xp = a * (np.cos(e_anom) - ecc)
    yp = a * b_over_a * np.sin(e_anom)
    e_dot = np.sqrt(mu / a**3) / (1.0 - ecc * np.cos(e_anom))
    vxp = -a * np.sin(e_anom) * e_dot
    vyp = a * b_over_a * np.cos(e_anom) * e_dot

    # Rotate perifocal -> ecliptic (3-1-3: node, inclination, arg periapsis),
    # keeping only the in-plane rows.
    cw, sw = np.cos(arg_peri), np.sin(arg_peri)
    co, so = np.cos(lon_node), np.sin(lon_node)
    ci = np.cos(inc)
    rxx = co * cw - so * sw * ci
    rxy = -co * sw - so * cw * ci
    ryx = so * cw + co * sw * ci
    ryy = -so * sw + co * cw * ci

    out = np.empty(4)
    out[0] = rxx * xp + rxy * yp
    out[1] = ryx * xp + ryy * yp
    out[2] = rxx * vxp + rxy * vyp
    out[3] = ryx * vxp + ryy * vyp
    return out


@maybe_njit(cache=True)
def _states_kernel(elems, epochs, mu, au):
    out = np.empty((epochs.shape[0], 4))
    for i in range(epochs.shape[0]):
        out[i] = _state_kernel(elems, epochs[i], mu, au)
    return out


def _elements_for(body: str) -> np.ndarray:
    key = body.lower()
    if key not in _ELEMENTS:
        raise ValueError(f"unknown body {body!r}; expected 'earth' or 'mars'")
    return _ELEMENTS[key]


def planet_state(body: str, epoch_mjd2000: float) -> PlanarState:
    """Heliocentric planar state of a planet at an epoch (days since J2000 TT).

    Pure function of its inputs: repeated calls return bit-identical states.
    """
    if not np.isfinite(epoch_mjd2000):
        raise ValueError("epoch must be finite")
    s = _state_kernel(_elements_for(body), float(epoch_mjd2000), MU_SUN, AU)
    return PlanarState(r=s[:2].copy(), v=s[2:].copy())


def planet_states(body: str, epochs_mjd2000: np.ndarray) -> np.ndarray:
    """Vectorized planet_state; returns an [N, 4] array of (x, y, vx, vy)."""
    epochs = np.ascontiguousarray(epochs_mjd2000, dtype=np.float64)
    return _states_kernel(_elements_for(body), epochs, MU_SUN, AU)
