"""Planar two-body dynamics and adaptive high-order propagation.

The integrator is the 13-stage Fehlberg 7(8) embedded Runge-Kutta pair,
advanced on the 8th-order solution with PI step-size control.  Default
relative and absolute tolerances are 1e-12, which keeps specific energy and
angular momentum conserved to <=1e-10 relative over any dataset arc.
"""

from dataclasses import dataclass

import numpy as np

from .accel import maybe_njit, prange
from .constants import MU_SUN
from .ephemeris import PlanarState

DEFAULT_TOL = 1e-12

_STATUS_OK = 0
_STATUS_UNDERFLOW = 1
_STATUS_NONFINITE = 2

# Fehlberg 7(8) tableau (NASA TR R-287).  _B8 advances the solution; the
# embedded 7th-order result differs only through the error term
# h * 41/840 * (k0 + k10 - k11 - k12).
_C = np.array([
    0.0, 2 / 27, 1 / 9, 1 / 6, 5 / 12, 1 / 2, 5 / 6, 1 / 6, 2 / 3, 1 / 3,
    1.0, 0.0, 1.0,
])

_A = np.zeros((13, 12))
_A[1, 0] = 2 / 27
_A[2, :2] = [1 / 36, 1 / 12]
_A[3, :3] = [1 / 24, 0, 1 / 8]
_A[4, :4] = [5 / 12, 0, -25 / 16, 25 / 16]
_A[5, :5] = [1 / 20, 0, 0, 1 / 4, 1 / 5]
_A[6, :6] = [-25 / 108, 0, 0, 125 / 108, -65 / 27, 125 / 54]
_A[7, :7] = [31 / 300, 0, 0, 0, 61 / 225, -2 / 9, 13 / 900]
_A[8, :8] = [2, 0, 0, -53 / 6, 704 / 45, -107 / 9, 67 / 90, 3]
_A[9, :9] = [-91 / 108, 0, 0, 23 / 108, -976 / 135, 311 / 54, -19 / 60,
             17 / 6, -1 / 12]
_A[10, :10] = [2383 / 4100, 0, 0, -341 / 164, 4496 / 1025, -301 / 82,
               2133 / 4100, 45 / 82, 45 / 164, 18 / 41]
_A[11, :11] = [3 / 205, 0, 0, 0, 0, -6 / 41, -3 / 205, -3 / 41, 3 / 41,
               6 / 41, 0]
_A[12, :12] = [-1777 / 4100, 0, 0, -341 / 164, 4496 / 1025, -289 / 82,
               2193 / 4100, 51 / 82, 33 / 164, 12 / 41, 0, 1]

_B8 = np.array([
    0.0, 0, 0, 0, 0, 34 / 105, 9 / 35, 9 / 35, 9 / 280, 9 / 280, 0,
    41 / 840, 41 / 840,
])

_ERR_COEF = 41 / 840


class PropagationError(RuntimeError):
    """Step-size underflow or non-finite state during propagation."""


@dataclass(frozen=True)
class TwoBodySystem:
    mu: float  # central-body gravitational parameter, m^3/s^2

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")


SUN = TwoBodySystem(MU_SUN)


@dataclass
class Trajectory:
    """Time-stamped sequence of planar states along one transfer.

    ``t`` holds seconds since departure, ``states`` the matching
    (x, y, vx, vy) rows in meters and m/s.
    """

    t: np.ndarray       # [n]
    states: np.ndarray  # [n, 4]

    @property
    def n(self) -> int:
        return self.t.shape[0]

    def block(self) -> np.ndarray:
        """[5, n] block of rows (t, x, y, vx, vy)."""
        return np.vstack([self.t, self.states.T])

    @classmethod
    def from_block(cls, block: np.ndarray) -> "Trajectory":
        block = np.asarray(block, dtype=np.float64)
        if block.ndim != 2 or block.shape[0] != 5:
            raise ValueError(f"expected [5, n] block, got {block.shape}")
        return cls(t=block[0].copy(), states=block[1:].T.copy())

    def initial_state(self) -> PlanarState:
        return PlanarState(r=self.states[0, :2].copy(), v=self.states[0, 2:].copy())

    def final_state(self) -> PlanarState:
        return PlanarState(r=self.states[-1, :2].copy(), v=self.states[-1, 2:].copy())


def acceleration(r: np.ndarray, system: TwoBodySystem = SUN) -> np.ndarray:
    """Central gravity acceleration -mu/|r|^3 * r."""
    r = np.asarray(r, dtype=np.float64)
    rn = np.hypot(r[0], r[1])
    if rn == 0.0:
        raise ValueError("zero-norm position")
    return -system.mu / rn**3 * r


@maybe_njit(cache=True)
def _rk78_step(y, h, mu, k):
    """One trial step; fills k (13x4), returns (ynew, err_estimate[4])."""
    for s in range(13):
        yt = y.copy()
        for j in range(s):
            a = _A[s, j]
            if a != 0.0:
                for i in range(4):
                    yt[i] += h * a * k[j, i]
        r3 = (yt[0] * yt[0] + yt[1] * yt[1]) ** 1.5
        k[s, 0] = yt[2]
        k[s, 1] = yt[3]
        k[s, 2] = -mu * yt[0] / r3
        k[s, 3] = -mu * yt[1] / r3
    ynew = y.copy()
    err = np.empty(4)
    for i in range(4):
        acc = 0.0
        for s in range(13):
            b = _B8[s]
            if b != 0.0:
                acc += b * k[s, i]
        ynew[i] = y[i] + h * acc
        err[i] = h * _ERR_COEF * (k[0, i] + k[10, i] - k[11, i] - k[12, i])
    return ynew, err


@maybe_njit(cache=True)
def _propagate_kernel(state0, dt, mu, rtol, atol):
    y = state0.copy()
    if dt == 0.0:
        return y, _STATUS_OK
    direction = 1.0 if dt > 0.0 else -1.0

    # Initial step from the local orbital timescale; the controller adapts.
    r0 = np.sqrt(y[0] * y[0] + y[1] * y[1])
    h = direction * min(abs(dt), 1e-2 * 2.0 * np.pi * np.sqrt(r0**3 / mu))

    t = 0.0
    err_prev = 1e-4
    k = np.empty((13, 4))
    for _ in range(10_000_000):
        if (dt - t) * direction <= 0.0:
            return y, _STATUS_OK
        if abs(h) > abs(dt - t):
            h = dt - t
        if abs(h) <= 16.0 * 2.220446049250313e-16 * max(abs(t), abs(dt)):
            return y, _STATUS_UNDERFLOW

        ynew, err = _rk78_step(y, h, mu, k)

        finite = True
        norm = 0.0
        for i in range(4):
            if not np.isfinite(ynew[i]):
                finite = False
                break
            sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
            norm += (err[i] / sc) ** 2
        if not finite or not np.isfinite(norm):
            return y, _STATUS_NONFINITE
        norm = np.sqrt(norm / 4.0)

        if norm <= 1.0:
            t += h
            y = ynew
            # PI controller (orders the error estimate as h^8).
            if norm == 0.0:
                fac = 6.0
            else:
                fac = 0.9 * norm**-0.0875 * err_prev**0.05
                fac = min(6.0, max(0.2, fac))
            err_prev = max(norm, 1e-4)
            h *= fac
        else:
            h *= max(0.2, 0.9 * norm**-0.125)
    return y, _STATUS_UNDERFLOW


@maybe_njit(cache=True)
def _trajectory_kernel(state0, times, mu, rtol, atol):
    n = times.shape[0]
    out = np.empty((n, 4))
    out[0] = state0
    status = _STATUS_OK
    for idx in range(1, n):
        seg, st = _propagate_kernel(out[idx - 1], times[idx] - times[idx - 1],
                                    mu, rtol, atol)
        out[idx] = seg
        if st != _STATUS_OK:
            status = st
            break
    return out, status


@maybe_njit(cache=True, parallel=True)
def _trajectory_batch_kernel(states0, tofs, times_unit, mu, rtol, atol):
    m = states0.shape[0]
    n = times_unit.shape[0]
    out = np.empty((m, n, 4))
    status = np.zeros(m, dtype=np.int64)
    for p in prange(m):
        times = times_unit * tofs[p]
        traj, st = _trajectory_kernel(states0[p], times, mu, rtol, atol)
        out[p] = traj
        status[p] = st
    return out, status


def _raise_for_status(status: int):
    if status == _STATUS_UNDERFLOW:
        raise PropagationError("step size underflow (near-singular trajectory)")
    if status == _STATUS_NONFINITE:
        raise PropagationError("non-finite state encountered")


def propagate(state0: PlanarState, dt: float, system: TwoBodySystem = SUN,
              tol: float = DEFAULT_TOL) -> PlanarState:
    """Advance a state by dt seconds (negative dt propagates backward)."""
    y0 = state0.as_array()
    rn = np.hypot(y0[0], y0[1])
    if rn == 0.0:
        raise ValueError("zero-norm position")
    y, status = _propagate_kernel(y0, float(dt), system.mu, tol, tol)
    _raise_for_status(status)
    return PlanarState(r=y[:2].copy(), v=y[2:].copy())


def node_times(tof: float, n: int) -> np.ndarray:
    """Exact affine node grid t_k = k * tof / (n - 1), both endpoints included."""
    if n < 2:
        raise ValueError("need at least 2 nodes")
    if not tof > 0:
        raise ValueError("tof must be positive")
    return np.arange(n, dtype=np.float64) * (tof / (n - 1))


def sample_trajectory(state0: PlanarState, tof: float, n: int,
                      system: TwoBodySystem = SUN,
                      tol: float = DEFAULT_TOL) -> Trajectory:
    """Propagate a trajectory and record it at n evenly spaced nodes.

    Interior nodes are obtained by chained segment propagation at the same
    tolerance as single-shot propagation.
    """
    times = node_times(tof, n)
    states, status = _trajectory_kernel(state0.as_array(), times, system.mu,
                                        tol, tol)
    _raise_for_status(status)
    return Trajectory(t=times, states=states)


def sample_trajectories(states0: np.ndarray, tofs: np.ndarray, n: int,
                        system: TwoBodySystem = SUN,
                        tol: float = DEFAULT_TOL):
    """Batch trajectory sampling over [M, 4] initial states and [M] TOFs.

    Returns (states [M, n, 4], status [M]); rows with nonzero status failed
    and hold garbage past the failing node.  Node times are the exact grid
    ``node_times(tof, n)`` per entry.
    """
    states0 = np.ascontiguousarray(states0, dtype=np.float64)
    tofs = np.ascontiguousarray(tofs, dtype=np.float64)
    unit = np.arange(n, dtype=np.float64) / (n - 1)
    return _trajectory_batch_kernel(states0, tofs, unit, system.mu, tol, tol)


def specific_energy(states: np.ndarray, system: TwoBodySystem = SUN) -> np.ndarray:
    """v^2/2 - mu/|r| for [..., 4] state arrays."""
    states = np.asarray(states, dtype=np.float64)
    r = np.hypot(states[..., 0], states[..., 1])
    v2 = states[..., 2] ** 2 + states[..., 3] ** 2
    return 0.5 * v2 - system.mu / r


def angular_momentum(states: np.ndarray) -> np.ndarray:
    """Planar angular momentum x*vy - y*vx for [..., 4] state arrays."""
    states = np.asarray(states, dtype=np.float64)
    return states[..., 0] * states[..., 3] - states[..., 1] * states[..., 2]
