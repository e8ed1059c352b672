"""Zero-revolution prograde planar Lambert boundary-value solver.

Lancaster-Blanchard universal variable x with Householder (3rd order)
iterations on the normalized time-of-flight equation, following the
Izzo-style formulation.  Specialized to the ecliptic plane: prograde motion
means counter-clockwise, so the tangential direction at a position (x, y) is
always (-y, x)/|r| and the short/long-way split is carried entirely by the
sign of lambda.
"""

from dataclasses import dataclass

import numpy as np

from .accel import maybe_njit, prange
from .constants import MU_SUN

TOF_RESIDUAL_TOL = 1e-12  # on normalized time of flight
MAX_ITER = 60

STATUS_OK = 0
STATUS_NO_CONVERGENCE = 1
STATUS_DEGENERATE = 2
STATUS_BAD_INPUT = 3


class LambertError(RuntimeError):
    pass


@dataclass(frozen=True)
class LambertProblem:
    r1: np.ndarray   # m
    r2: np.ndarray   # m
    tof: float       # s
    mu: float = MU_SUN


@dataclass(frozen=True)
class LambertSolution:
    v1: np.ndarray   # m/s
    v2: np.ndarray   # m/s


def transfer_angle(r1: np.ndarray, r2: np.ndarray) -> float:
    """Prograde (counter-clockwise) angle from r1 to r2, degrees in [0, 360)."""
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    if np.hypot(r1[0], r1[1]) == 0.0 or np.hypot(r2[0], r2[1]) == 0.0:
        raise ValueError("zero-norm input")
    ang = np.arctan2(r2[1], r2[0]) - np.arctan2(r1[1], r1[0])
    return float(np.degrees(ang % (2.0 * np.pi)))


@maybe_njit(cache=True)
def _hypergeometric_f(z):
    # 2F1(3, 1; 5/2; z) by series; z stays small on the Battin branch.
    sj = 1.0
    cj = 1.0
    for j in range(200):
        cj = cj * (3.0 + j) * (1.0 + j) / (2.5 + j) * z / (j + 1.0)
        sj += cj
        if abs(cj) < 1e-14:
            break
    return sj


@maybe_njit(cache=True)
def _x2tof(x, lam):
    """Normalized TOF T(x) on the zero-revolution branch."""
    battin = 0.01
    lagrange = 0.2
    dist = abs(x - 1.0)
    lam2 = lam * lam
    if battin < dist < lagrange:
        # Lagrange expression
        a = 1.0 / (1.0 - x * x)
        if a > 0.0:
            alfa = 2.0 * np.arccos(x)
            beta = 2.0 * np.arcsin(np.sqrt(lam2 / a))
            if lam < 0.0:
                beta = -beta
            return a * np.sqrt(a) * ((alfa - np.sin(alfa)) - (beta - np.sin(beta))) / 2.0
        alfa = 2.0 * np.arccosh(x)
        beta = 2.0 * np.arcsinh(np.sqrt(-lam2 / a))
        if lam < 0.0:
            beta = -beta
        return -a * np.sqrt(-a) * ((beta - np.sinh(beta)) - (alfa - np.sinh(alfa))) / 2.0
    big_e = x * x - 1.0
    z = np.sqrt(1.0 + lam2 * big_e)
    if dist < battin:
        # Battin series around the parabola x = 1
        eta = z - lam * x
        s1 = 0.5 * (1.0 - lam - x * eta)
        q = 4.0 / 3.0 * _hypergeometric_f(s1)
        return (eta * eta * eta * q + 4.0 * lam * eta) / 2.0
    # Lancaster-Blanchard expression
    y = np.sqrt(abs(big_e))
    g = x * z - lam * big_e
    if big_e < 0.0:
        d = np.arccos(g)
    else:
        d = np.log(y * (z - lam * x) + g)
    return (x - lam * z - d / y) / big_e


@maybe_njit(cache=True)
def _dtdx(x, t, lam):
    lam2 = lam * lam
    lam3 = lam2 * lam
    umx2 = 1.0 - x * x
    y = np.sqrt(1.0 - lam2 * umx2)
    dt = (3.0 * t * x - 2.0 + 2.0 * lam3 * x / y) / umx2
    ddt = (3.0 * t + 5.0 * x * dt + 2.0 * (1.0 - lam2) * lam3 / y**3) / umx2
    dddt = (7.0 * x * ddt + 8.0 * dt - 6.0 * (1.0 - lam2) * lam2 * lam3 * x / y**5) / umx2
    return dt, ddt, dddt


@maybe_njit(cache=True)
def _solve_x(t_target, lam):
    """Householder root-solve of T(x) = t_target; returns (x, status)."""
    t00 = np.arccos(lam) + lam * np.sqrt(1.0 - lam * lam)
    t1 = 2.0 / 3.0 * (1.0 - lam**3)
    if t_target >= t00:
        x = -(t_target - t00) / (t_target - t00 + 4.0)
    elif t_target <= t1:
        x = t1 * (t1 - t_target) / (0.4 * (1.0 - lam**5) * t_target) + 1.0
    else:
        x = (t_target / t00) ** (0.6931471805599453 / np.log(t1 / t00)) - 1.0

    for _ in range(MAX_ITER):
        t = _x2tof(x, lam)
        if abs(t - t_target) <= TOF_RESIDUAL_TOL:
            return x, STATUS_OK
        dt, ddt, dddt = _dtdx(x, t, lam)
        delta = t - t_target
        dt2 = dt * dt
        denom = dt * (dt2 - delta * ddt) + dddt * delta * delta / 6.0
        xnew = x - delta * (dt2 - delta * ddt / 2.0) / denom
        if not np.isfinite(xnew):
            return x, STATUS_NO_CONVERGENCE
        if abs(xnew - x) < 1e-15 and abs(t - t_target) <= 1e-9:
            return xnew, STATUS_OK
        x = xnew
    return x, STATUS_NO_CONVERGENCE


@maybe_njit(cache=True)
def _solve_kernel(r1, r2, tof, mu):
    """Returns (v1v2[4], status)."""
    out = np.zeros(4)
    big_r1 = np.sqrt(r1[0] * r1[0] + r1[1] * r1[1])
    big_r2 = np.sqrt(r2[0] * r2[0] + r2[1] * r2[1])
    if big_r1 == 0.0 or big_r2 == 0.0 or tof <= 0.0 or mu <= 0.0:
        return out, STATUS_BAD_INPUT

    cx = r2[0] - r1[0]
    cy = r2[1] - r1[1]
    c = np.sqrt(cx * cx + cy * cy)
    s = 0.5 * (big_r1 + big_r2 + c)
    lam2 = 1.0 - c / s
    if lam2 < 0.0:
        lam2 = 0.0
    lam = np.sqrt(lam2)
    # prograde: lambda carries the sign of sin(theta)
    cross_z = r1[0] * r2[1] - r1[1] * r2[0]
    if cross_z < 0.0:
        lam = -lam
    if abs(lam) > 1.0 - 1e-12:
        return out, STATUS_DEGENERATE

    t_target = np.sqrt(2.0 * mu / s**3) * tof
    x, status = _solve_x(t_target, lam)
    if status != STATUS_OK:
        return out, status

    gamma = np.sqrt(mu * s / 2.0)
    rho = (big_r1 - big_r2) / c
    sigma = np.sqrt(1.0 - rho * rho)
    y = np.sqrt(1.0 - lam2 + lam2 * x * x)

    vr1 = gamma * ((lam * y - x) - rho * (lam * y + x)) / big_r1
    vr2 = -gamma * ((lam * y - x) + rho * (lam * y + x)) / big_r2
    vt = gamma * sigma * (y + lam * x)
    vt1 = vt / big_r1
    vt2 = vt / big_r2

    # prograde (CCW) tangential direction in the plane: z_hat x r_hat
    out[0] = vr1 * r1[0] / big_r1 + vt1 * (-r1[1] / big_r1)
    out[1] = vr1 * r1[1] / big_r1 + vt1 * (r1[0] / big_r1)
    out[2] = vr2 * r2[0] / big_r2 + vt2 * (-r2[1] / big_r2)
    out[3] = vr2 * r2[1] / big_r2 + vt2 * (r2[0] / big_r2)
    for i in range(4):
        if not np.isfinite(out[i]):
            return out, STATUS_NO_CONVERGENCE
    return out, STATUS_OK


@maybe_njit(cache=True, parallel=True)
def _solve_batch_kernel(r1s, r2s, tofs, mu):
    m = r1s.shape[0]
    out = np.empty((m, 4))
    status = np.empty(m, dtype=np.int64)
    for p in prange(m):
        v, st = _solve_kernel(r1s[p], r2s[p], tofs[p], mu)
        out[p] = v
        status[p] = st
    return out, status


_STATUS_MSG = {
    STATUS_NO_CONVERGENCE: "root-solve did not converge within iteration cap",
    STATUS_DEGENERATE: "degenerate transfer geometry (collinear endpoints)",
    STATUS_BAD_INPUT: "invalid inputs (zero-norm position or nonpositive tof/mu)",
}


def solve(problem: LambertProblem) -> LambertSolution:
    """Velocities of the zero-rev prograde conic through (r1, r2, tof)."""
    r1 = np.ascontiguousarray(problem.r1, dtype=np.float64)
    r2 = np.ascontiguousarray(problem.r2, dtype=np.float64)
    v, status = _solve_kernel(r1, r2, float(problem.tof), float(problem.mu))
    if status != STATUS_OK:
        raise LambertError(_STATUS_MSG[status])
    return LambertSolution(v1=v[:2].copy(), v2=v[2:].copy())


def solve_batch(r1s: np.ndarray, r2s: np.ndarray, tofs: np.ndarray,
                mu: float = MU_SUN):
    """Batch solve; returns (v1v2 [M, 4], status [M]), one row per problem."""
    r1s = np.ascontiguousarray(r1s, dtype=np.float64)
    r2s = np.ascontiguousarray(r2s, dtype=np.float64)
    tofs = np.ascontiguousarray(tofs, dtype=np.float64)
    return _solve_batch_kernel(r1s, r2s, tofs, float(mu))
