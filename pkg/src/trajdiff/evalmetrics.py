"""Feasibility metrics for generated transfers.

Three procedures measure how well a decoded trajectory obeys the dynamics:

* Lambert comparison: re-solve the boundary-value problem from the sample's
  endpoints and TOF, and compare departure/arrival velocities.
* DRN (defect RMS number): propagate each adjacent node pair to the common
  interval midpoint, forward from node i and backward from node i+1; the
  state mismatches, scaled by 1 AU and 30 km/s, are summarized as
  DRN = sqrt(sum(D^2) / (N - 1)).
* EDRN: the DRN of the trajectory condensed to 16 nodes (terminal nodes plus
  the 14 stored nodes nearest to evenly spaced target times), making scores
  comparable across temporal resolutions.

Sample validity is judged first; invalid samples are excluded from metric
means and counted in the reported rejection rate.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import lambert
from .accel import maybe_njit, prange
from .constants import AU, DAY, MU_SUN, POS_SCALE, VEL_SCALE
from .twobody import Trajectory, _propagate_kernel

METRIC_TOL = 1e-12
TOF_DAYS_RANGE = (60.0, 400.0)   # 2x the training band
RADIUS_AU_RANGE = (0.3, 4.0)
CONDENSED_NODES = 16


class MetricFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class Validity:
    valid: bool
    reason: str = ""


@dataclass
class DefectReport:
    defects: np.ndarray      # [N-1, 4] scaled (dx, dy, dvx, dvy)
    drn: float
    valid: bool = True
    reason: str = ""


@dataclass(frozen=True)
class LambertComparison:
    dv_i: float              # |v_model(t0) - v_lambert,1| / 30 km/s
    dv_f: float


def validate_sample(traj: Trajectory) -> Validity:
    """Physical sanity gate for decoded samples."""
    t = traj.t
    states = traj.states
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(states))):
        return Validity(False, "non-finite values")
    if t.shape[0] < 2 or np.any(np.diff(t) <= 0):
        return Validity(False, "time row not strictly increasing")
    tof_days = t[-1] / DAY
    if not TOF_DAYS_RANGE[0] <= tof_days <= TOF_DAYS_RANGE[1]:
        return Validity(False, f"TOF {tof_days:.1f} d outside "
                               f"{TOF_DAYS_RANGE} d")
    radii = np.hypot(states[:, 0], states[:, 1]) / AU
    if np.any(radii < RADIUS_AU_RANGE[0]) or np.any(radii > RADIUS_AU_RANGE[1]):
        return Validity(False, "heliocentric distance outside "
                               f"{RADIUS_AU_RANGE} AU")
    return Validity(True)


def lambert_compare(traj: Trajectory, mu: float = MU_SUN) -> LambertComparison:
    """Scaled velocity differences against the Lambert solution through the
    sample's first/last positions and TOF."""
    t = traj.t
    try:
        sol = lambert.solve(lambert.LambertProblem(
            r1=traj.states[0, :2], r2=traj.states[-1, :2],
            tof=float(t[-1]), mu=mu))
    except lambert.LambertError as exc:
        raise MetricFailure(f"lambert comparison: {exc}") from exc
    dv_i = float(np.hypot(*(traj.states[0, 2:] - sol.v1))) / VEL_SCALE
    dv_f = float(np.hypot(*(traj.states[-1, 2:] - sol.v2))) / VEL_SCALE
    return LambertComparison(dv_i=dv_i, dv_f=dv_f)


@maybe_njit(cache=True)
def _defects_one(t, states, mu, tol, pos_scale, vel_scale):
    nseg = t.shape[0] - 1
    out = np.zeros((nseg, 4))
    for i in range(nseg):
        half = 0.5 * (t[i + 1] - t[i])
        fwd, st1 = _propagate_kernel(states[i], half, mu, tol, tol)
        bwd, st2 = _propagate_kernel(states[i + 1], -half, mu, tol, tol)
        if st1 != 0 or st2 != 0:
            return out, i + 1
        out[i, 0] = (fwd[0] - bwd[0]) / pos_scale
        out[i, 1] = (fwd[1] - bwd[1]) / pos_scale
        out[i, 2] = (fwd[2] - bwd[2]) / vel_scale
        out[i, 3] = (fwd[3] - bwd[3]) / vel_scale
    return out, 0


@maybe_njit(cache=True, parallel=True)
def _defects_batch(ts, states, mu, tol, pos_scale, vel_scale):
    count = ts.shape[0]
    nseg = ts.shape[1] - 1
    out = np.zeros((count, nseg, 4))
    status = np.zeros(count, dtype=np.int64)
    for p in prange(count):
        d, st = _defects_one(ts[p], states[p], mu, tol, pos_scale, vel_scale)
        out[p] = d
        status[p] = st
    return out, status


def _rms(defects: np.ndarray) -> float:
    nseg = defects.shape[0]
    return float(np.sqrt((defects.astype(np.float64) ** 2).sum() / nseg))


def drn(traj: Trajectory, tol: float = METRIC_TOL,
        mu: float = MU_SUN) -> DefectReport:
    """Midpoint-defect report; raises MetricFailure on propagation failure."""
    if traj.n < 2:
        raise ValueError("need at least 2 nodes")
    defects, status = _defects_one(traj.t, traj.states, mu, tol,
                                   POS_SCALE, VEL_SCALE)
    if status != 0:
        raise MetricFailure(f"propagation failed on segment {status - 1}")
    return DefectReport(defects=defects, drn=_rms(defects))


def condense_indices(t: np.ndarray, n_out: int = CONDENSED_NODES) -> np.ndarray:
    """Terminal nodes plus the stored nodes nearest to n_out - 2 evenly
    spaced target times; ties toward the earlier node, duplicates forbidden."""
    n = t.shape[0]
    if n < n_out:
        raise ValueError(f"need at least {n_out} nodes, got {n}")
    if n == n_out:
        return np.arange(n)
    targets = t[0] + (t[-1] - t[0]) * np.arange(1, n_out - 1) / (n_out - 1)
    interior = np.arange(1, n - 1)
    chosen = []
    used = set()
    for target in targets:
        dist = np.abs(t[interior] - target)
        for j in np.lexsort((interior, dist)):
            idx = interior[j]
            if idx not in used:
                used.add(idx)
                chosen.append(idx)
                break
    return np.array(sorted([0] + chosen + [n - 1]))


def edrn(traj: Trajectory, tol: float = METRIC_TOL,
         mu: float = MU_SUN) -> DefectReport:
    """DRN of the 16-node condensation (identity when N == 16)."""
    idx = condense_indices(traj.t)
    sub = Trajectory(t=traj.t[idx], states=traj.states[idx])
    return drn(sub, tol=tol, mu=mu)


def per_node_defect_stats(reports) -> dict:
    """Mean and sigma of |defect| per midpoint index and component, across a
    batch of equal-resolution reports."""
    if not reports:
        raise ValueError("empty batch")
    nseg = reports[0].defects.shape[0]
    if any(r.defects.shape[0] != nseg for r in reports):
        raise ValueError("mixed resolutions in one batch")
    stack = np.abs(np.stack([r.defects for r in reports]))
    return {"mean": stack.mean(axis=0), "std": stack.std(axis=0),
            "count": len(reports)}


@dataclass
class EvalSummary:
    total: int
    valid: int
    rejected: int
    lambert_failures: int
    defect_failures: int
    metrics: dict            # name -> {"mean": float, "std": float, "count": int}
    per_sample: list         # dict rows
    node_stats: dict | None  # per_node_defect_stats output
    rejection_reasons: dict

    @property
    def rejection_rate(self) -> float:
        return self.rejected / self.total if self.total else 0.0


def _mean_std(values) -> dict:
    arr = np.asarray([v for v in values if np.isfinite(v)], dtype=np.float64)
    if arr.size == 0:
        return {"mean": float("nan"), "std": float("nan"), "count": 0}
    return {"mean": float(arr.mean()), "std": float(arr.std()),
            "count": int(arr.size)}


def evaluate_batch(trajectories, tol: float = METRIC_TOL,
                   mu: float = MU_SUN, with_edrn: bool = None) -> EvalSummary:
    """Run validity, Lambert comparison, DRN, and EDRN over decoded samples.

    Metric means are over valid samples whose metric evaluation succeeded;
    failures are counted, never silently dropped.  Inputs are not mutated.
    """
    total = len(trajectories)
    rows = []
    reasons = {}
    reports = []
    lambert_failures = 0
    defect_failures = 0

    valid_idx = []
    for i, traj in enumerate(trajectories):
        v = validate_sample(traj)
        rows.append({"index": i, "valid": v.valid, "reason": v.reason,
                     "dv_i": float("nan"), "dv_f": float("nan"),
                     "drn": float("nan"), "edrn": float("nan")})
        if v.valid:
            valid_idx.append(i)
        else:
            reasons[v.reason] = reasons.get(v.reason, 0) + 1

    if with_edrn is None:
        with_edrn = all(trajectories[i].n >= CONDENSED_NODES
                        for i in valid_idx)

    # defects in one parallel batch when resolutions agree
    if valid_idx:
        ns = {trajectories[i].n for i in valid_idx}
        if len(ns) == 1:
            ts = np.stack([trajectories[i].t for i in valid_idx])
            sts = np.stack([trajectories[i].states for i in valid_idx])
            defects, status = _defects_batch(ts, sts, mu, tol,
                                             POS_SCALE, VEL_SCALE)
        else:
            defects = status = None

    for k, i in enumerate(valid_idx):
        traj = trajectories[i]
        row = rows[i]
        try:
            cmp_ = lambert_compare(traj, mu=mu)
            row["dv_i"], row["dv_f"] = cmp_.dv_i, cmp_.dv_f
        except MetricFailure:
            lambert_failures += 1
        try:
            if defects is not None:
                if status[k] != 0:
                    raise MetricFailure(
                        f"propagation failed on segment {int(status[k]) - 1}")
                rep = DefectReport(defects=defects[k], drn=_rms(defects[k]))
            else:
                rep = drn(traj, tol=tol, mu=mu)
            row["drn"] = rep.drn
            reports.append(rep)
            if with_edrn:
                row["edrn"] = edrn(traj, tol=tol, mu=mu).drn
        except MetricFailure:
            defect_failures += 1

    metrics = {name: _mean_std(r[name] for r in rows)
               for name in ("dv_i", "dv_f", "drn", "edrn")}
    node_stats = per_node_defect_stats(reports) if reports else None
    return EvalSummary(total=total, valid=len(valid_idx),
                       rejected=total - len(valid_idx),
                       lambert_failures=lambert_failures,
                       defect_failures=defect_failures, metrics=metrics,
                       per_sample=rows, node_stats=node_stats,
                       rejection_reasons=reasons)


def position_histograms(train_blocks: np.ndarray, gen_trajs,
                        bins: int = 100) -> dict:
    """x/y position histograms (AU) with bin edges shared between the
    training and generated populations."""
    tx = train_blocks[:, 1].ravel().astype(np.float64) / AU
    ty = train_blocks[:, 2].ravel().astype(np.float64) / AU
    gx = np.concatenate([t.states[:, 0] for t in gen_trajs]) / AU
    gy = np.concatenate([t.states[:, 1] for t in gen_trajs]) / AU
    out = {}
    for axis, train_v, gen_v in (("x", tx, gx), ("y", ty, gy)):
        lo = min(train_v.min(), gen_v.min())
        hi = max(train_v.max(), gen_v.max())
        edges = np.linspace(lo, hi, bins + 1)
        out[axis] = {"edges": edges,
                     "train": np.histogram(train_v, bins=edges)[0],
                     "generated": np.histogram(gen_v, bins=edges)[0]}
    return out


def tv_distance(counts_p: np.ndarray, counts_q: np.ndarray) -> float:
    """Total variation distance between two normalized histograms."""
    p = counts_p / max(counts_p.sum(), 1)
    q = counts_q / max(counts_q.sum(), 1)
    return 0.5 * float(np.abs(p - q).sum())


def write_report(directory, summary: EvalSummary, histograms: dict,
                 provenance: dict) -> dict:
    """Emit report.json plus per-sample, per-node, and histogram CSVs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    report = {
        "kind": "evaluation",
        "counts": {
            "total": summary.total,
            "valid": summary.valid,
            "rejected": summary.rejected,
            "lambert_failures": summary.lambert_failures,
            "defect_failures": summary.defect_failures,
        },
        "rejection_rate": summary.rejection_rate,
        "rejection_reasons": summary.rejection_reasons,
        "metrics": summary.metrics,
        "provenance": provenance,
    }
    with open(directory / "report.json", "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")

    with open(directory / "per_sample.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["index", "valid", "reason",
                                                "dv_i", "dv_f", "drn", "edrn"])
        writer.writeheader()
        writer.writerows(summary.per_sample)

    if summary.node_stats is not None:
        comp = ("dx", "dy", "dvx", "dvy")
        with open(directory / "node_defects.csv", "w") as fh:
            fh.write("midpoint," + ",".join(f"mean_{c}" for c in comp) + ","
                     + ",".join(f"std_{c}" for c in comp) + "\n")
            mean = summary.node_stats["mean"]
            std = summary.node_stats["std"]
            for i in range(mean.shape[0]):
                vals = [*mean[i], *std[i]]
                fh.write(f"{i}," + ",".join(repr(float(v)) for v in vals) + "\n")

    for axis in ("x", "y"):
        h = histograms[axis]
        with open(directory / f"hist_{axis}.csv", "w") as fh:
            fh.write("bin_left,bin_right,train,generated\n")
            for i in range(len(h["train"])):
                fh.write(f"{h['edges'][i]!r},{h['edges'][i + 1]!r},"
                         f"{int(h['train'][i])},{int(h['generated'][i])}\n")
    return report
