"""Earth-Mars transfer dataset: grid construction, encoding, persistence.

A dataset directory holds ``manifest.json`` (config, row stats, split
indices, provenance hash) and ``data.bin``: the [M, 5, n] float32 trajectory
blocks in physical units (rows t, x, y, vx, vy), followed by float64 launch
epochs [M] and float64 times of flight [M] (seconds).  Min-max scaling onto
[0, 1] happens at load time; files stay integrator-auditable.
"""

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import lambert
from .constants import AU, DAY
from .ephemeris import planet_states
from .ioutil import (content_hash, float_list, int_list, read_manifest,
                     write_manifest)
from .twobody import Trajectory, node_times, sample_trajectories

FORMAT_VERSION = 1
ROUND_TRIP_TOL_AU = 1e-6
ROW_NAMES = ("t", "x", "y", "vx", "vy")

# launch window 2005-01-01 .. 2006-01-01 (12:00 TT), days since J2000
DEFAULT_LAUNCH_START = 1827.0
DEFAULT_LAUNCH_END = 2192.0


@dataclass(frozen=True)
class GridConfig:
    launch_start: float = DEFAULT_LAUNCH_START  # mjd2000
    launch_end: float = DEFAULT_LAUNCH_END      # mjd2000, inclusive
    launch_step: float = 1.0                    # days
    tof_min: float = 120.0                      # days
    tof_max: float = 270.0                      # days, inclusive
    tof_step: float = 2.0                       # days
    exclusion: tuple = (175.0, 185.0)           # open angle band, degrees
    resolution: int = 64                        # nodes per trajectory
    seed: int = 2005

    def __post_init__(self):
        if not self.launch_start < self.launch_end:
            raise ValueError("launch_start must precede launch_end")
        if not (self.tof_min < self.tof_max and self.tof_step > 0):
            raise ValueError("invalid tof range")
        if self.resolution < 2:
            raise ValueError("resolution must be >= 2")

    def launch_epochs(self) -> np.ndarray:
        k = int(np.floor((self.launch_end - self.launch_start)
                         / self.launch_step + 1e-9)) + 1
        return self.launch_start + np.arange(k) * self.launch_step

    def tof_days(self) -> np.ndarray:
        k = int(np.floor((self.tof_max - self.tof_min) / self.tof_step + 1e-9)) + 1
        return self.tof_min + np.arange(k) * self.tof_step


@dataclass(frozen=True)
class RowStats:
    """Dataset-wide per-row extrema of (t, x, y, vx, vy), physical units."""

    mins: np.ndarray  # [5] float32
    maxs: np.ndarray  # [5] float32

    def __post_init__(self):
        if np.any(self.mins >= self.maxs):
            raise ValueError("degenerate row stats (min >= max)")

    def to_json(self) -> dict:
        return {"mins": float_list(self.mins), "maxs": float_list(self.maxs)}

    @classmethod
    def from_json(cls, obj) -> "RowStats":
        return cls(mins=np.asarray(obj["mins"], dtype=np.float32),
                   maxs=np.asarray(obj["maxs"], dtype=np.float32))


@dataclass
class Grid:
    """Accepted Lambert problems of a launch/TOF grid, launch-major order."""

    epochs: np.ndarray       # [K] launch epoch, mjd2000
    tof_days: np.ndarray     # [K]
    r1: np.ndarray           # [K, 2] Earth at launch, m
    r2: np.ndarray           # [K, 2] Mars at arrival, m
    theta: np.ndarray        # [K] transfer angle, deg
    grid_index: np.ndarray   # [K] index into the full candidate enumeration
    n_candidates: int
    n_excluded: int

    def problems(self):
        for i in range(self.epochs.shape[0]):
            yield lambert.LambertProblem(r1=self.r1[i], r2=self.r2[i],
                                         tof=self.tof_days[i] * DAY)


def build_grid(config: GridConfig) -> Grid:
    """Enumerate (launch, TOF) candidates and apply the transfer-angle rule.

    Candidates with prograde transfer angle strictly inside the exclusion
    band are dropped; ordering is launch-major, TOF-minor.
    """
    launches = config.launch_epochs()
    tofs = config.tof_days()
    ll = np.repeat(launches, tofs.shape[0])
    tt = np.tile(tofs, launches.shape[0])

    r1 = planet_states("earth", ll)[:, :2]
    r2 = planet_states("mars", ll + tt)[:, :2]
    ang = (np.degrees(np.arctan2(r2[:, 1], r2[:, 0])
                      - np.arctan2(r1[:, 1], r1[:, 0]))) % 360.0

    lo, hi = config.exclusion
    keep = ~((ang > lo) & (ang < hi))
    idx = np.flatnonzero(keep)
    return Grid(epochs=ll[idx], tof_days=tt[idx], r1=r1[idx], r2=r2[idx],
                theta=ang[idx], grid_index=idx,
                n_candidates=ll.shape[0], n_excluded=int((~keep).sum()))


@dataclass
class Dataset:
    config: GridConfig
    blocks: np.ndarray        # [M, 5, n] float32, physical units
    epochs: np.ndarray        # [M] float64 launch epochs, mjd2000
    tofs: np.ndarray          # [M] float64 time of flight, s
    grid_index: np.ndarray    # [M] int64
    stats: RowStats
    train_idx: np.ndarray     # indices into blocks
    val_idx: np.ndarray
    n_candidates: int
    n_excluded: int
    failures: list = field(default_factory=list)
    max_round_trip_au: float = 0.0

    @property
    def count(self) -> int:
        return self.blocks.shape[0]

    @property
    def resolution(self) -> int:
        return self.blocks.shape[2]

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory.from_block(self.blocks[i])

    def images(self, indices=None) -> np.ndarray:
        """Min-max scaled [*, 1, 6, n] float32 images for training."""
        blocks = self.blocks if indices is None else self.blocks[indices]
        return encode_blocks(blocks, self.stats)


def build_dataset(config: GridConfig) -> Dataset:
    """Solve, propagate, and package the full grid at the configured resolution.

    Solver or propagation failures (including round-trip residuals beyond
    1e-6 AU) are recorded with their grid indices and dropped, never silently.
    """
    grid = build_grid(config)
    tof_s = grid.tof_days * DAY

    vel, solve_status = lambert.solve_batch(grid.r1, grid.r2, tof_s)
    states0 = np.hstack([grid.r1, vel[:, :2]])
    nodes, prop_status = sample_trajectories(states0, tof_s, config.resolution)

    resid = np.hypot(nodes[:, -1, 0] - grid.r2[:, 0],
                     nodes[:, -1, 1] - grid.r2[:, 1]) / AU
    ok = (solve_status == 0) & (prop_status == 0) & (resid <= ROUND_TRIP_TOL_AU)

    failures = []
    for i in np.flatnonzero(~ok):
        if solve_status[i] != 0:
            reason = "lambert: " + lambert._STATUS_MSG[int(solve_status[i])]
        elif prop_status[i] != 0:
            reason = "propagation failure"
        else:
            reason = f"round-trip residual {resid[i]:.3e} AU"
        failures.append({"grid_index": int(grid.grid_index[i]),
                         "launch_mjd2000": float(grid.epochs[i]),
                         "tof_days": float(grid.tof_days[i]),
                         "reason": reason})

    keep = np.flatnonzero(ok)
    m = keep.shape[0]
    n = config.resolution
    blocks = np.empty((m, 5, n), dtype=np.float32)
    for j, i in enumerate(keep):
        blocks[j, 0] = node_times(tof_s[i], n)
        blocks[j, 1:] = nodes[i].T

    mins = blocks.min(axis=(0, 2))
    maxs = blocks.max(axis=(0, 2))
    stats = RowStats(mins=mins, maxs=maxs)

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(m)
    n_train = int(np.ceil(0.9 * m))

    return Dataset(config=config, blocks=blocks, epochs=grid.epochs[keep],
                   tofs=tof_s[keep], grid_index=grid.grid_index[keep],
                   stats=stats, train_idx=np.sort(perm[:n_train]),
                   val_idx=np.sort(perm[n_train:]),
                   n_candidates=grid.n_candidates, n_excluded=grid.n_excluded,
                   failures=failures,
                   max_round_trip_au=float(resid[keep].max()) if m else 0.0)


def encode(traj: Trajectory, stats: RowStats) -> np.ndarray:
    """[1, 6, n] unit-interval image of a trajectory: five scaled rows plus
    one row of padding zeros."""
    return encode_blocks(traj.block()[None].astype(np.float32), stats)[0]


def encode_blocks(blocks: np.ndarray, stats: RowStats) -> np.ndarray:
    blocks = np.asarray(blocks, dtype=np.float32)
    mins = stats.mins[:, None]
    span = (stats.maxs - stats.mins)[:, None]
    scaled = (blocks - mins) / span
    m, _, n = blocks.shape
    out = np.zeros((m, 1, 6, n), dtype=np.float32)
    out[:, 0, :5] = scaled
    return out


def decode(img: np.ndarray, stats: RowStats) -> Trajectory:
    """Inverse of encode.  Does not validate time monotonicity; generated
    images decode as-is and the evaluator judges validity."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 1 or img.shape[1] != 6:
        raise ValueError(f"expected [1, 6, n] image, got {img.shape}")
    rows = img[0, :5].astype(np.float64)
    span = (stats.maxs - stats.mins).astype(np.float64)[:, None]
    mins = stats.mins.astype(np.float64)[:, None]
    block = rows * span + mins
    return Trajectory.from_block(block)


def save_dataset(ds: Dataset, directory) -> str:
    """Persist a dataset directory; returns its content hash."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    blob = (ds.blocks.astype("<f4").tobytes()
            + ds.epochs.astype("<f8").tobytes()
            + ds.tofs.astype("<f8").tobytes())
    with open(directory / "data.bin", "wb") as fh:
        fh.write(blob)

    hashed = {
        "format_version": FORMAT_VERSION,
        "kind": "dataset",
        "config": asdict(ds.config),
        "count": ds.count,
        "candidates": ds.n_candidates,
        "excluded": ds.n_excluded,
        "failures": ds.failures,
        "row_stats": ds.stats.to_json(),
        "split": {"train": int_list(ds.train_idx), "val": int_list(ds.val_idx)},
        "grid_indices": int_list(ds.grid_index),
        "max_round_trip_au": ds.max_round_trip_au,
        "data": {
            "blocks": {"dtype": "<f4", "shape": [ds.count, 5, ds.resolution]},
            "epochs": {"dtype": "<f8", "shape": [ds.count]},
            "tofs": {"dtype": "<f8", "shape": [ds.count]},
            "layout": "blocks, then epochs, then tofs, contiguous",
        },
    }
    manifest = dict(hashed)
    manifest["content_hash"] = content_hash(hashed, blob)
    write_manifest(directory, manifest)
    return manifest["content_hash"]


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = read_manifest(directory)
    if manifest["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format_version "
                         f"{manifest['format_version']}")
    cfg_raw = dict(manifest["config"])
    cfg_raw["exclusion"] = tuple(cfg_raw["exclusion"])
    config = GridConfig(**cfg_raw)

    m = manifest["count"]
    n = config.resolution
    raw = np.fromfile(directory / "data.bin", dtype=np.uint8)
    n_block = m * 5 * n * 4
    blocks = raw[:n_block].view("<f4").reshape(m, 5, n).copy()
    epochs = raw[n_block:n_block + m * 8].view("<f8").copy()
    tofs = raw[n_block + m * 8:n_block + 2 * m * 8].view("<f8").copy()

    return Dataset(
        config=config, blocks=blocks, epochs=epochs, tofs=tofs,
        grid_index=np.asarray(manifest["grid_indices"], dtype=np.int64),
        stats=RowStats.from_json(manifest["row_stats"]),
        train_idx=np.asarray(manifest["split"]["train"], dtype=np.int64),
        val_idx=np.asarray(manifest["split"]["val"], dtype=np.int64),
        n_candidates=manifest["candidates"], n_excluded=manifest["excluded"],
        failures=manifest["failures"],
        max_round_trip_au=manifest["max_round_trip_au"])
