"""Denoising score-matching training: schedule, loss, optimizer, loop.

The loss is the noise-conditional denoising objective: for each batch element
one noise level sigma is drawn uniformly from the schedule, the element is
perturbed as x_t = x + sigma * z, and the penalty is
0.5 * || sigma * s(x_t, sigma) + (x_t - x) / sigma ||^2 = 0.5 * || f(x_t) + z ||^2,
averaged over the batch (an unbiased per-level estimator of the summed
objective at 1/L the cost).
"""

import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .dataset import Dataset, RowStats
from .ioutil import content_hash, read_manifest, write_manifest
from .scorenet import NetworkConfig, ScoreNet

CHECKPOINT_FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric ladder of noise levels sigma_1 > ... > sigma_L > 0."""

    sigma_max: float
    sigma_min: float
    count: int

    def __post_init__(self):
        if not (self.sigma_max > self.sigma_min > 0):
            raise ValueError("need sigma_max > sigma_min > 0")
        if self.count < 2:
            raise ValueError("need at least 2 noise levels")

    @property
    def sigmas(self) -> np.ndarray:
        return np.geomspace(self.sigma_max, self.sigma_min, self.count)

    def to_json(self) -> dict:
        return {"sigma_max": self.sigma_max, "sigma_min": self.sigma_min,
                "count": self.count}

    @classmethod
    def from_json(cls, obj) -> "NoiseSchedule":
        return cls(sigma_max=obj["sigma_max"], sigma_min=obj["sigma_min"],
                   count=obj["count"])


def max_pairwise_distance(images: np.ndarray, limit: int = 2000,
                          seed: int = 0) -> float:
    """Max Euclidean distance over a seeded subsample of flattened images."""
    flat = np.asarray(images, dtype=np.float64).reshape(images.shape[0], -1)
    if flat.shape[0] > limit:
        idx = np.random.default_rng(seed).choice(flat.shape[0], size=limit,
                                                 replace=False)
        flat = flat[idx]
    sq = (flat * flat).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (flat @ flat.T)
    return float(np.sqrt(max(d2.max(), 0.0)))


def make_schedule(images: np.ndarray, count: int = 64,
                  sigma_min: float = 0.01, seed: int = 0) -> NoiseSchedule:
    """Schedule with sigma_1 = max pairwise training-image distance."""
    if images.shape[0] == 0:
        raise ValueError("empty data")
    sigma_max = max_pairwise_distance(images, seed=seed)
    if sigma_max <= sigma_min:
        raise ValueError("degenerate data: max pairwise distance "
                         f"{sigma_max:.3e} <= sigma_min")
    return NoiseSchedule(sigma_max=sigma_max, sigma_min=sigma_min, count=count)


def dsm_loss(net: ScoreNet, params: dict, batch: np.ndarray,
             schedule: NoiseSchedule, rng: np.random.Generator,
             want_grads: bool = False, f_fn=None):
    """Monte Carlo denoising score-matching loss on one batch.

    ``f_fn(x_t, sigma_col) -> f`` may replace the network's unconditional
    output (analytic-score tests); gradients are only available on the
    network path.
    """
    batch = np.asarray(batch, dtype=np.float32)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    b = batch.shape[0]
    sigmas = schedule.sigmas
    idx = rng.integers(0, schedule.count, size=b)
    sig = sigmas[idx].astype(np.float32).reshape(b, 1, 1, 1)
    z = rng.standard_normal(batch.shape, dtype=np.float32)
    x_t = batch + sig * z

    if f_fn is not None:
        resid = f_fn(x_t, sig) + z
        loss = 0.5 * float((resid.astype(np.float64) ** 2).sum()) / b
        return loss

    if want_grads:
        f, cache = net.raw_forward(params, x_t, want_cache=True)
    else:
        f = net.raw_forward(params, x_t)
    resid = f + z
    loss = 0.5 * float((resid.astype(np.float64) ** 2).sum()) / b
    if not want_grads:
        return loss
    grads = net.backward(params, cache, resid / np.float32(b))
    return loss, grads


class Adam:
    """Adam with bias correction; state lives in float32 like the weights."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


class Ema:
    """Exponential moving average shadow of the weights."""

    def __init__(self, params: dict, rate: float = 0.999):
        self.rate = rate
        self.shadow = {k: v.copy() for k, v in params.items()}

    def update(self, params: dict):
        r = self.rate
        for k, v in params.items():
            s = self.shadow[k]
            s *= r
            s += (1.0 - r) * v


@dataclass(frozen=True)
class TrainOpts:
    lr: float = 1e-4
    batch: int = 128
    steps: int = 20_000
    ema_rate: float = 0.999
    seed: int = 7
    checkpoint_every: int = 5_000
    sigma_levels: int = 64
    sigma_min: float = 0.01
    log_every: int = 50

    def __post_init__(self):
        for name in ("lr", "batch", "steps", "ema_rate", "seed",
                     "checkpoint_every", "sigma_levels", "sigma_min",
                     "log_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainResult:
    params: dict
    ema: dict
    history: list          # rows of (step, train_loss, val_loss or nan)
    schedule: NoiseSchedule
    steps_done: int


def _val_loss(net, params, images, schedule, seed, batch=512):
    """Validation loss with noise draws fixed across epochs (comparable)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 3)))
    total = 0.0
    for lo in range(0, images.shape[0], batch):
        chunk = images[lo:lo + batch]
        total += dsm_loss(net, params, chunk, schedule, rng) * chunk.shape[0]
    return total / images.shape[0]


def train(net: ScoreNet, params: dict, dataset: Dataset,
          schedule: NoiseSchedule, opts: TrainOpts, out_dir=None,
          adam: Adam = None, start_step: int = 0, dataset_hash: str = "",
          quiet: bool = False) -> TrainResult:
    """Run the optimizer loop; optionally persist checkpoints and loss curve.

    Deterministic for a fixed (seed, config): batch order, noise levels, and
    perturbations all derive from opts.seed.  Aborts with TrainingDiverged on
    a non-finite loss, reporting the offending step.
    """
    train_images = dataset.images(dataset.train_idx)
    val_images = dataset.images(dataset.val_idx)
    bs = min(opts.batch, train_images.shape[0])
    steps_per_epoch = max(1, train_images.shape[0] // bs)

    adam = adam or Adam(params, lr=opts.lr)
    ema = Ema(params, rate=opts.ema_rate)
    noise_rng = np.random.default_rng(np.random.SeedSequence((opts.seed, 1)))
    history = []
    order = None
    t_start = time.time()

    for step in range(start_step, opts.steps):
        pos = step % steps_per_epoch
        epoch = step // steps_per_epoch
        if pos == 0 or order is None:
            perm_rng = np.random.default_rng(
                np.random.SeedSequence((opts.seed, 2, epoch)))
            order = perm_rng.permutation(train_images.shape[0])
        batch = train_images[order[pos * bs:(pos + 1) * bs]]

        loss, grads = dsm_loss(net, params, batch, schedule, noise_rng,
                               want_grads=True)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        adam.step(params, grads)
        ema.update(params)

        end_of_epoch = pos == steps_per_epoch - 1
        if step % opts.log_every == 0 or end_of_epoch or step == opts.steps - 1:
            val = _val_loss(net, params, val_images, schedule, opts.seed) \
                if (end_of_epoch or step == opts.steps - 1) else float("nan")
            history.append((step, loss, val))
            if not quiet and (end_of_epoch or step % (opts.log_every * 20) == 0):
                rate = (step - start_step + 1) / max(time.time() - t_start, 1e-9)
                print(f"step {step:>7d}  loss {loss:10.4f}  "
                      f"val {val:10.4f}  ({rate:.1f} steps/s)")

        if out_dir and ((step + 1) % opts.checkpoint_every == 0
                        or step == opts.steps - 1):
            save_checkpoint(Path(out_dir) / f"ckpt_{step + 1:07d}", net.config,
                            schedule, dataset.stats, params, ema.shadow, adam,
                            step + 1, opts, dataset_hash)
            _write_history(Path(out_dir) / "loss_curve.csv", history)

    if out_dir:
        _write_history(Path(out_dir) / "loss_curve.csv", history)
    return TrainResult(params=params, ema=ema.shadow, history=history,
                       schedule=schedule, steps_done=opts.steps)


def _write_history(path, history):
    with open(path, "w") as fh:
        fh.write("step,train_loss,val_loss\n")
        for step, tr, val in history:
            fh.write(f"{step},{tr!r},{val!r}\n")


def read_history(path):
    rows = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            s, tr, val = line.strip().split(",")
            rows.append((int(s), float(tr), float(val)))
    return rows


def save_checkpoint(directory, config: NetworkConfig, schedule: NoiseSchedule,
                    stats: RowStats, params: dict, ema: dict, adam: Adam,
                    step: int, opts: TrainOpts, dataset_hash: str = "") -> str:
    """Self-contained checkpoint: manifest + flat float32 weight blob.

    The blob concatenates named tensors (params, EMA shadow, Adam moments) in
    the order of the manifest's tensor index; sampling and evaluation can
    load it without the training code path.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    groups = [("param", params), ("ema", ema),
              ("adam_m", adam.m), ("adam_v", adam.v)]
    index = []
    chunks = []
    offset = 0
    for group, tensors in groups:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            index.append({"name": f"{group}.{name}", "offset": offset,
                          "shape": list(arr.shape)})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
    blob = b"".join(chunks)
    with open(directory / "weights.bin", "wb") as fh:
        fh.write(blob)

    hashed = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "checkpoint",
        "network": asdict(config),
        "schedule": schedule.to_json(),
        "row_stats": stats.to_json(),
        "train_opts": asdict(opts),
        "step": step,
        "seed": opts.seed,
        "adam_t": adam.t,
        "dataset_hash": dataset_hash,
        "tensors": index,
    }
    manifest = dict(hashed)
    manifest["content_hash"] = content_hash(hashed, blob)
    write_manifest(directory, manifest)
    return manifest["content_hash"]


def load_checkpoint(directory):
    """Returns (net, schedule, stats, params, ema, adam, manifest)."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    if manifest["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ValueError("unsupported checkpoint format_version "
                         f"{manifest['format_version']}")
    blob = (directory / "weights.bin").read_bytes()

    hashed = {k: v for k, v in manifest.items() if k != "content_hash"}
    if content_hash(hashed, blob) != manifest["content_hash"]:
        raise ValueError(f"checkpoint {directory} is corrupt (hash mismatch)")

    config = NetworkConfig(**manifest["network"])
    net = ScoreNet(config)
    tensors = {"param": {}, "ema": {}, "adam_m": {}, "adam_v": {}}
    for entry in manifest["tensors"]:
        group, name = entry["name"].split(".", 1)
        size = int(np.prod(entry["shape"])) * 4
        arr = np.frombuffer(blob, dtype="<f4", count=size // 4,
                            offset=entry["offset"]).reshape(entry["shape"])
        tensors[group][name] = arr.copy()

    opts = TrainOpts(**manifest["train_opts"])
    adam = Adam(tensors["param"], lr=opts.lr)
    adam.t = manifest["adam_t"]
    adam.m = tensors["adam_m"]
    adam.v = tensors["adam_v"]
    schedule = NoiseSchedule.from_json(manifest["schedule"])
    stats = RowStats.from_json(manifest["row_stats"])
    return net, schedule, stats, tensors["param"], tensors["ema"], adam, manifest
