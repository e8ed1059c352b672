"""Annealed Langevin dynamics sampling from a trained score model.

Chains start elementwise uniform on (0, 1), sweep the noise ladder from
sigma_1 down to sigma_L running T inner updates

    x <- x + alpha_i * s(x, sigma_i) + sqrt(2 * alpha_i) * z,
    alpha_i = epsilon * sigma_i^2 / sigma_L^2,

and close with the one-step denoise x <- x + sigma_L^2 * s(x, sigma_L).
Outputs are never clamped; validity is the evaluator's call.

The score function is injected, so any callable with the right shape works
(this is what enables the analytic-score oracle tests).  Each chain consumes
its own seeded RNG stream: results depend only on the chain's seed, never on
batching, and permuting chain seeds permutes outputs.
"""

import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .ioutil import content_hash, read_manifest, write_manifest
from .training import NoiseSchedule

SAMPLES_FORMAT_VERSION = 1


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    epsilon: float = 2e-6        # base step size
    steps_per_level: int = 5     # inner updates per noise level
    seed: int = 11
    batch: int = 250             # chains advanced together

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.steps_per_level < 1 or self.batch < 1:
            raise ValueError("steps_per_level and batch must be >= 1")


def step_sizes(schedule: NoiseSchedule, epsilon: float) -> np.ndarray:
    """alpha_i = epsilon * sigma_i^2 / sigma_L^2 (so alpha_L = epsilon)."""
    sigmas = schedule.sigmas
    return epsilon * sigmas**2 / sigmas[-1] ** 2


def net_score_fn(net, params):
    return lambda x, sigma: net.forward(params, x, sigma)


def denoise_final(x: np.ndarray, score_fn, schedule: NoiseSchedule) -> np.ndarray:
    """One-step correction at the smallest noise level (applied exactly once
    by the sampler)."""
    sigma_last = schedule.sigmas[-1]
    return x + np.float32(sigma_last**2) * score_fn(x, sigma_last)


def _advance_chains(x, rngs, score_fn, schedule, config, alive):
    """Run the full anneal in place; marks chains dead on non-finite states.

    Each chain consumes only its own RNG stream (one uniform init plus one
    noise block per level), so results are independent of batch grouping.
    """
    sigmas = schedule.sigmas
    alphas = step_sizes(schedule, config.epsilon)
    steps = config.steps_per_level
    fail_at = {}
    for i, sigma in enumerate(sigmas):
        alpha = np.float32(alphas[i])
        noise_scale = np.float32(np.sqrt(2.0 * alphas[i]))
        z_level = np.stack([rng.standard_normal((steps,) + x.shape[1:],
                                                dtype=np.float32)
                            for rng in rngs])
        for t in range(steps):
            score = score_fn(x, sigma)
            x[alive] += alpha * score[alive] + noise_scale * z_level[alive, t]
            bad = ~np.isfinite(x.reshape(x.shape[0], -1)).all(axis=1)
            for c in np.flatnonzero(bad & alive):
                alive[c] = False
                fail_at[c] = (i, t)
    if alive.any():
        x[alive] = denoise_final(x[alive], score_fn, schedule)
    return fail_at


def anneal_sample(score_fn, schedule: NoiseSchedule, config: SamplerConfig,
                  shape, rng: np.random.Generator = None) -> np.ndarray:
    """One chain: uniform init, full anneal, final denoise."""
    rng = rng or np.random.default_rng(config.seed)
    x = rng.random((1,) + tuple(shape), dtype=np.float32)
    alive = np.array([True])
    fails = _advance_chains(x, [rng], score_fn, schedule, config, alive)
    if fails:
        level, step = fails[0]
        raise SamplingError(f"non-finite state at level {level}, step {step}")
    return x[0]


def chain_seed_sequences(seed: int, count: int):
    return [np.random.SeedSequence((seed, 100 + i)) for i in range(count)]


def sample_batch(score_fn, schedule: NoiseSchedule, config: SamplerConfig,
                 shape, count: int, chain_seeds=None, quiet: bool = True):
    """Independent chains in batches; returns (samples, report).

    ``samples`` is [count, *shape] float32; ``report`` carries per-chain
    failures (level/step indices) and wall-clock: amortized seconds per
    sample plus one solo-chain measurement.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if chain_seeds is None:
        chain_seeds = chain_seed_sequences(config.seed, count)
    if len(chain_seeds) != count:
        raise ValueError("need one seed per chain")

    samples = np.empty((count,) + tuple(shape), dtype=np.float32)
    failures = []
    t0 = time.time()
    for lo in range(0, count, config.batch):
        hi = min(lo + config.batch, count)
        rngs = [np.random.default_rng(s) for s in chain_seeds[lo:hi]]
        x = np.stack([rng.random(shape, dtype=np.float32) for rng in rngs])
        alive = np.ones(hi - lo, dtype=bool)
        fail_at = _advance_chains(x, rngs, score_fn, schedule, config, alive)
        samples[lo:hi] = x
        failures.extend({"chain": lo + c, "level": lv, "step": st}
                        for c, (lv, st) in sorted(fail_at.items()))
        if not quiet:
            print(f"sampled {hi}/{count}")
    amortized = (time.time() - t0) / count

    t0 = time.time()
    anneal_sample(score_fn, schedule, config, shape,
                  np.random.default_rng(chain_seeds[0]))
    per_chain = time.time() - t0

    report = {"failures": failures, "amortized_s": amortized,
              "per_chain_s": per_chain}
    return samples, report


def save_samples(directory, samples: np.ndarray, config: SamplerConfig,
                 schedule: NoiseSchedule, checkpoint_hash: str,
                 report: dict, extra_hashed: dict = None) -> str:
    """Persist a sample set; tensor format matches dataset blocks.

    Timing goes in the manifest but outside the hashed subset, so reruns with
    the same seeds reproduce the content hash bit-identically.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = np.ascontiguousarray(samples, dtype="<f4").tobytes()
    with open(directory / "samples.bin", "wb") as fh:
        fh.write(blob)
    hashed = {
        "format_version": SAMPLES_FORMAT_VERSION,
        "kind": "samples",
        "sampler": asdict(config),
        "schedule": schedule.to_json(),
        "checkpoint_hash": checkpoint_hash,
        "count": int(samples.shape[0]),
        "shape": list(samples.shape[1:]),
        "failures": report["failures"],
        **(extra_hashed or {}),
    }
    manifest = dict(hashed)
    manifest["content_hash"] = content_hash(hashed, blob)
    manifest["timing"] = {"amortized_s": report["amortized_s"],
                          "per_chain_s": report["per_chain_s"]}
    write_manifest(directory, manifest)
    return manifest["content_hash"]


def load_samples(directory):
    directory = Path(directory)
    manifest = read_manifest(directory)
    if manifest["format_version"] != SAMPLES_FORMAT_VERSION:
        raise ValueError("unsupported samples format_version "
                         f"{manifest['format_version']}")
    shape = [manifest["count"]] + manifest["shape"]
    samples = np.fromfile(directory / "samples.bin",
                          dtype="<f4").reshape(shape)
    return samples, manifest
