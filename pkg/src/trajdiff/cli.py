"""Command-line pipeline: gen-data, train, sample, eval, report.

Configuration is a JSON file (see ``default_config``); flags override file
values.  Every artifact directory carries a manifest with the upstream
content hashes, so a report can be traced back to the exact dataset,
checkpoint, and samples that produced it.  ``TRAJDIFF_WORKERS`` caps kernel
threads; commands take a lock file in their output directory.
"""

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import evalmetrics, sampler, training
from .accel import set_workers_from_env
from .ioutil import WorkdirLock, read_manifest
from .scorenet import NetworkConfig, PRESETS, ScoreNet, count_params

CONFIG_FORMAT_VERSION = 1

DEFAULT_THRESHOLDS = {
    "rejection_rate": 0.20,
    "drn_mean": 3e-2,
    "dv_i_mean": 3e-2,
    "dv_f_mean": 3e-2,
}


def default_config() -> dict:
    return {
        "format_version": CONFIG_FORMAT_VERSION,
        "resolution": 64,
        "grid": asdict(ds.GridConfig()),
        "network": {"preset": "S3", "depth": 2},
        "train": asdict(training.TrainOpts()),
        "sampler": {**asdict(sampler.SamplerConfig()), "count": 1000},
        "report_thresholds": dict(DEFAULT_THRESHOLDS),
    }


def load_config(path) -> dict:
    cfg = default_config()
    if path:
        with open(path) as fh:
            user = json.load(fh)
        if user.get("format_version", CONFIG_FORMAT_VERSION) != CONFIG_FORMAT_VERSION:
            raise SystemExit(f"unsupported config format_version in {path}")
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(value)
            else:
                cfg[key] = value
    return cfg


def _grid_config(cfg: dict) -> ds.GridConfig:
    raw = dict(cfg["grid"])
    raw["exclusion"] = tuple(raw["exclusion"])
    raw["resolution"] = cfg["resolution"]
    return ds.GridConfig(**raw)


def _network_config(cfg: dict, n: int) -> NetworkConfig:
    net = dict(cfg["network"])
    preset = net.pop("preset", None)
    net.pop("n", None)
    if preset:
        net.setdefault("base_width", PRESETS[preset])
    return NetworkConfig(n=n, **net)


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if args.resolution:
        cfg["resolution"] = args.resolution
    if args.seed is not None:
        cfg["grid"]["seed"] = args.seed
    grid_cfg = _grid_config(cfg)

    out = Path(args.out)
    with WorkdirLock(out):
        t0 = time.time()
        built = ds.build_dataset(grid_cfg)
        digest = ds.save_dataset(built, out)
        wall = time.time() - t0
    print(f"candidates      {built.n_candidates}")
    print(f"excluded        {built.n_excluded}")
    print(f"failures        {len(built.failures)}")
    print(f"final count     {built.count}")
    print(f"train/val       {len(built.train_idx)}/{len(built.val_idx)}")
    print(f"wall clock      {wall:.1f} s")
    print(f"content hash    {digest}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.preset:
        cfg["network"]["preset"] = args.preset
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed

    data = ds.load_dataset(args.dataset)
    dataset_hash = read_manifest(args.dataset)["content_hash"]
    if args.resolution and args.resolution != data.resolution:
        raise SystemExit(f"resolution mismatch: dataset has n={data.resolution}, "
                         f"--resolution asked for n={args.resolution}")
    if cfg["resolution"] != data.resolution:
        raise SystemExit(f"resolution mismatch: dataset has n={data.resolution}, "
                         f"config expects n={cfg['resolution']}")

    net_cfg = _network_config(cfg, data.resolution)
    net = ScoreNet(net_cfg)
    opts = training.TrainOpts(**cfg["train"])

    out = Path(args.out)
    with WorkdirLock(out):
        out.mkdir(parents=True, exist_ok=True)
        ckpts = sorted(out.glob("ckpt_*"))
        if ckpts:
            net, schedule, _, params, _, adam, manifest = \
                training.load_checkpoint(ckpts[-1])
            start = manifest["step"]
            print(f"resuming from {ckpts[-1]} at step {start}")
        else:
            schedule = training.make_schedule(
                data.images(data.train_idx), count=opts.sigma_levels,
                sigma_min=opts.sigma_min, seed=opts.seed)
            params = net.init_params(opts.seed)
            adam = None
            start = 0
        print(f"network {net_cfg.base_width}w x depth {net_cfg.depth}, "
              f"{count_params(net_cfg)} parameters; "
              f"sigma [{schedule.sigma_min}, {schedule.sigma_max:.4f}] "
              f"x{schedule.count}")
        t0 = time.time()
        training.train(net, params, data, schedule, opts, out_dir=out,
                       adam=adam, start_step=start, dataset_hash=dataset_hash)
        print(f"trained to step {opts.steps} in {time.time() - t0:.0f} s")
    final = sorted(out.glob("ckpt_*"))[-1]
    print(f"checkpoint      {final}")
    print(f"content hash    {read_manifest(final)['content_hash']}")
    return 0


def cmd_sample(args) -> int:
    net, schedule, stats, params, ema, _, manifest = \
        training.load_checkpoint(args.checkpoint)
    count = args.count or 1000
    samp_cfg_fields = {k: v for k, v in load_config(args.config)["sampler"].items()
                       if k != "count"}
    if args.seed is not None:
        samp_cfg_fields["seed"] = args.seed
    samp_cfg = sampler.SamplerConfig(**samp_cfg_fields)

    score_fn = sampler.net_score_fn(net, ema)
    shape = (1, net.config.rows, net.config.n)
    extra = {
        "network": manifest["network"],
        "param_count": count_params(net.config),
        "checkpoint_bytes": (Path(args.checkpoint) / "weights.bin").stat().st_size,
        "train_steps": manifest["step"],
    }
    out = Path(args.out)
    with WorkdirLock(out):
        samples, report = sampler.sample_batch(score_fn, schedule, samp_cfg,
                                               shape, count, quiet=False)
        digest = sampler.save_samples(out, samples, samp_cfg, schedule,
                                      manifest["content_hash"], report,
                                      extra_hashed=extra)
    print(f"samples         {count} ({len(report['failures'])} failed chains)")
    print(f"amortized       {report['amortized_s'] * 1e3:.1f} ms/sample")
    print(f"single chain    {report['per_chain_s'] * 1e3:.1f} ms")
    print(f"content hash    {digest}")
    return 0


def cmd_eval(args) -> int:
    samples, samp_manifest = sampler.load_samples(args.samples)
    data = ds.load_dataset(args.dataset)
    dataset_hash = read_manifest(args.dataset)["content_hash"]
    if samples.shape[-1] != data.resolution:
        raise SystemExit(f"resolution mismatch: samples n={samples.shape[-1]}, "
                         f"dataset n={data.resolution}")

    trajs = [ds.decode(img, data.stats) for img in samples]
    summary = evalmetrics.evaluate_batch(trajs)

    rng = np.random.default_rng(0)
    train_rows = rng.choice(data.train_idx, size=min(1000, len(data.train_idx)),
                            replace=False)
    valid_trajs = [t for t, row in zip(trajs, summary.per_sample)
                   if row["valid"]]
    hists = evalmetrics.position_histograms(data.blocks[np.sort(train_rows)],
                                            valid_trajs)

    provenance = {
        "dataset": dataset_hash,
        "samples": samp_manifest["content_hash"],
        "checkpoint": samp_manifest["checkpoint_hash"],
        "network": samp_manifest.get("network"),
        "param_count": samp_manifest.get("param_count"),
        "checkpoint_bytes": samp_manifest.get("checkpoint_bytes"),
        "train_steps": samp_manifest.get("train_steps"),
    }
    out = Path(args.out)
    with WorkdirLock(out):
        report = evalmetrics.write_report(out, summary, hists, provenance)
        tv = {axis: evalmetrics.tv_distance(hists[axis]["train"],
                                            hists[axis]["generated"])
              for axis in ("x", "y")}
        report["distribution"] = {"tv_x": tv["x"], "tv_y": tv["y"]}
        with open(out / "report.json", "w") as fh:
            json.dump(report, fh, sort_keys=True, indent=1)
            fh.write("\n")
    for name, m in report["metrics"].items():
        print(f"{name:>6}: mean {m['mean']:.3e}  sigma {m['std']:.3e}  "
              f"(n={m['count']})")
    print(f"rejection rate  {report['rejection_rate']:.3f}")
    print(f"tv distance     x {tv['x']:.3f}  y {tv['y']:.3f}")
    return 0


def _fmt(value, width=10):
    return f"{value:>{width}.3e}" if np.isfinite(value) else " " * (width - 3) + "n/a"


def cmd_report(args) -> int:
    cfg = load_config(args.config)
    thresholds = cfg.get("report_thresholds", DEFAULT_THRESHOLDS)

    reports = []
    for rdir in args.report_dir:
        with open(Path(rdir) / "report.json") as fh:
            reports.append((rdir, json.load(fh)))

    print(f"{'report':<24} {'dv_i':>10} {'dv_f':>10} {'drn':>10} "
          f"{'drn_sigma':>10} {'edrn':>10} {'reject':>7}")
    for rdir, rep in reports:
        m = rep["metrics"]
        print(f"{Path(rdir).name:<24} {_fmt(m['dv_i']['mean'])} "
              f"{_fmt(m['dv_f']['mean'])} {_fmt(m['drn']['mean'])} "
              f"{_fmt(m['drn']['std'])} {_fmt(m['edrn']['mean'])} "
              f"{rep['rejection_rate']:>7.3f}")

    if len(reports) > 1 or any(r.get("provenance", {}).get("param_count")
                               for _, r in reports):
        print(f"\n{'model':<24} {'params':>10} {'size (MB)':>10} "
              f"{'drn mean':>10} {'drn sigma':>10}")
        for rdir, rep in reports:
            prov = rep.get("provenance", {})
            net = prov.get("network") or {}
            count = prov.get("param_count")
            size = prov.get("checkpoint_bytes")
            label = f"w{net.get('base_width', '?')}/n{net.get('n', '?')}"
            m = rep["metrics"]["drn"]
            print(f"{label:<24} {count if count else '?':>10} "
                  f"{(size / 1e6 if size else float('nan')):>10.1f} "
                  f"{_fmt(m['mean'])} {_fmt(m['std'])}")

    print("\nprovenance:")
    for rdir, rep in reports:
        prov = rep.get("provenance", {})
        print(f"  {Path(rdir).name}: dataset {str(prov.get('dataset'))[:12]} "
              f"checkpoint {str(prov.get('checkpoint'))[:12]} "
              f"samples {str(prov.get('samples'))[:12]}")

    failed = []
    for rdir, rep in reports:
        m = rep["metrics"]
        checks = {
            "rejection_rate": rep["rejection_rate"],
            "drn_mean": m["drn"]["mean"],
            "dv_i_mean": m["dv_i"]["mean"],
            "dv_f_mean": m["dv_f"]["mean"],
        }
        for name, limit in thresholds.items():
            value = checks.get(name)
            if value is not None and not value <= limit:
                failed.append(f"{Path(rdir).name}: {name} = {value:.3e} "
                              f"> {limit:.3e}")
    if failed:
        print("\nTHRESHOLD FAILURES:")
        for line in failed:
            print(f"  {line}")
        return 1
    print("\nall thresholds passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajdiff",
        description="Ballistic Earth-Mars transfer generation with a "
                    "score-based diffusion model")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="build and persist the transfer dataset")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", type=int, choices=(16, 64, 256, 1024))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the score network")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", type=int, choices=(16, 64, 256, 1024))
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw trajectories from a checkpoint")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="run the feasibility metrics on samples")
    p.add_argument("--samples", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="print a metrics table; nonzero exit "
                                      "if thresholds are violated")
    p.add_argument("report_dir", nargs="+")
    p.add_argument("--config", help="pipeline config JSON with thresholds")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    set_workers_from_env()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
