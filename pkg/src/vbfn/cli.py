"""Command line entry points: train, sample, verify, bench, inspect-precision.

Exit codes: 0 ok, 2 config error, 3 verify failure, 4 IO error.  The
environment variable VBFN_SEED overrides the configured seed, and every run
echoes its resolved configuration and seed into the output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline, verify
from .config import ConfigError, config_dict, parse_config, serialize_config
from .graphs import DatasetMeta, read_dataset, write_samples
from .pipeline import Checkpoint, OperatorCache
from .solver import SolverConfig, solve_spd
from .structure import (build_node_dependency_complete, build_obs_precision,
                        build_prior_precision, condition_bound, spectral_bounds)

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_IO = 0, 2, 3, 4


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="vbfn",
        description="Graph generation with structured-precision belief flows")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run the training loop")
    train.add_argument("--config", default=None)
    train.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--out", default=None, help="output directory")
    train.add_argument("--resume", default=None, help="checkpoint to resume")

    sample = sub.add_parser("sample", help="generate graphs from a checkpoint")
    sample.add_argument("--checkpoint", required=True)
    sample.add_argument("--count", type=int, required=True)
    sample.add_argument("--steps", type=int, default=None)
    sample.add_argument("--seed", type=int, default=None)
    sample.add_argument("--out", default=None, help="output directory")

    ver = sub.add_parser("verify", help="run the verification suites")
    ver.add_argument("--filter", default=None)
    ver.add_argument("--out", default=None, help="output directory")

    bench = sub.add_parser("bench", help="time CG against Cholesky")
    bench.add_argument("--dims", default="64,256,1024")
    bench.add_argument("--out", default=None, help="CSV path (default stdout)")

    inspect = sub.add_parser("inspect-precision",
                             help="report operator structure for a config")
    inspect.add_argument("--config", default=None)
    inspect.add_argument("--set", dest="overrides", action="append", default=[],
                         metavar="KEY=VALUE")
    inspect.add_argument("--n", type=int, default=None,
                         help="node count (default: dataset max_n, else 8)")
    return parser


def _resolve_seed(cfg_seed, cli_seed):
    env = os.environ.get("VBFN_SEED")
    if env is not None:
        return int(env)
    if cli_seed is not None:
        return int(cli_seed)
    return cfg_seed


def _echo_run(out_dir, cfg, seed):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(serialize_config(replace(cfg, seed=seed)))
    return out


def _cmd_train(args):
    cfg = parse_config(args.config, args.overrides)
    seed = _resolve_seed(cfg.seed, args.seed)
    out = _echo_run(args.out or cfg.out_dir, cfg, seed)
    if not cfg.dataset:
        raise ConfigError("train requires a dataset path (key 'dataset')")
    dataset = read_dataset(cfg.dataset)
    meta = dataset.meta
    pred_config = replace(cfg.predictor, node_channel_kind=meta.node_channel)
    start = None
    steps = cfg.train.steps
    if args.resume:
        start = Checkpoint.load(args.resume, pred_config)

    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "wall_seconds", "cg_warning_count"])

        def log_cb(step, loss, seconds, warnings):
            writer.writerow([step, f"{loss:.6e}", f"{seconds:.3f}", warnings])
            print(f"step {step:>6}  loss {loss:.6e}  ({seconds:.1f}s)")

        def checkpoint_cb(ckpt):
            ckpt.save(out / f"checkpoint_step{ckpt.step}.json")

        result = pipeline.fit_params(
            list(dataset), meta, schedule=cfg.schedule, precision=cfg.precision,
            solver_cfg=cfg.solver, pred_config=pred_config, seed=seed,
            steps=steps, batch_size=cfg.train.batch_size, lr=cfg.train.lr,
            weight_decay=cfg.train.weight_decay, clip_norm=cfg.train.clip_norm,
            convention=cfg.train.loss_convention, eps_prob=cfg.decode.eps_prob,
            per_graph_t=cfg.train.per_graph_t, start=start,
            log_every=cfg.train.log_every, log_cb=log_cb,
            checkpoint_every=cfg.train.checkpoint_every,
            checkpoint_cb=checkpoint_cb, config_echo=config_dict(cfg))
    result.checkpoint.save(out / "checkpoint.json")
    print(f"wrote {out / 'checkpoint.json'} and {log_path}")
    return EXIT_OK


def _cmd_sample(args):
    with open(args.checkpoint) as fh:
        raw = json.load(fh)
    cfg = parse_config(None, [f"{k} = {v}" for k, v in raw["config"].items()
                              if k != "dataset"] if raw.get("config") else [])
    seed = _resolve_seed(cfg.seed, args.seed)
    pred_config = replace(cfg.predictor,
                          node_channel_kind=raw["meta"]["node_channel"])
    ckpt = Checkpoint.load(args.checkpoint, pred_config)
    out = _echo_run(args.out or cfg.out_dir, cfg, seed)
    samples = pipeline.sample_graphs(
        ckpt.params, ckpt.meta, schedule=cfg.schedule, precision=cfg.precision,
        solver_cfg=cfg.solver, pred_config=pred_config,
        histogram=ckpt.histogram, count=args.count, seed=seed,
        steps=args.steps or cfg.schedule.steps, eps_prob=cfg.decode.eps_prob)
    path = out / "samples.jsonl"
    write_samples(path, samples, ckpt.meta)
    print(f"wrote {len(samples)} samples to {path}")
    return EXIT_OK


def _cmd_verify(args):
    out_path = None
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        out_path = out_dir / "verify_report.json"
    results = verify.run_verify(args.filter, out_path=out_path)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def _cmd_bench(args):
    dims = [int(d) for d in args.dims.split(",") if d]
    rows = [("D", "method", "iters", "seconds", "residual")]
    for dim in dims:
        dep = build_node_dependency_complete(dim, 1, 0.2)
        prior = build_prior_precision(dep, np.ones(dim), 1e-2)
        obs = build_obs_precision(prior, "diag_prior", 1e-2)
        rng = np.random.default_rng(0)
        b = rng.normal(size=dim)
        for method in ("cg", "cholesky"):
            if method == "cholesky" and dim > 4096:
                continue
            cfg = SolverConfig(method=method, cg_max_iter=max(1000, dim))
            t0 = time.perf_counter()
            _, report = solve_spd((prior, obs, 1.0), b, cfg)
            rows.append((dim, method, report.iterations,
                         f"{time.perf_counter() - t0:.4f}",
                         f"{report.final_relative_residual:.2e}"))
    lines = "\n".join(",".join(str(c) for c in row) for row in rows) + "\n"
    if args.out:
        Path(args.out).write_text(lines)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(lines)
    return EXIT_OK


def _cmd_inspect(args):
    cfg = parse_config(args.config, args.overrides)
    n = args.n
    if n is None and cfg.dataset and Path(cfg.dataset).exists():
        n = read_dataset(cfg.dataset).meta.max_n
    n = n or 8
    meta = DatasetMeta(k_node=1, k_edge=2, max_n=n)
    cache = OperatorCache(cfg.precision, meta)
    ops = cache.get(n)
    report = {}
    for channel, ch in (("node", ops.node), ("edge", ops.edge)):
        est_prior = spectral_bounds(ch.prior)
        report[channel] = {
            "dim": ch.prior.dim,
            "nnz_prior": ch.prior.nnz,
            "nnz_obs": ch.obs.nnz,
            "prior_lambda_min": est_prior.lambda_min,
            "prior_lambda_max": est_prior.lambda_max,
            "spectral_converged": est_prior.converged,
            "condition_bound_beta0": condition_bound(ch.prior, ch.obs, 0.0),
            "condition_bound_beta24": condition_bound(ch.prior, ch.obs, 24.0),
        }
    print(json.dumps(report, indent=2))
    return EXIT_OK


def main(argv=None):
    args = _build_parser().parse_args(argv)
    handlers = {"train": _cmd_train, "sample": _cmd_sample,
                "verify": _cmd_verify, "bench": _cmd_bench,
                "inspect-precision": _cmd_inspect}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
