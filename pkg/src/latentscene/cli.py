"""Command-line pipeline: data generation, training, evaluation, latent
diagnostics, interpolation and imagery.

Every command is driven by one YAML config plus explicit file paths, and
is idempotent: identical config and seed reproduce identical output bytes.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import config as cfgmod
from . import dataio, metrics, nets, scenes, train
from .errors import ConfigError, DataError, NumericError, UsageError


def _load_config(args):
    cfg = cfgmod.load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "model", None):
        cfg = replace(cfg, train=replace(cfg.train, model=args.model))
    if getattr(args, "threads", None) is not None:
        cfg = replace(cfg, threads=args.threads)
    cfg.validate()
    print("# resolved configuration", file=sys.stderr)
    cfgmod.dump_resolved(cfg, sys.stderr)
    return cfg


def _load_dataset(path):
    if not os.path.exists(path):
        raise DataError(f"dataset file not found: {path}")
    return dataio.load_dataset(path)


def _load_checkpoint_for(cfg, path, kinds):
    if not os.path.exists(path):
        raise DataError(f"checkpoint file not found: {path}")
    arch = cfg.architecture()
    state = dataio.load_checkpoint(
        path, expected_digest=dataio.config_digest(arch.describe()))
    if state["kind"] not in kinds:
        raise ConfigError(f"{path} holds a {state['kind']} checkpoint; expected"
                          f" one of {kinds}")
    return arch, state


def cmd_gen_data(args):
    cfg = _load_config(args)
    base = cfg.scene.base_config(cfg.seed)
    sequences = scenes.generate_dataset(base, cfg.scene.sequence_count,
                                        cfg.scene.conditions, cfg.seed)
    records = dataio.sequences_to_records(sequences)
    dataio.save_dataset(args.out, records)
    car_ratio = scenes.class_pixel_ratio([r.car for r in records], 1.0)
    lane_ratio = scenes.class_pixel_ratio([r.lane for r in records], 1.0)
    print(f"sequences: {len(records)}")
    print(f"frames: {sum(len(r) for r in records)}")
    print(f"car_pixel_ratio: {car_ratio!r}")
    print(f"lane_pixel_ratio: {lane_ratio!r}")
    print(f"wrote {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    if cfg.train.model == "net4":
        raise ConfigError("use train-predictor for net4")
    dataset = _load_dataset(args.data)
    report = train.train(cfg.resolved_train(), cfg.architecture(), dataset,
                         args.out, log_path=args.log,
                         resume_from=args.resume)
    last = report.epochs[-1] if report.epochs else {}
    val = last.get("val") or {}
    print(f"trained {report.model} for {len(report.epochs)} epochs"
          f" in {report.wall_seconds:.1f}s")
    if val:
        print(f"final_val_total: {val['total']!r}")
    print(f"wrote {report.checkpoint_path}")
    return 0


def cmd_train_predictor(args):
    cfg = _load_config(args)
    cfg = replace(cfg, train=replace(cfg.train, model="net4"))
    if not os.path.exists(args.latents):
        raise DataError(f"latent file not found: {args.latents}")
    report = train.train_predictor(cfg.resolved_train(), cfg.architecture(),
                                   args.latents, args.out, log_path=args.log)
    print(f"trained net4 for {len(report.epochs)} epochs"
          f" in {report.wall_seconds:.1f}s")
    print(f"wrote {report.checkpoint_path}")
    return 0


def cmd_export_latents(args):
    cfg = _load_config(args)
    dataset = _load_dataset(args.data)
    arch, _ = _load_checkpoint_for(cfg, args.ckpt, ("net1", "net2", "net3"))
    trajectories = train.export_latents(args.ckpt, arch, dataset, args.out)
    print(f"trajectories: {len(trajectories)}")
    print(f"vectors: {sum(t.shape[0] for t in trajectories)}")
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    dataset = _load_dataset(args.data)
    arch, state = _load_checkpoint_for(cfg, args.ckpt,
                                       ("net1", "net2", "net3", "net4"))
    tcfg = cfg.resolved_train()
    _, _, test_idx = dataio.split(len(dataset), tcfg.fractions, cfg.seed)
    if len(test_idx) == 0:
        raise DataError("test split is empty; adjust fractions")
    params = nets.as_tensors(state["params"], trainable=False)

    if state["kind"] == "net4":
        if not args.autoencoder:
            raise ConfigError("evaluating net4 requires --autoencoder with the"
                              " encoder/decoder checkpoint")
        _, ae_state = _load_checkpoint_for(cfg, args.autoencoder,
                                           ("net2", "net3"))
        ae_params = nets.as_tensors(ae_state["params"], trainable=False)
        report = metrics.evaluate_predictor(params, ae_params, arch, dataset,
                                            test_idx)
        stats = metrics.evaluate_latents(ae_params, arch, dataset, test_idx,
                                         subsample_seed=cfg.seed)
    elif state["kind"] == "net1":
        raise ConfigError("net1 has no concept decoders to score; evaluate"
                          " net2, net3 or net4")
    else:
        report = metrics.evaluate_autoencoder(params, arch, dataset, test_idx)
        stats = metrics.evaluate_latents(params, arch, dataset, test_idx,
                                         subsample_seed=cfg.seed)
    metrics.write_iou_csv(args.out, report)
    if args.stats_out:
        metrics.write_latent_stats_csv(args.stats_out, stats)
    for condition in report.conditions():
        row = [metrics.CONDITION_LABELS[condition]]
        for h in range(report.horizons):
            row.append(f"cars={report.value(condition, 'cars', h):.4f}")
            row.append(f"lanes={report.value(condition, 'lanes', h):.4f}")
        print(" ".join(row))
    print(f"temporal_coherence: {stats.temporal_coherence!r}")
    print(f"predictivity_residual: {stats.predictivity_residual!r}")
    print(f"wrote {args.out}")
    return 0


def cmd_interpolate(args):
    cfg = _load_config(args)
    dataset = _load_dataset(args.data)
    arch, state = _load_checkpoint_for(cfg, args.ckpt, ("net1", "net2", "net3"))
    params = nets.as_tensors(state["params"], trainable=False)
    frame_a = _global_frame(dataset, args.a)
    frame_b = _global_frame(dataset, args.b)
    frames = metrics.interpolate(params, arch, frame_a, frame_b, args.steps)
    os.makedirs(args.out_dir, exist_ok=True)
    written = []
    for i, entry in enumerate(frames):
        path = os.path.join(args.out_dir, f"interp_{i:02d}.ppm")
        metrics.write_ppm(path, entry["rgb"])
        written.append(path)
    print(f"steps: {len(frames)}")
    print(f"wrote {len(written)} frames to {args.out_dir}")
    return 0


def _global_frame(dataset, index):
    if index < 0:
        raise UsageError(f"frame index must be >= 0, got {index}")
    remaining = index
    for seq in dataset.sequences:
        if remaining < len(seq):
            return seq.rgb[remaining]
        remaining -= len(seq)
    raise DataError(f"frame index {index} out of range"
                    f" ({dataset.frame_count} frames)")


def cmd_imagine(args):
    cfg = _load_config(args)
    arch, state = _load_checkpoint_for(cfg, args.ckpt, ("net4",))
    _, ae_state = _load_checkpoint_for(cfg, args.autoencoder, ("net2", "net3"))
    params = nets.as_tensors(state["params"], trainable=False)
    ae_params = nets.as_tensors(ae_state["params"], trainable=False)
    if not os.path.exists(args.latents):
        raise DataError(f"latent file not found: {args.latents}")
    (n_total, _, _), trajectories = dataio.load_latents(args.latents)
    if n_total != arch.layout.n_total:
        raise ConfigError(f"latent width {n_total} does not match configured"
                          f" layout {arch.layout.n_total}")
    if not 0 <= args.seq < len(trajectories):
        raise DataError(f"trajectory {args.seq} out of range"
                        f" ({len(trajectories)} trajectories)")
    traj = trajectories[args.seq]
    if traj.shape[0] < arch.predictor_inputs:
        raise DataError(f"trajectory {args.seq} too short to seed the rollout")
    seeds = [traj[t] for t in range(arch.predictor_inputs)]
    imagined = metrics.imagery_rollout(params, arch, seeds, args.iters)
    decoded = metrics.decode_latents(ae_params, arch, imagined)
    os.makedirs(args.out_dir, exist_ok=True)
    for i, entry in enumerate(decoded):
        metrics.write_ppm(os.path.join(args.out_dir, f"imagined_{i:02d}.ppm"),
                          entry["rgb"])
    print(f"iterations: {len(imagined)}")
    print(f"wrote {len(decoded)} frames to {args.out_dir}")
    return 0


def cmd_latent_stats(args):
    if not os.path.exists(args.latents):
        raise DataError(f"latent file not found: {args.latents}")
    _, trajectories = dataio.load_latents(args.latents)
    stats = metrics.latent_stats(trajectories, subsample_seed=args.seed or 0)
    print(f"trajectories: {len(trajectories)}")
    print(f"pair_count: {stats.pair_count}")
    print(f"temporal_coherence: {stats.temporal_coherence!r}")
    print(f"predictivity_residual: {stats.predictivity_residual!r}")
    if args.out:
        metrics.write_latent_stats_csv(args.out, stats)
        print(f"wrote {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="latentscene",
        description="Concept-partitioned scene autoencoders with latent"
                    " prediction, at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--threads", type=int, default=None,
                       help="cap worker threads (default: config value)")

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset (.lsds)")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train net1, net2 or net3 on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset file (.lsds)")
    p.add_argument("--model", choices=("net1", "net2", "net3"), default=None,
                   help="model kind (default: config train.model)")
    p.add_argument("--out", required=True, help="output checkpoint (.lsck)")
    p.add_argument("--log", default=None, help="CSV training log path")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("train-predictor",
                       help="train the net4 latent sequence predictor")
    common(p)
    p.add_argument("--latents", required=True, help="latent file (.lslt)")
    p.add_argument("--out", required=True, help="output checkpoint (.lsck)")
    p.add_argument("--log", default=None, help="CSV training log path")
    p.set_defaults(fn=cmd_train_predictor)

    p = sub.add_parser("export-latents",
                       help="encode every dataset frame to latent means")
    common(p)
    p.add_argument("--ckpt", required=True, help="autoencoder checkpoint")
    p.add_argument("--data", required=True, help="dataset file (.lsds)")
    p.add_argument("--out", required=True, help="output latent file (.lslt)")
    p.set_defaults(fn=cmd_export_latents)

    p = sub.add_parser("eval", help="IoU report and latent diagnostics on the"
                                    " test split")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    p.add_argument("--data", required=True, help="dataset file (.lsds)")
    p.add_argument("--out", required=True, help="output CSV report")
    p.add_argument("--autoencoder", default=None,
                   help="net2/net3 checkpoint used to decode net4 predictions")
    p.add_argument("--stats-out", default=None,
                   help="optional CSV for latent diagnostics")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("interpolate", help="decode latent mixes between two"
                                           " dataset frames")
    common(p)
    p.add_argument("--ckpt", required=True, help="autoencoder checkpoint")
    p.add_argument("--data", required=True, help="dataset file (.lsds)")
    p.add_argument("--a", type=int, required=True, help="first frame index")
    p.add_argument("--b", type=int, required=True, help="second frame index")
    p.add_argument("--steps", type=int, default=5,
                   help="intermediate frames to decode (default 5)")
    p.add_argument("--out-dir", required=True, help="directory for PPM frames")
    p.set_defaults(fn=cmd_interpolate)

    p = sub.add_parser("imagine", help="iterated latent rollout decoded to"
                                       " frames")
    common(p)
    p.add_argument("--ckpt", required=True, help="net4 checkpoint")
    p.add_argument("--autoencoder", required=True,
                   help="net2/net3 checkpoint for decoding")
    p.add_argument("--latents", required=True, help="latent file (.lslt)")
    p.add_argument("--seq", type=int, default=0,
                   help="trajectory index for the seed window (default 0)")
    p.add_argument("--iters", type=int, default=9,
                   help="rollout iterations (default 9)")
    p.add_argument("--out-dir", required=True, help="directory for PPM frames")
    p.set_defaults(fn=cmd_imagine)

    p = sub.add_parser("latent-stats", help="temporal coherence and"
                                            " predictivity of a latent file")
    p.add_argument("--latents", required=True, help="latent file (.lslt)")
    p.add_argument("--seed", type=int, default=None,
                   help="subsample seed (default 0)")
    p.add_argument("--out", default=None, help="optional CSV output")
    p.set_defaults(fn=cmd_latent_stats)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        if err.breakdown:
            print(f"term breakdown: {err.breakdown}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
