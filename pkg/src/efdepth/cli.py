"""Command line: synth | train | eval | infer | gradcheck.

Exit codes: 0 success, 1 verification failure, 2 configuration/data error.
Config JSON keys match RunConfig field names exactly; flags override config.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np
import torch

from . import gradcheck as gc
from .checkpoint import load_model
from .config import RunConfig, load_config
from .errors import ConfigError, DataError
from .io import list_sequence_dirs, load_sequence_dir, save_depth_raster
from .objectives import DepthRaster, format_metric_table
from .synth import assemble_sequences, synth_dataset
from .train import Trainer, build_model, evaluate_samples, predict_sample
from .viz import save_depth_image, save_depth_pair, save_loss_curve


def _parse_cutoffs(text: str) -> tuple:
    try:
        return tuple(float(tok) for tok in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"cannot parse cutoffs {text!r}") from None


def config_from_args(args) -> RunConfig:
    overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "batch_size": args.batch,
        "resolution": args.resolution,
        "gain": args.gain,
        "threshold_c": args.threshold_c,
        "cutoffs": _parse_cutoffs(args.cutoffs) if args.cutoffs else None,
    }
    return load_config(args.config, overrides)


def load_dataset(root, cfg: RunConfig) -> tuple[dict, int]:
    """Dataset root -> ({sequence name: [SequenceSample]}, dropped frame count)."""
    grouped = {}
    dropped = 0
    for seq_dir in list_sequence_dirs(root):
        data = load_sequence_dir(seq_dir)
        result = assemble_sequences(
            data["frames"],
            data["events"],
            data["depths"],
            seq_len=cfg.seq_len,
            delta_t=int(data["meta"]["frame_period_us"]),
            bins=cfg.bins,
        )
        grouped[os.path.basename(seq_dir)] = result.samples
        dropped += result.dropped
    return grouped, dropped


def _sanitize(obj):
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = config_from_args(args)
    stats = synth_dataset(
        args.out,
        sequences=cfg.sequences,
        frames_per_scene=cfg.frames_per_scene,
        resolution=cfg.resolution,
        gain=cfg.gain,
        threshold_c=cfg.threshold_c,
        frame_period_us=cfg.frame_period_us,
        alpha=cfg.alpha,
        d_max=cfg.d_max,
        seed=cfg.seed,
        substeps=cfg.substeps,
    )
    print(f"wrote {stats['sequences']} sequences to {args.out}")
    print(f"events total: {stats['events_total']}")
    print(f"events per sequence: {stats['events_per_sequence']:.1f}")
    print(f"mean frame edge energy: {stats['mean_edge_energy']:.6f}")
    return 0


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    torch.manual_seed(cfg.seed)
    model = build_model(cfg)
    trainer = Trainer(model, cfg, out_dir=args.out)
    if args.resume:
        trainer.load(args.resume)
        print(f"resumed from {args.resume} at epoch {trainer.epoch}")
    grouped, dropped = load_dataset(args.dataset, cfg)
    samples = [s for seq in grouped.values() for s in seq]
    if dropped:
        print(f"dropped {dropped} trailing frames without a full group")
    log_path = os.path.join(args.out, "loss.csv")
    stats = trainer.fit(samples, log_path=log_path)
    if stats["steps"] > 0 or trainer.global_step > 0:
        try:
            save_loss_curve(os.path.join(args.out, "loss_curve.png"), log_path)
        except (OSError, KeyError, ValueError):
            pass  # a readable curve is a nicety, not a contract
    print(f"trained to epoch {stats['epoch']} ({stats['steps']} steps this run)")
    if stats["final_loss"] is not None:
        print(f"loss: first {stats['initial_loss']:.6f} last {stats['final_loss']:.6f}")
    print(f"checkpoint: {os.path.join(args.out, 'ckpt_latest.efd')}")
    return 0


def cmd_eval(args) -> int:
    cfg = config_from_args(args)
    torch.manual_seed(cfg.seed)
    if not args.use_gt and not args.checkpoint:
        raise ConfigError("eval needs --checkpoint (or --use-gt for the bypass)")
    model = build_model(cfg)
    if args.checkpoint:
        load_model(args.checkpoint, model)
    grouped, dropped = load_dataset(args.dataset, cfg)
    records, dumps = evaluate_samples(model, grouped, cfg, use_gt=args.use_gt)

    os.makedirs(args.out, exist_ok=True)
    report = {
        "dataset": str(args.dataset),
        "checkpoint": str(args.checkpoint) if args.checkpoint else None,
        "use_gt": bool(args.use_gt),
        "dropped_frames": int(dropped),
        "config": cfg.to_dict(),
        "metrics": records,
    }
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(_sanitize(report), fh, indent=2, allow_nan=False)
        fh.write("\n")
    table = format_metric_table(records)
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    print(table)

    # figures + raw prediction dumps, on a per-dataset fixed depth range
    fig_vmax = 0.0
    for samples in grouped.values():
        for s in samples:
            if bool(s.gt_valid.any()):
                fig_vmax = max(fig_vmax, float(s.gt_depth[s.gt_valid].max()))
    fig_vmax = fig_vmax or cfg.d_max
    pred_dir = os.path.join(args.out, "pred")
    for name, samples in grouped.items():
        os.makedirs(os.path.join(pred_dir, name), exist_ok=True)
        for j, sample in enumerate(samples):
            pred = dumps[f"{name}_s{j:02d}"]  # [L, H, W] meters
            for k in range(pred.shape[0]):
                raster = DepthRaster(
                    data=pred[k],
                    valid=np.ones_like(pred[k], dtype=bool),
                    space="meters",
                    alpha=cfg.alpha,
                    d_max=cfg.d_max,
                )
                save_depth_raster(
                    os.path.join(pred_dir, name, f"s{j:02d}_k{k:02d}.f32"), raster
                )
            save_depth_pair(
                os.path.join(args.out, f"{name}_s{j:02d}.png"),
                pred[-1],
                sample.rasters[-1].data,
                fig_vmax,
                title=f"{name} sample {j} (last step)",
            )
    print(f"report: {os.path.join(args.out, 'report.json')}")
    return 0


def cmd_infer(args) -> int:
    cfg = config_from_args(args)
    torch.manual_seed(cfg.seed)
    model = build_model(cfg)
    load_model(args.checkpoint, model)
    data = load_sequence_dir(args.sequence)
    n_frames = data["frames"].shape[0]
    result = assemble_sequences(
        data["frames"],
        data["events"],
        data["depths"],
        seq_len=n_frames,  # whole recording as one rolled-out sequence
        delta_t=int(data["meta"]["frame_period_us"]),
        bins=cfg.bins,
    )
    os.makedirs(args.out, exist_ok=True)
    sample = result.samples[0]
    pred = predict_sample(model, sample, cfg).squeeze(1).numpy().astype(np.float64)
    for k in range(pred.shape[0]):
        raster = DepthRaster(
            data=pred[k],
            valid=np.ones_like(pred[k], dtype=bool),
            space="meters",
            alpha=cfg.alpha,
            d_max=cfg.d_max,
        )
        save_depth_raster(os.path.join(args.out, f"depth_{k:06d}.f32"), raster)
        save_depth_image(os.path.join(args.out, f"depth_{k:06d}.png"), pred[k], cfg.d_max)
    print(f"wrote {pred.shape[0]} depth maps to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gc.run_all(include_corrupt_fixture=args.corrupt_fixture)
    print(gc.format_results(results))
    n_pass = sum(1 for r in results if r.passed)
    print(f"{n_pass}/{len(results)} checks passed")
    return 0 if n_pass == len(results) else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="efdepth",
        description="Event-frame fusion depth estimation: synthesize, train, evaluate.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file (RunConfig keys)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--epochs", type=int, default=None)
    common.add_argument("--batch", type=int, default=None, help="batch size")
    common.add_argument("--resolution", type=int, default=None)
    common.add_argument("--gain", type=float, default=None, help="lighting gain in (0,1]")
    common.add_argument("--threshold-c", type=float, default=None, dest="threshold_c")
    common.add_argument("--cutoffs", default=None, help="comma-separated cutoff depths [m]")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train on a dataset directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument(
        "--use-gt",
        action="store_true",
        help="score ground truth against itself (plumbing check; zero errors)",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="predict depth for one sequence dir")
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference verification")
    p.add_argument(
        "--corrupt-fixture",
        action="store_true",
        help="include the deliberately wrong-gradient fixture (must fail)",
    )
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
