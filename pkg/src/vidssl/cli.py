"""Command-line entry points: pretrain, probe, finetune, retrieve, ablate, plot."""

from __future__ import annotations

import argparse
import glob
import json
import os
import subprocess
import sys

import torch

from .ablation import get_grid, run_ablation
from .config import (
    ExperimentConfig,
    config_to_dict,
    config_to_json,
    load_config,
    override_config,
    validate_config,
)
from .contrastive import FrameworkConfig
from .errors import ConfigError
from .evaluate import fine_tune, linear_probe, retrieval_recall, video_features, write_retrieval_csv
from .model import build_model, config_fingerprint
from .synthdata import make_dataset, split_dataset
from .training import apply_determinism, build_pretrain_model, pretrain


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10, check=False,
        )
        return out.stdout.strip() or "unknown"
    except OSError:
        return "unknown"


def _load_experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else validate_config(ExperimentConfig())
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    return override_config(cfg, overrides) if overrides else cfg


def _write_manifest(out_dir: str, cfg: ExperimentConfig, command: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "seed": cfg.train.seed,
        "git_describe": _git_describe(),
        "config": config_to_dict(cfg),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _splits(cfg: ExperimentConfig):
    dataset = make_dataset(cfg.dataset, cfg.augment.clip_length)
    return split_dataset(dataset, cfg.dataset)


def _model_from_checkpoint(cfg: ExperimentConfig, checkpoint: str | None):
    """Model restored from a checkpoint, or a fresh random-init model."""
    apply_determinism(cfg.train.deterministic)
    if checkpoint is None:
        model, _ = build_pretrain_model(cfg.model, cfg.augment, cfg.framework, cfg.train.seed)
        return model
    if not os.path.exists(checkpoint):
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    payload = torch.load(checkpoint, map_location="cpu", weights_only=False)
    framework_name = payload.get("framework_name", cfg.framework.framework)
    framework_cfg = FrameworkConfig(
        framework=framework_name,
        temperature=cfg.framework.temperature,
        momentum_m=cfg.framework.momentum_m,
        queue_size=cfg.framework.queue_size,
        symmetrize_byol=cfg.framework.symmetrize_byol,
    )
    model = build_model(
        cfg.model,
        n_spatial=len(cfg.augment.spatial_rates),
        n_temporal=len(cfg.augment.temporal_rates),
        n_playback=len(cfg.augment.playback_rates),
        with_predictor=framework_name in ("byol", "simsiam"),
        seed=cfg.train.seed,
    )
    model.load_state_dict(payload["model"])
    return model


def cmd_pretrain(args) -> int:
    cfg = _load_experiment(args)
    out_dir = cfg.output_dir
    _write_manifest(out_dir, cfg, "pretrain")
    train_videos, _ = _splits(cfg)
    pretrain(
        train_videos,
        cfg.augment,
        cfg.model,
        cfg.framework,
        cfg.weights,
        cfg.train,
        out_dir,
        config_hash=config_fingerprint(config_to_json(cfg)),
    )
    print(f"pretrained {cfg.train.steps} steps -> {os.path.join(out_dir, 'checkpoint.pt')}")
    return 0


def _eval_command(args, command: str) -> int:
    cfg = _load_experiment(args)
    out_dir = cfg.output_dir
    _write_manifest(out_dir, cfg, command)
    train_videos, test_videos = _splits(cfg)
    model = _model_from_checkpoint(cfg, args.checkpoint)

    if command == "probe":
        acc = linear_probe(model, train_videos, test_videos, cfg.dataset.num_classes, cfg.eval, cfg.train.seed)
        result_path = os.path.join(out_dir, "probe.json")
    elif command == "finetune":
        acc = fine_tune(model, train_videos, test_videos, cfg.dataset.num_classes, cfg.eval, cfg.train.seed)
        result_path = os.path.join(out_dir, "finetune.json")
    else:  # retrieve
        gallery = video_features(model, train_videos, cfg.eval.num_clips)
        queries = video_features(model, test_videos, cfg.eval.num_clips)
        result = retrieval_recall(gallery, queries, cfg.eval.ks)
        write_retrieval_csv(os.path.join(out_dir, "retrieval.csv"), result)
        print(f"retrieval recalls: {result.recalls}")
        return 0

    with open(result_path, "w", encoding="utf-8") as fh:
        json.dump({"accuracy": acc, "checkpoint": args.checkpoint}, fh, indent=2)
        fh.write("\n")
    print(f"{command} accuracy: {acc:.4f}")
    return 0


def cmd_ablate(args) -> int:
    from .ablation import default_ablation_config

    grid = get_grid(args.grid)
    cfg = _load_experiment(args) if args.config else default_ablation_config()
    if getattr(args, "seed", None) is not None:
        cfg = override_config(cfg, {"train.seed": args.seed})
    out_dir = args.out or cfg.output_dir
    _write_manifest(out_dir, cfg, f"ablate:{args.grid}")
    csv_path = run_ablation(grid, cfg, out_dir)
    print(f"grid {args.grid}: wrote {csv_path}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    produced = []
    for run_dir in args.run_dirs:
        metrics_path = os.path.join(run_dir, "metrics.jsonl")
        if os.path.exists(metrics_path):
            rows = [json.loads(line) for line in open(metrics_path, encoding="utf-8") if line.strip()]
            steps = [r["step"] for r in rows]

            fig, ax = plt.subplots(figsize=(7, 4))
            for key in ("loss_total", "loss_ctr", "loss_pcls", "loss_rcls", "loss_ocls"):
                ax.plot(steps, [r[key] for r in rows], label=key)
            ax.set_xlabel("step")
            ax.set_ylabel("loss")
            ax.legend()
            fig.tight_layout()
            fig.savefig(os.path.join(run_dir, "loss.png"))
            plt.close(fig)

            fig, ax = plt.subplots(figsize=(7, 4))
            for key in ("acc_spatial", "acc_temporal", "acc_playback", "acc_rotation"):
                ax.plot(steps, [r[key] for r in rows], label=key)
            ax.set_xlabel("step")
            ax.set_ylabel("batch accuracy")
            ax.legend()
            fig.tight_layout()
            fig.savefig(os.path.join(run_dir, "acc.png"))
            plt.close(fig)
            produced += [os.path.join(run_dir, "loss.png"), os.path.join(run_dir, "acc.png")]
        else:
            print(f"warning: no metrics.jsonl in {run_dir}", file=sys.stderr)

        for csv_path in sorted(glob.glob(os.path.join(run_dir, "ablation_*.csv"))):
            grid_name = os.path.basename(csv_path)[len("ablation_") : -len(".csv")]
            labels, values = [], []
            with open(csv_path, encoding="utf-8") as fh:
                import csv as csvmod

                for record in csvmod.DictReader(fh):
                    labels.append(record["row"])
                    values.append(float(record["probe_acc"]) if record["probe_acc"] else 0.0)
            fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(labels)), 4))
            ax.bar(range(len(labels)), values)
            ax.set_xticks(range(len(labels)), labels, rotation=60, ha="right", fontsize=7)
            ax.set_ylabel("probe accuracy")
            ax.set_title(grid_name)
            fig.tight_layout()
            out_path = os.path.join(run_dir, f"{grid_name}.png")
            fig.savefig(out_path)
            plt.close(fig)
            produced.append(out_path)
    print(f"wrote {len(produced)} plot(s)")
    return 0


def _add_common(parser: argparse.ArgumentParser, with_checkpoint: bool = False) -> None:
    parser.add_argument("--config", help="JSON experiment config ({} means all defaults)")
    parser.add_argument("--seed", type=int, help="override train.seed")
    parser.add_argument("--out", help="override output directory")
    if with_checkpoint:
        parser.add_argument("--checkpoint", help="checkpoint file; omit for a random-init model")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vidssl", description="Self-supervised video pretraining on synthetic moving shapes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run self-supervised pretraining")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    for verb in ("probe", "finetune", "retrieve"):
        p = sub.add_parser(verb, help=f"run {verb} evaluation")
        _add_common(p, with_checkpoint=True)
        p.set_defaults(func=lambda args, verb=verb: _eval_command(args, verb))

    p = sub.add_parser("ablate", help="run a predefined experiment grid")
    p.add_argument("grid", choices=["table1", "table2", "table3", "table4"])
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render loss/accuracy curves and grid bar charts")
    p.add_argument("run_dirs", nargs="+")
    p.set_defaults(func=cmd_plot)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:  # CLI boundary: fail with a message, not a traceback
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
