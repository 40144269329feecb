"""Joint pretraining objective and the step/loop machinery.

The total loss is a weighted sum of the contrastive loss and three
cross-entropy pretext losses (playback rate, rotation, and the joint
spatial/temporal overlap task).  A branch whose weight is zero is never
even evaluated, so its parameters receive no gradient and stay
bit-identical — that exact-isolation property is load-bearing for the
framework-parity tests.
"""

from __future__ import annotations

import collections
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentConfig, generate_pair
from .contrastive import ContrastiveFramework, FrameworkConfig, make_framework
from .errors import ConfigError, ContractError, DivergenceError
from .model import EncoderConfig, VideoSSLModel, build_model, save_checkpoint
from .seeding import rng_from
from .synthdata import VideoSample

METRICS_KEYS = (
    "step",
    "lr",
    "loss_total",
    "loss_ctr",
    "loss_pcls",
    "loss_rcls",
    "loss_ocls",
    "acc_spatial",
    "acc_temporal",
    "acc_playback",
    "acc_rotation",
    "seconds",
)


@dataclass(frozen=True)
class LossWeights:
    lambda_ctr: float = 0.1
    lambda_pcls: float = 1.0
    lambda_rcls: float = 1.0
    lambda_ocls: float = 1.0
    l_s: float = 1.0
    l_t: float = 1.0

    def validate(self) -> None:
        for name in ("lambda_ctr", "lambda_pcls", "lambda_rcls", "lambda_ocls", "l_s", "l_t"):
            if getattr(self, name) < 0:
                raise ConfigError(f"LossWeights.{name} must be nonnegative, got {getattr(self, name)}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch_size: int = 16
    lr_init: float = 0.03
    lr_final: float = 1e-5
    weight_decay: float = 5e-4
    sgd_momentum: float = 0.9
    seed: int = 1
    checkpoint_every: int = 0  # 0: only at the end
    prefetch: int = 0  # batches built ahead on a worker thread; 0 = synchronous
    deterministic: bool = True

    def validate(self) -> None:
        if self.steps <= 0 or self.batch_size <= 0:
            raise ConfigError("steps and batch_size must be positive")
        if self.lr_init <= 0 or self.lr_final < 0 or self.lr_final > self.lr_init:
            raise ConfigError(f"need 0 <= lr_final <= lr_init, got {self.lr_final} vs {self.lr_init}")
        if self.weight_decay < 0 or not 0.0 <= self.sgd_momentum < 1.0:
            raise ConfigError("bad optimizer hyperparameters")
        if self.checkpoint_every < 0 or self.prefetch < 0:
            raise ConfigError("checkpoint_every and prefetch must be nonnegative")


def _checked_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if labels.dim() != 1 or logits.shape[0] != labels.shape[0]:
        raise ContractError(f"labels {tuple(labels.shape)} do not match logits {tuple(logits.shape)}")
    if bool(labels.min() < 0) or bool(labels.max() >= logits.shape[1]):
        raise ContractError(
            f"label out of range [0, {logits.shape[1]}): {labels.min().item()}..{labels.max().item()}"
        )
    return F.cross_entropy(logits, labels, reduction="mean")


def pretext_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy with explicit label range checking."""
    return _checked_ce(logits, labels)


def stor_loss(
    logits_s: torch.Tensor,
    logits_t: torch.Tensor,
    labels_s: torch.Tensor,
    labels_t: torch.Tensor,
    l_s: float = 1.0,
    l_t: float = 1.0,
) -> torch.Tensor:
    """Weighted sum of the spatial and temporal overlap cross-entropies."""
    return l_s * _checked_ce(logits_s, labels_s) + l_t * _checked_ce(logits_t, labels_t)


def joint_loss(l_ctr: float, l_pcls: float, l_rcls: float, l_ocls: float, w: LossWeights) -> float:
    """Weighted sum of the four branch losses; rejects non-finite components."""
    parts = {"l_ctr": l_ctr, "l_pcls": l_pcls, "l_rcls": l_rcls, "l_ocls": l_ocls}
    for name, value in parts.items():
        if not math.isfinite(float(value)):
            raise DivergenceError(f"non-finite loss component {name}={value}")
    return (
        w.lambda_ctr * float(l_ctr)
        + w.lambda_pcls * float(l_pcls)
        + w.lambda_rcls * float(l_rcls)
        + w.lambda_ocls * float(l_ocls)
    )


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Cosine decay from lr_init at step 0 to lr_final at the last step."""
    frac = step / cfg.steps
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(math.pi * frac))


def build_batch(
    videos: list[VideoSample],
    acfg: AugmentConfig,
    seed: int,
    step: int,
    batch_size: int,
    purpose: str = "pair",
) -> list:
    """Pure function of (videos, acfg, seed, step): safe to build ahead of time."""
    idx_rng = rng_from(seed, "batch", purpose, step)
    indices = idx_rng.integers(0, len(videos), size=batch_size)
    return [
        generate_pair(videos[int(i)], acfg, rng_from(seed, purpose, step, slot))
        for slot, i in enumerate(indices)
    ]


def collate_pairs(pairs: list) -> dict:
    """Stack clips into (B, C, T, H, W) tensors and gather label tensors."""

    def clips_tensor(key):
        arr = np.stack([getattr(p, key) for p in pairs])
        return torch.from_numpy(arr).permute(0, 4, 1, 2, 3).contiguous()

    def label_tensor(values):
        if any(v is None for v in values):
            return None
        return torch.tensor(values, dtype=torch.long)

    labels = [p.labels for p in pairs]
    return {
        "clips_a": clips_tensor("clip_a"),
        "clips_b": clips_tensor("clip_b"),
        "spatial": label_tensor([l.spatial_overlap_class for l in labels]),
        "temporal": label_tensor([l.temporal_overlap_class for l in labels]),
        "playback": label_tensor([l.playback_class for l in labels]),
        "rotation_a": label_tensor([l.rotation_class for l in labels]),
        "rotation_b": label_tensor([l.rotation_class_b for l in labels]),
    }


def _accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    return float((logits.argmax(dim=1) == labels).float().mean().item())


def _pretext_losses(
    model: VideoSSLModel,
    batch: dict,
    feats_a: torch.Tensor,
    feats_b: torch.Tensor,
    weights: LossWeights,
    classify_second_clip: bool,
) -> tuple[dict, dict]:
    """Branch losses (torch scalars) and accuracies for enabled branches only."""
    losses: dict[str, torch.Tensor] = {}
    accs = {"acc_spatial": 0.0, "acc_temporal": 0.0, "acc_playback": 0.0, "acc_rotation": 0.0}

    if weights.lambda_pcls > 0:
        if batch["playback"] is None:
            raise ContractError("lambda_pcls > 0 but playback augmentation is disabled")
        feats = torch.cat([feats_a, feats_b]) if classify_second_clip else feats_a
        labels = torch.cat([batch["playback"], batch["playback"]]) if classify_second_clip else batch["playback"]
        logits = model.classify_pretext("playback", feats)
        losses["loss_pcls"] = pretext_ce(logits, labels)
        accs["acc_playback"] = _accuracy(logits, labels)

    if weights.lambda_rcls > 0:
        if batch["rotation_b"] is None:
            raise ContractError("lambda_rcls > 0 but rotation augmentation is disabled")
        # The second clip is the rotated one; the first is always upright.
        feats = torch.cat([feats_b, feats_a]) if classify_second_clip else feats_b
        labels = (
            torch.cat([batch["rotation_b"], batch["rotation_a"]]) if classify_second_clip else batch["rotation_b"]
        )
        logits = model.classify_pretext("rotation", feats)
        losses["loss_rcls"] = pretext_ce(logits, labels)
        accs["acc_rotation"] = _accuracy(logits, labels)

    if weights.lambda_ocls > 0:
        if batch["spatial"] is None or batch["temporal"] is None:
            raise ContractError("lambda_ocls > 0 but overlap placement is disabled")
        pair_feats = torch.cat([feats_a, feats_b], dim=1)
        logits_s = model.classify_pretext("spatial", pair_feats)
        logits_t = model.classify_pretext("temporal", pair_feats)
        losses["loss_ocls"] = stor_loss(
            logits_s, logits_t, batch["spatial"], batch["temporal"], weights.l_s, weights.l_t
        )
        accs["acc_spatial"] = _accuracy(logits_s, batch["spatial"])
        accs["acc_temporal"] = _accuracy(logits_t, batch["temporal"])

    return losses, accs


def train_step(
    batch: dict,
    model: VideoSSLModel,
    framework: ContrastiveFramework,
    weights: LossWeights,
    optimizer: torch.optim.Optimizer,
    lr: float,
    classify_second_clip: bool = False,
) -> dict:
    """One optimization step; returns the metrics record (without step/seconds)."""
    optimizer.zero_grad(set_to_none=True)
    feats_a = model.encode(batch["clips_a"])
    feats_b = model.encode(batch["clips_b"])

    losses, accs = _pretext_losses(model, batch, feats_a, feats_b, weights, classify_second_clip)
    if weights.lambda_ctr > 0:
        losses["loss_ctr"] = framework.contrastive_loss(
            model, feats_a, feats_b, batch["clips_a"], batch["clips_b"]
        )

    weight_of = {
        "loss_ctr": weights.lambda_ctr,
        "loss_pcls": weights.lambda_pcls,
        "loss_rcls": weights.lambda_rcls,
        "loss_ocls": weights.lambda_ocls,
    }
    total = sum(weight_of[name] * value for name, value in losses.items())
    if losses:
        if not torch.isfinite(total):
            raise DivergenceError(f"non-finite total loss: { {k: float(v) for k, v in losses.items()} }")
        for group in optimizer.param_groups:
            group["lr"] = lr
        total.backward()
        optimizer.step()
    framework.post_step(model)

    def scalar(value) -> float:
        return float(value.detach()) if torch.is_tensor(value) else float(value)

    record = {
        "lr": lr,
        "loss_total": scalar(total) if losses else 0.0,
        "loss_ctr": scalar(losses.get("loss_ctr", 0.0)),
        "loss_pcls": scalar(losses.get("loss_pcls", 0.0)),
        "loss_rcls": scalar(losses.get("loss_rcls", 0.0)),
        "loss_ocls": scalar(losses.get("loss_ocls", 0.0)),
    }
    record.update(accs)
    return record


def apply_determinism(deterministic: bool) -> None:
    if deterministic:
        torch.set_num_threads(1)


def build_pretrain_model(
    model_cfg: EncoderConfig,
    acfg: AugmentConfig,
    framework_cfg: FrameworkConfig,
    seed: int,
) -> tuple[VideoSSLModel, ContrastiveFramework]:
    framework = make_framework(framework_cfg)
    model = build_model(
        model_cfg,
        n_spatial=len(acfg.spatial_rates),
        n_temporal=len(acfg.temporal_rates),
        n_playback=len(acfg.playback_rates),
        with_predictor=framework.needs_predictor,
        seed=seed,
    )
    framework.attach(model, seed=seed)
    return model, framework


def refresh_batchnorm_stats(
    model: VideoSSLModel,
    videos: list[VideoSample],
    acfg: AugmentConfig,
    tcfg: TrainConfig,
) -> None:
    """Re-estimate the encoder's batch-norm running statistics under the
    final weights.

    Running stats accumulated during training lag the weights they describe
    (each update was computed under earlier parameters), so eval-mode
    features are systematically off at the end of a short schedule.  A few
    forward passes with cumulative averaging align them exactly."""
    bns = [m for m in model.encoder.modules() if isinstance(m, (torch.nn.BatchNorm1d, torch.nn.BatchNorm3d))]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.momentum = None  # cumulative moving average
        m.reset_running_stats()
    was_training = model.training
    model.train()
    n_batches = min(32, max(4, tcfg.steps // 4))
    with torch.no_grad():
        for i in range(n_batches):
            batch = collate_pairs(build_batch(videos, acfg, tcfg.seed, tcfg.steps + i, tcfg.batch_size))
            model.encoder(batch["clips_a"])
            model.encoder(batch["clips_b"])
    model.train(was_training)
    for m, mom in zip(bns, saved):
        m.momentum = mom


def pretrain(
    train_videos: list[VideoSample],
    acfg: AugmentConfig,
    model_cfg: EncoderConfig,
    framework_cfg: FrameworkConfig,
    weights: LossWeights,
    tcfg: TrainConfig,
    out_dir: str,
    config_hash: str = "",
) -> tuple[VideoSSLModel, ContrastiveFramework, str, str]:
    """Run the pretraining loop; writes metrics.jsonl and checkpoint.pt."""
    if not train_videos:
        raise ConfigError("cannot pretrain on an empty video list")
    weights.validate()
    tcfg.validate()
    framework_cfg.validate(batch_size=tcfg.batch_size)
    apply_determinism(tcfg.deterministic)

    model, framework = build_pretrain_model(model_cfg, acfg, framework_cfg, tcfg.seed)
    model.train()
    optimizer = torch.optim.SGD(
        [p for p in model.parameters() if p.requires_grad],
        lr=tcfg.lr_init,
        momentum=tcfg.sgd_momentum,
        weight_decay=tcfg.weight_decay,
    )

    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    checkpoint_path = os.path.join(out_dir, "checkpoint.pt")

    def batch_for(step: int) -> list:
        return build_batch(train_videos, acfg, tcfg.seed, step, tcfg.batch_size)

    executor = ThreadPoolExecutor(max_workers=1) if tcfg.prefetch > 0 else None
    pending: collections.deque = collections.deque()
    try:
        with open(metrics_path, "w", encoding="utf-8") as metrics_file:
            for step in range(tcfg.steps):
                if executor is not None:
                    while len(pending) < tcfg.prefetch and (step + len(pending)) < tcfg.steps:
                        pending.append(executor.submit(batch_for, step + len(pending)))
                    pairs = pending.popleft().result()
                else:
                    pairs = batch_for(step)
                started = time.perf_counter()
                try:
                    record = train_step(
                        collate_pairs(pairs),
                        model,
                        framework,
                        weights,
                        optimizer,
                        lr_at(step, tcfg),
                        acfg.classify_second_clip,
                    )
                except DivergenceError as err:
                    raise DivergenceError(f"step {step}: {err}") from err
                elapsed = 0.0 if tcfg.deterministic else time.perf_counter() - started
                row = {"step": step, **record, "seconds": elapsed}
                metrics_file.write(json.dumps({k: row[k] for k in METRICS_KEYS}) + "\n")
                if tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
                    save_checkpoint(
                        checkpoint_path, model, optimizer, step + 1,
                        framework_cfg.framework, config_hash, framework.state_dict(),
                    )
    finally:
        if executor is not None:
            executor.shutdown(wait=False, cancel_futures=True)

    refresh_batchnorm_stats(model, train_videos, acfg, tcfg)
    save_checkpoint(
        checkpoint_path, model, optimizer, tcfg.steps,
        framework_cfg.framework, config_hash, framework.state_dict(),
    )
    return model, framework, metrics_path, checkpoint_path


def pretext_eval_accuracy(
    model: VideoSSLModel,
    videos: list[VideoSample],
    acfg: AugmentConfig,
    seed: int,
    num_batches: int = 8,
    batch_size: int = 16,
) -> dict:
    """Held-out STOR/playback/rotation head accuracies on fresh pairs."""
    was_training = model.training
    model.eval()
    totals = {"acc_spatial": 0.0, "acc_temporal": 0.0, "acc_playback": 0.0, "acc_rotation": 0.0}
    with torch.no_grad():
        for b in range(num_batches):
            batch = collate_pairs(build_batch(videos, acfg, seed, b, batch_size, purpose="evalpair"))
            feats_a = model.encode(batch["clips_a"])
            feats_b = model.encode(batch["clips_b"])
            pair_feats = torch.cat([feats_a, feats_b], dim=1)
            if batch["spatial"] is not None:
                totals["acc_spatial"] += _accuracy(model.classify_pretext("spatial", pair_feats), batch["spatial"])
                totals["acc_temporal"] += _accuracy(model.classify_pretext("temporal", pair_feats), batch["temporal"])
            if batch["playback"] is not None:
                totals["acc_playback"] += _accuracy(model.classify_pretext("playback", feats_a), batch["playback"])
            if batch["rotation_b"] is not None:
                totals["acc_rotation"] += _accuracy(model.classify_pretext("rotation", feats_b), batch["rotation_b"])
    if was_training:
        model.train()
    return {k: v / num_batches for k, v in totals.items()}


