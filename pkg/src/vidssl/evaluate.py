"""Downstream evaluation: linear probe, fine-tuning and retrieval.

A video-level feature is the L2-normalized mean of encoder features from
10 uniformly anchored clips.  Classification protocols score each of the
10 clips separately and average the scores.  The probe trains only a
linear classifier on cached frozen features; fine-tuning updates the whole
encoder with a freshly initialized classifier.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import _resize_clip
from .errors import ConfigError, ContractError
from .model import VideoSSLModel
from .seeding import rng_from, torch_generator
from .synthdata import VideoSample

DEFAULT_KS = (1, 5, 10, 20, 50)


@dataclass(frozen=True)
class VideoFeature:
    vector: np.ndarray = field(repr=False)  # unit-norm, length n
    video_id: int = 0
    class_id: int = 0


@dataclass(frozen=True)
class RetrievalResult:
    recalls: dict[int, float]


@dataclass(frozen=True)
class EvalConfig:
    num_clips: int = 10
    probe_epochs: int = 40
    finetune_epochs: int = 6
    batch_size: int = 128
    finetune_batch_size: int = 16
    lr_init: float = 0.02
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    ks: tuple[int, ...] = DEFAULT_KS

    def validate(self) -> None:
        if self.num_clips < 1:
            raise ConfigError(f"num_clips must be >= 1, got {self.num_clips}")
        if self.probe_epochs < 1 or self.finetune_epochs < 1:
            raise ConfigError("epoch counts must be positive")
        if self.batch_size < 1 or self.finetune_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if self.lr_init <= 0 or not 0 < self.plateau_factor < 1 or self.plateau_patience < 0:
            raise ConfigError("bad optimizer/scheduler settings")
        if not self.ks or any(k < 1 for k in self.ks) or list(self.ks) != sorted(self.ks):
            raise ConfigError(f"ks must be positive and ascending: {self.ks}")


def clip_anchors(num_frames: int, clip_length: int, num_clips: int) -> list[int]:
    """Evenly spaced clip starts covering [0, num_frames - clip_length]."""
    if num_frames < clip_length:
        raise ContractError(f"video of {num_frames} frames is shorter than a {clip_length}-frame clip")
    if num_clips == 1:
        return [(num_frames - clip_length) // 2]
    return [i * (num_frames - clip_length) // (num_clips - 1) for i in range(num_clips)]


def _eval_clips(video: VideoSample, clip_length: int, crop_size: int, num_clips: int) -> torch.Tensor:
    """(num_clips, C, T, S, S) tensor of uniformly anchored, resized clips."""
    anchors = clip_anchors(video.frames.shape[0], clip_length, num_clips)
    clips = [_resize_clip(video.frames[t0 : t0 + clip_length], crop_size) for t0 in anchors]
    return torch.from_numpy(np.stack(clips)).permute(0, 4, 1, 2, 3).contiguous()


def clip_features(
    model: VideoSSLModel, videos: list[VideoSample], num_clips: int = 10, batch_size: int = 64
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Frozen per-clip encoder features: (N, num_clips, n), labels, video ids."""
    was_training = model.training
    model.eval()
    cfg = model.cfg
    feats = []
    with torch.no_grad():
        pending: list[torch.Tensor] = []
        for video in videos:
            pending.append(_eval_clips(video, cfg.clip_length, cfg.crop_size, num_clips))
            if len(pending) * num_clips >= batch_size:
                feats.append(model.encode(torch.cat(pending)).numpy())
                pending = []
        if pending:
            feats.append(model.encode(torch.cat(pending)).numpy())
    if was_training:
        model.train()
    stacked = np.concatenate(feats).reshape(len(videos), num_clips, -1)
    labels = np.array([v.class_id for v in videos], dtype=np.int64)
    ids = np.array([v.video_id for v in videos], dtype=np.int64)
    return stacked, labels, ids


def video_feature(model: VideoSSLModel, video: VideoSample, num_clips: int = 10) -> VideoFeature:
    """L2-normalized mean of the uniformly sampled clip features."""
    feats, _, _ = clip_features(model, [video], num_clips=num_clips)
    mean = feats[0].mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise ContractError(f"degenerate all-zero feature for video {video.video_id}")
    return VideoFeature(vector=mean / norm, video_id=video.video_id, class_id=video.class_id)


def video_features(model: VideoSSLModel, videos: list[VideoSample], num_clips: int = 10) -> list[VideoFeature]:
    feats, labels, ids = clip_features(model, videos, num_clips=num_clips)
    mean = feats.mean(axis=1)
    norms = np.linalg.norm(mean, axis=1, keepdims=True)
    if bool((norms < 1e-12).any()):
        raise ContractError("degenerate all-zero video feature")
    unit = mean / norms
    return [VideoFeature(vector=unit[i], video_id=int(ids[i]), class_id=int(labels[i])) for i in range(len(videos))]


def retrieval_recall(
    gallery: list[VideoFeature], queries: list[VideoFeature], ks: tuple[int, ...] = DEFAULT_KS
) -> RetrievalResult:
    """Recall@k of class-matching neighbors under cosine ranking.

    Ties are broken toward the lower gallery video_id so rankings are exact.
    """
    if not gallery or not queries:
        raise ContractError("retrieval needs nonempty gallery and query sets")
    g = np.stack([f.vector for f in gallery])
    q = np.stack([f.vector for f in queries])
    g_ids = np.array([f.video_id for f in gallery])
    g_cls = np.array([f.class_id for f in gallery])
    q_cls = np.array([f.class_id for f in queries])
    sims = q @ g.T
    recalls = {}
    # lexsort: last key is primary, so sort by -sim then by video_id for ties
    order = np.lexsort((np.broadcast_to(g_ids, sims.shape), -sims), axis=1)
    ranked_cls = g_cls[order]
    for k in ks:
        top = ranked_cls[:, : min(k, len(gallery))]
        recalls[int(k)] = float((top == q_cls[:, None]).any(axis=1).mean())
    return RetrievalResult(recalls=recalls)


def write_retrieval_csv(path: str, result: RetrievalResult) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "recall"])
        for k in sorted(result.recalls):
            writer.writerow([k, f"{result.recalls[k]:.6f}"])


def export_features(path_prefix: str, features: list[VideoFeature]) -> None:
    """Binary matrix (.npy) plus a text manifest of video_id/class_id rows."""
    np.save(path_prefix + ".npy", np.stack([f.vector for f in features]))
    with open(path_prefix + ".manifest.txt", "w", encoding="utf-8") as fh:
        for row, f in enumerate(features):
            fh.write(f"{row} {f.video_id} {f.class_id}\n")


def _train_classifier_on_features(
    train_feats: torch.Tensor,
    train_labels: torch.Tensor,
    num_classes: int,
    ecfg: EvalConfig,
    seed: int,
) -> nn.Linear:
    classifier = nn.Linear(train_feats.shape[1], num_classes)
    gen = torch_generator(seed, "probe_head")
    nn.init.zeros_(classifier.bias)
    nn.init.normal_(classifier.weight, std=0.01, generator=gen)
    optimizer = torch.optim.SGD(
        classifier.parameters(), lr=ecfg.lr_init, momentum=ecfg.sgd_momentum, weight_decay=ecfg.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, mode="min", factor=ecfg.plateau_factor, patience=ecfg.plateau_patience
    )
    n = train_feats.shape[0]
    for epoch in range(ecfg.probe_epochs):
        perm = rng_from(seed, "probe_order", epoch).permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, ecfg.batch_size):
            idx = torch.from_numpy(perm[start : start + ecfg.batch_size].copy())
            optimizer.zero_grad(set_to_none=True)
            loss = F.cross_entropy(classifier(train_feats[idx]), train_labels[idx])
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(idx)
        scheduler.step(epoch_loss / n)
    return classifier


def _scored_accuracy(classifier: nn.Linear, feats: torch.Tensor, labels: np.ndarray) -> float:
    """Per-clip scores averaged over each video's clips, then argmax."""
    with torch.no_grad():
        n_videos, n_clips, dim = feats.shape
        logits = classifier(feats.reshape(n_videos * n_clips, dim)).reshape(n_videos, n_clips, -1)
        pred = logits.mean(dim=1).argmax(dim=1).numpy()
    return float((pred == labels).mean())


def linear_probe(
    model: VideoSSLModel,
    train_videos: list[VideoSample],
    test_videos: list[VideoSample],
    num_classes: int,
    ecfg: EvalConfig,
    seed: int,
) -> float:
    """Test accuracy of a linear classifier on frozen encoder features."""
    ecfg.validate()
    train_f, train_y, _ = clip_features(model, train_videos, ecfg.num_clips)
    test_f, test_y, _ = clip_features(model, test_videos, ecfg.num_clips)
    flat_feats = torch.from_numpy(train_f.reshape(-1, train_f.shape[2]))
    flat_labels = torch.from_numpy(np.repeat(train_y, ecfg.num_clips))
    classifier = _train_classifier_on_features(flat_feats, flat_labels, num_classes, ecfg, seed)
    return _scored_accuracy(classifier, torch.from_numpy(test_f), test_y)


def fine_tune(
    model: VideoSSLModel,
    train_videos: list[VideoSample],
    test_videos: list[VideoSample],
    num_classes: int,
    ecfg: EvalConfig,
    seed: int,
) -> float:
    """Train encoder + fresh classifier end to end; returns test accuracy."""
    ecfg.validate()
    cfg = model.cfg
    classifier = nn.Linear(cfg.feature_dim, num_classes)
    gen = torch_generator(seed, "finetune_head")
    nn.init.zeros_(classifier.bias)
    nn.init.normal_(classifier.weight, std=0.01, generator=gen)
    params = [p for p in model.parameters() if p.requires_grad] + list(classifier.parameters())
    optimizer = torch.optim.SGD(
        params, lr=ecfg.lr_init, momentum=ecfg.sgd_momentum, weight_decay=ecfg.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, mode="min", factor=ecfg.plateau_factor, patience=ecfg.plateau_patience
    )
    model.train()
    for epoch in range(ecfg.finetune_epochs):
        rng = rng_from(seed, "finetune", epoch)
        order = rng.permutation(len(train_videos))
        epoch_loss = 0.0
        for start in range(0, len(order), ecfg.finetune_batch_size):
            chunk = order[start : start + ecfg.finetune_batch_size]
            clips, labels = [], []
            for i in chunk:
                video = train_videos[int(i)]
                t0 = int(rng.integers(0, video.frames.shape[0] - cfg.clip_length + 1))
                clip = _resize_clip(video.frames[t0 : t0 + cfg.clip_length], cfg.crop_size)
                clips.append(clip)
                labels.append(video.class_id)
            batch = torch.from_numpy(np.stack(clips)).permute(0, 4, 1, 2, 3).contiguous()
            targets = torch.tensor(labels, dtype=torch.long)
            optimizer.zero_grad(set_to_none=True)
            loss = F.cross_entropy(classifier(model.encode(batch)), targets)
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(chunk)
        scheduler.step(epoch_loss / len(order))
    test_f, test_y, _ = clip_features(model, test_videos, ecfg.num_clips)
    return _scored_accuracy(classifier, torch.from_numpy(test_f), test_y)
