"""Encoder, projection/prediction MLPs and pretext classification heads.

The encoder is a small 4-stage 3D CNN; its feature is the concatenation of
global average and global max pooling, so the feature width is twice the
last stage width.  The projector output feeds the contrastive losses only;
downstream evaluation reads the pooled encoder feature directly.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, ContractError
from .seeding import torch_generator

PRETEXT_HEADS = ("spatial", "temporal", "playback", "rotation")


@dataclass(frozen=True)
class EncoderConfig:
    channel_widths: tuple[int, ...] = (16, 32, 64, 128)
    clip_length: int = 16
    crop_size: int = 16
    feature_dim: int = 256
    projector_hidden: int = 256
    projector_out: int = 64
    predictor_hidden: int = 64
    shuffle_bn: bool = False

    def validate(self) -> None:
        for name in ("clip_length", "crop_size", "feature_dim", "projector_hidden", "projector_out", "predictor_hidden"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"EncoderConfig.{name} must be positive, got {getattr(self, name)}")
        if not self.channel_widths or any(w <= 0 for w in self.channel_widths):
            raise ConfigError(f"channel_widths must be positive: {self.channel_widths}")
        if self.projector_out > self.projector_hidden:
            raise ConfigError(
                f"projector_out {self.projector_out} must not exceed projector_hidden {self.projector_hidden}"
            )
        if self.feature_dim != 2 * self.channel_widths[-1]:
            raise ConfigError(
                f"feature_dim must be twice the last stage width (avg+max pooling), "
                f"expected {2 * self.channel_widths[-1]}, got {self.feature_dim}"
            )
        if self.clip_length < 8 or self.crop_size < 8:
            raise ConfigError("clip_length and crop_size must be at least 8")


class Encoder3d(nn.Module):
    """Conv3d stages with batch norm; returns pooled features of width 2*last."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        in_ch = 3
        for i, out_ch in enumerate(cfg.channel_widths):
            stride = (1, 2, 2) if i == 0 else (2, 2, 2)
            layers += [
                nn.Conv3d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1),
                nn.BatchNorm3d(out_ch),
                nn.ReLU(inplace=True),
            ]
            in_ch = out_ch
        self.stages = nn.Sequential(*layers)
        # standardize the pooled feature (no learned affine): post-ReLU pooled
        # activations have large per-dim mean offsets and wildly uneven scales,
        # which the downstream linear consumers would otherwise spend most of a
        # short schedule compensating for; at inference this is a fixed affine
        # map, so probes and pretext heads stay linear readouts
        self.feature_norm = nn.BatchNorm1d(2 * cfg.channel_widths[-1], affine=False)

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        if clips.dim() != 5 or clips.shape[1] != 3:
            raise ContractError(f"expected clips of shape (B, 3, T, H, W), got {tuple(clips.shape)}")
        if clips.shape[2] != self.cfg.clip_length or clips.shape[3] != self.cfg.crop_size or clips.shape[4] != self.cfg.crop_size:
            raise ContractError(
                f"clip dims {tuple(clips.shape[2:])} do not match configured "
                f"({self.cfg.clip_length}, {self.cfg.crop_size}, {self.cfg.crop_size})"
            )
        x = self.stages(clips)
        avg = x.mean(dim=(2, 3, 4))
        mx = x.amax(dim=(2, 3, 4))
        return self.feature_norm(torch.cat([avg, mx], dim=1))


class ProjectionHead(nn.Module):
    """Two-layer MLP with hidden-layer batch norm."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.BatchNorm1d(hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.net(y)


class LatentPredictor(nn.Module):
    """MLP mapping a projection to a prediction of the same width."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.BatchNorm1d(hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, dim),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class HeadSet(nn.Module):
    """Linear pretext heads; overlap heads read concatenated pair features."""

    def __init__(self, feature_dim: int, n_spatial: int, n_temporal: int, n_playback: int):
        super().__init__()
        self.feature_dim = feature_dim
        self.spatial = nn.Linear(2 * feature_dim, n_spatial)
        self.temporal = nn.Linear(2 * feature_dim, n_temporal)
        self.playback = nn.Linear(feature_dim, n_playback)
        self.rotation = nn.Linear(feature_dim, 4)

    def classify(self, head_id: str, features: torch.Tensor) -> torch.Tensor:
        if head_id not in PRETEXT_HEADS:
            raise ContractError(f"unknown head {head_id!r}, expected one of {PRETEXT_HEADS}")
        head = getattr(self, head_id)
        if features.shape[-1] != head.in_features:
            raise ContractError(
                f"{head_id} head expects width {head.in_features}, got {features.shape[-1]}"
            )
        return head(features)


class VideoSSLModel(nn.Module):
    """Encoder + projector + pretext heads, with an optional latent predictor."""

    def __init__(self, cfg: EncoderConfig, n_spatial: int, n_temporal: int, n_playback: int, with_predictor: bool):
        cfg.validate()
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder3d(cfg)
        self.projector = ProjectionHead(cfg.feature_dim, cfg.projector_hidden, cfg.projector_out)
        self.predictor = LatentPredictor(cfg.projector_out, cfg.predictor_hidden) if with_predictor else None
        self.heads = HeadSet(cfg.feature_dim, n_spatial, n_temporal, n_playback)

    def encode(self, clips: torch.Tensor) -> torch.Tensor:
        return self.encoder(clips)

    def project(self, y: torch.Tensor) -> torch.Tensor:
        if y.shape[-1] != self.cfg.feature_dim:
            raise ContractError(f"project expects width {self.cfg.feature_dim}, got {y.shape[-1]}")
        return self.projector(y)

    def predict_latent(self, z: torch.Tensor) -> torch.Tensor:
        if self.predictor is None:
            raise ContractError("latent predictor is only available under BYOL/SimSiam")
        return self.predictor(z)

    def classify_pretext(self, head_id: str, features: torch.Tensor) -> torch.Tensor:
        return self.heads.classify(head_id, features)


def _init_linear_or_conv(weight: torch.Tensor, bias: torch.Tensor | None, generator: torch.Generator) -> None:
    nn.init.kaiming_uniform_(weight, a=math.sqrt(5), generator=generator)
    if bias is not None:
        fan_in = nn.init._calculate_fan_in_and_fan_out(weight)[0]
        bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
        nn.init.uniform_(bias, -bound, bound, generator=generator)


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Re-initialize weights from an explicit generator, in module order."""
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.Linear)):
            _init_linear_or_conv(m.weight, m.bias, generator)
        elif isinstance(m, (nn.BatchNorm3d, nn.BatchNorm1d)):
            if m.affine:
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            m.reset_running_stats()


CARRIER_BIASES = (1.0, 0.5, 0.0, -0.5, -1.0)


def _carrier_variants(n_in: int, kernel_size: tuple[int, int, int]) -> list[tuple[dict[int, torch.Tensor], float]]:
    """Filter taps and batch-norm biases for the final carrier fan-out.

    Each variant is a sparse conv filter (input channel -> 3D tap tensor)
    plus the bias at which its ReLU hinges.  Flat taps respond to the local
    mean of one channel; slope taps to its temporal derivative (which scales
    with the playback stride); cross taps to sums/differences of two
    channels, giving hinges over joint statistics.
    """
    kt, kh, kw = kernel_size
    flat = torch.full((kt, kh, kw), 1.0 / (kt * kh * kw))
    slope = torch.zeros(kt, kh, kw)
    if kt > 1:
        slope[0] = -1.0 / (2 * kh * kw)
        slope[-1] = 1.0 / (2 * kh * kw)
    variants: list[tuple[dict[int, torch.Tensor], float]] = []
    last = n_in - 1
    for sign in (1.0, -1.0):
        for beta in CARRIER_BIASES + (1.5, -1.5):
            for c in range(n_in):
                variants.append(({c: sign * flat}, beta))
            if n_in >= 3:
                # last channel minus the mean of the others: immune to the
                # global brightness jitter, which is larger than the level
                # differences the temporal head must resolve
                variants.append(
                    ({0: -0.5 * sign * flat, 1: -0.5 * sign * flat, last: sign * flat}, beta)
                )
    for sign in (1.0, -1.0):
        for beta in (0.5, 0.0, -0.5):
            for c in range(n_in):
                variants.append(({c: sign * slope}, beta))
            if n_in >= 2:  # joint position hinges over the first two channels
                variants.append(({0: sign * flat, 1: sign * flat}, beta))
                variants.append(({0: sign * flat, 1: -sign * flat}, beta))
            # joint level/derivative hinges over the last channel
            variants.append(({last: sign * (flat + slope)}, beta))
            variants.append(({last: sign * (flat - slope)}, beta))
            if n_in >= 3:  # brightness-immune level/derivative combinations
                variants.append(
                    ({0: -0.5 * sign * flat, 1: -0.5 * sign * flat, last: sign * (flat + slope)}, beta)
                )
                variants.append(
                    ({0: -0.5 * sign * flat, 1: -0.5 * sign * flat, last: sign * (flat - slope)}, beta)
                )
    return variants


def install_mean_carriers(encoder: Encoder3d) -> int:
    """Deterministically overwrite the leading channels of each stage so they
    forward local channel means from the input to the pooled feature.

    Random init buries the smooth per-channel intensity profiles of a clip
    (global statistics such as "how bright is red on average here") inside
    high-frequency mixtures, and a short pretraining budget cannot dig them
    back out.  Carrier channels form a low-pass path: channel c of each
    stage just averages channel c of the previous stage, so global pooling
    sees a near-linear image of every input channel's window mean.  The
    final stage fans each carrier out across flat, temporal-slope and
    cross-channel taps at several batch-norm biases, which turns the ReLUs
    into hinges at different quantiles of those statistics -- a small
    piecewise-linear basis the linear pretext heads can combine.

    The carrier rows are a fixed filter bank: their gradients are zeroed by
    hooks, as with fixed scattering/Fourier front-ends.  Left trainable,
    the other objectives erode them faster than the short schedule can
    rebuild (the eroded encoder measurably loses overlap decodability).
    Batch-norm running statistics still track the data, and every other
    channel remains free to learn.

    Returns the number of final-stage channels used by carriers.
    """
    def freeze_rows(param: torch.Tensor | None, rows: int) -> None:
        if param is None:
            return

        def zero_leading(grad: torch.Tensor) -> torch.Tensor:
            out = grad.clone()
            out[:rows] = 0.0
            return out

        param.register_hook(zero_leading)

    convs = [m for m in encoder.stages if isinstance(m, nn.Conv3d)]
    bns = [m for m in encoder.stages if isinstance(m, nn.BatchNorm3d)]
    n_in = convs[0].in_channels
    with torch.no_grad():
        for conv, bn in zip(convs[:-1], bns[:-1]):
            k = min(n_in, conv.out_channels)
            for c in range(k):
                conv.weight[c].zero_()
                conv.weight[c, c] = 1.0 / conv.weight[c, c].numel()
                if conv.bias is not None:
                    conv.bias[c] = 0.0
                bn.bias[c] = 1.0  # keep the carrier mostly on the linear side of ReLU
            for p in (conv.weight, conv.bias, bn.weight, bn.bias):
                freeze_rows(p, k)
            n_in = k
        conv, bn = convs[-1], bns[-1]
        for out, (taps, beta) in enumerate(_carrier_variants(n_in, conv.kernel_size)):
            if out >= conv.out_channels:
                break
            conv.weight[out].zero_()
            for c, tap in taps.items():
                conv.weight[out, c] = tap
            if conv.bias is not None:
                conv.bias[out] = 0.0
            # gamma=2 doubles the feature scale, which quadruples the gradient
            # the linear heads receive; scaling beta with it keeps each hinge
            # at the same quantile of the carried statistic
            bn.weight[out] = 2.0
            bn.bias[out] = 2.0 * beta
    used = min(len(_carrier_variants(n_in, conv.kernel_size)), conv.out_channels)
    for p in (conv.weight, conv.bias, bn.weight, bn.bias):
        freeze_rows(p, used)
    return used


def build_model(
    cfg: EncoderConfig,
    n_spatial: int,
    n_temporal: int,
    n_playback: int,
    with_predictor: bool,
    seed: int,
) -> VideoSSLModel:
    """Construct and seed a model; the trunk/head init stream is independent
    of whether a predictor exists, so runs differing only in framework start
    from identical encoder weights."""
    model = VideoSSLModel(cfg, n_spatial, n_temporal, n_playback, with_predictor)
    trunk_gen = torch_generator(seed, "model")
    for part in (model.encoder, model.projector, model.heads):
        init_parameters(part, trunk_gen)
    n_carrier = install_mean_carriers(model.encoder)
    with torch.no_grad():
        first_linear = model.projector.net[0]
        half = cfg.channel_widths[-1]
        # start the projector blind to the carrier channels (both pooling
        # branches): the contrastive objective then builds its invariances
        # from the free channels instead of erasing the overlap statistics
        first_linear.weight[:, :n_carrier] = 0.0
        first_linear.weight[:, half : half + n_carrier] = 0.0
    for head in (model.heads.spatial, model.heads.temporal, model.heads.playback, model.heads.rotation):
        # zero-init so early gradients follow informative features instead of
        # first unlearning random logits; matters at a short step budget
        nn.init.zeros_(head.weight)
        nn.init.zeros_(head.bias)
    if model.predictor is not None:
        init_parameters(model.predictor, torch_generator(seed, "predictor"))
    return model


def config_fingerprint(payload: str) -> str:
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(
    path: str,
    model: nn.Module,
    optimizer: torch.optim.Optimizer | None,
    step: int,
    framework_name: str,
    config_hash: str,
    framework_state: dict | None = None,
) -> None:
    """Serialized parameter blob plus a human-readable sidecar manifest."""
    payload = {
        "model": model.state_dict(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "framework_state": framework_state,
        "step": step,
        "framework_name": framework_name,
        "config_hash": config_hash,
    }
    torch.save(payload, path)
    with open(path + ".manifest.txt", "w", encoding="utf-8") as fh:
        fh.write(f"config_hash: {config_hash}\nstep: {step}\nframework: {framework_name}\n")


def load_checkpoint(path: str, model: nn.Module, optimizer: torch.optim.Optimizer | None = None) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model.load_state_dict(payload["model"])
    if optimizer is not None and payload.get("optimizer") is not None:
        optimizer.load_state_dict(payload["optimizer"])
    return payload
