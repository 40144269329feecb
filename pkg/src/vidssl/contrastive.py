"""Four interchangeable contrastive frameworks over clip-pair projections.

simclr: InfoNCE against in-batch negatives.
moco:   InfoNCE against a FIFO queue of momentum-encoded keys.
byol:   negative cosine between a predicted latent and a momentum target.
simsiam: negative cosine between a predicted latent and a stop-gradient
         sibling projection; no momentum encoder.

All losses normalize their inputs, so they are invariant to positive
rescaling of any embedding.  Momentum branches never receive gradient.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractError
from .model import VideoSSLModel
from .seeding import torch_generator

FRAMEWORK_KINDS = ("simclr", "moco", "byol", "simsiam")

_EPS = 1e-12


@dataclass(frozen=True)
class FrameworkConfig:
    framework: str = "simclr"
    temperature: float = 1.0
    momentum_m: float = 0.998
    queue_size: int = 512
    symmetrize_byol: bool = False

    def validate(self, batch_size: int | None = None) -> None:
        if self.framework not in FRAMEWORK_KINDS:
            raise ConfigError(f"framework must be one of {FRAMEWORK_KINDS}, got {self.framework!r}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.momentum_m <= 1.0:
            raise ConfigError(f"momentum_m must be in [0,1], got {self.momentum_m}")
        if self.queue_size <= 0:
            raise ConfigError(f"queue_size must be positive, got {self.queue_size}")
        if self.framework == "moco" and batch_size is not None and self.queue_size % batch_size != 0:
            raise ConfigError(
                f"batch size {batch_size} must divide queue_size {self.queue_size}"
            )


def _normalize_rows(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms < _EPS).any()):
        raise ContractError("cannot cosine-normalize a zero vector")
    return x / norms


def cosine_sim(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of two vectors; rejects zero vectors."""
    if x.shape != y.shape or x.dim() != 1:
        raise ContractError(f"cosine_sim expects equal-length vectors, got {tuple(x.shape)} vs {tuple(y.shape)}")
    return (_normalize_rows(x.unsqueeze(0)) * _normalize_rows(y.unsqueeze(0))).sum()


def infonce_loss(
    z_batch: torch.Tensor,
    z_pos_batch: torch.Tensor,
    negatives: torch.Tensor | None = None,
    alpha: float = 1.0,
) -> torch.Tensor:
    """Mean InfoNCE over the batch.

    With ``negatives=None`` the denominator uses the in-batch negatives of
    each query (all other embeddings from either view, 2N-2 of them) plus
    the positive itself.  With an explicit negative bank (e.g. a queue) the
    denominator is the positive plus every bank row.
    """
    if alpha <= 0:
        raise ConfigError(f"temperature must be positive, got {alpha}")
    if z_batch.shape != z_pos_batch.shape or z_batch.dim() != 2:
        raise ContractError("query and positive batches must share shape (N, d)")
    n = z_batch.shape[0]
    q = _normalize_rows(z_batch)
    p = _normalize_rows(z_pos_batch)
    pos = (q * p).sum(dim=1, keepdim=True)
    if negatives is None:
        if n < 2:
            raise ContractError("in-batch negatives need a batch of at least 2 pairs")
        off_diag = ~torch.eye(n, dtype=torch.bool, device=q.device)
        neg = torch.cat(
            [(q @ q.t())[off_diag].view(n, n - 1), (q @ p.t())[off_diag].view(n, n - 1)],
            dim=1,
        )
    elif negatives.numel() == 0:
        neg = q.new_zeros((n, 0))
    else:
        neg = q @ _normalize_rows(negatives).t()
    logits = torch.cat([pos, neg], dim=1) / alpha
    targets = torch.zeros(n, dtype=torch.long, device=q.device)
    return F.cross_entropy(logits, targets, reduction="mean")


def negative_cosine_loss(q_batch: torch.Tensor, target_batch: torch.Tensor) -> torch.Tensor:
    """Minus the mean cosine similarity between rows; in [-1, 1]."""
    if q_batch.shape != target_batch.shape or q_batch.dim() != 2:
        raise ContractError("prediction and target batches must share shape (N, d)")
    return -(_normalize_rows(q_batch) * _normalize_rows(target_batch)).sum(dim=1).mean()


def _param_pairs(online, momentum) -> list[tuple[torch.Tensor, torch.Tensor]]:
    if isinstance(online, nn.Module) != isinstance(momentum, nn.Module):
        raise ContractError("momentum_update needs two modules or two tensor sequences")
    if isinstance(online, nn.Module):
        a = dict(online.named_parameters())
        b = dict(momentum.named_parameters())
        if a.keys() != b.keys():
            raise ContractError("online and momentum parameter structures differ")
        pairs = [(a[k], b[k]) for k in a]
    else:
        online, momentum = list(online), list(momentum)
        if len(online) != len(momentum):
            raise ContractError("online and momentum parameter lists differ in length")
        pairs = list(zip(online, momentum))
    for po, pm in pairs:
        if po.shape != pm.shape:
            raise ContractError(f"parameter shape mismatch {tuple(po.shape)} vs {tuple(pm.shape)}")
    return pairs


def momentum_update(online, momentum, m: float) -> None:
    """In-place exponential moving average: momentum <- m*momentum + (1-m)*online."""
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"momentum coefficient must be in [0,1], got {m}")
    with torch.no_grad():
        for po, pm in _param_pairs(online, momentum):
            pm.mul_(m).add_(po.detach(), alpha=1.0 - m)


@dataclass
class MoCoQueue:
    """Fixed-capacity FIFO ring of unit-norm key vectors."""

    capacity: int
    dim: int
    buffer: torch.Tensor = field(repr=False)
    cursor: int = 0
    fill: int = 0

    @classmethod
    def create(cls, capacity: int, dim: int) -> "MoCoQueue":
        return cls(capacity=capacity, dim=dim, buffer=torch.zeros(capacity, dim))

    def contents(self) -> torch.Tensor:
        """Stored keys, oldest first."""
        if self.fill < self.capacity:
            return self.buffer[: self.fill]
        return torch.cat([self.buffer[self.cursor :], self.buffer[: self.cursor]], dim=0)


def queue_push(queue: MoCoQueue, keys: torch.Tensor) -> MoCoQueue:
    """Overwrite the oldest entries with the given unit-norm keys."""
    if keys.dim() != 2 or keys.shape[1] != queue.dim:
        raise ContractError(f"keys must be (B, {queue.dim}), got {tuple(keys.shape)}")
    if bool((keys.norm(dim=1) - 1.0).abs().max() > 1e-4):
        raise ContractError("queue keys must be unit-norm")
    b = keys.shape[0]
    if queue.capacity % b != 0:
        raise ConfigError(f"batch size {b} must divide queue capacity {queue.capacity}")
    with torch.no_grad():
        queue.buffer[queue.cursor : queue.cursor + b] = keys.detach()
    queue.cursor = (queue.cursor + b) % queue.capacity
    queue.fill = min(queue.fill + b, queue.capacity)
    return queue


class ContrastiveFramework:
    """Base class: stateless SimCLR behaviour, subclasses add state."""

    kind = "simclr"
    needs_predictor = False

    def __init__(self, cfg: FrameworkConfig):
        cfg.validate()
        if cfg.framework != self.kind:
            raise ContractError(f"config names framework {cfg.framework!r} but state is {self.kind!r}")
        self.cfg = cfg

    def attach(self, model: VideoSSLModel, seed: int = 0) -> None:
        if self.needs_predictor and model.predictor is None:
            raise ContractError(f"{self.kind} requires a model built with a latent predictor")

    def contrastive_loss(
        self,
        model: VideoSSLModel,
        feats_a: torch.Tensor,
        feats_b: torch.Tensor,
        clips_a: torch.Tensor,
        clips_b: torch.Tensor,
    ) -> torch.Tensor:
        raise NotImplementedError

    def post_step(self, model: VideoSSLModel) -> None:
        """Called once per optimizer step, after the online update."""

    def state_dict(self) -> dict:
        return {}

    def load_state_dict(self, state: dict) -> None:
        pass


class SimCLRFramework(ContrastiveFramework):
    kind = "simclr"

    def contrastive_loss(self, model, feats_a, feats_b, clips_a, clips_b):
        z_a = model.project(feats_a)
        z_b = model.project(feats_b)
        return infonce_loss(z_a, z_b, negatives=None, alpha=self.cfg.temperature)


class _MomentumBranchMixin:
    """Frozen deep copies of encoder+projector, updated by moving average."""

    def _init_momentum(self, model: VideoSSLModel) -> None:
        self.momentum_encoder = copy.deepcopy(model.encoder)
        self.momentum_projector = copy.deepcopy(model.projector)
        for p in list(self.momentum_encoder.parameters()) + list(self.momentum_projector.parameters()):
            p.requires_grad_(False)

    def _momentum_forward(self, clips: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.momentum_projector(self.momentum_encoder(clips))

    def _update_momentum(self, model: VideoSSLModel) -> None:
        momentum_update(model.encoder, self.momentum_encoder, self.cfg.momentum_m)
        momentum_update(model.projector, self.momentum_projector, self.cfg.momentum_m)

    def _momentum_state(self) -> dict:
        return {
            "momentum_encoder": self.momentum_encoder.state_dict(),
            "momentum_projector": self.momentum_projector.state_dict(),
        }

    def _load_momentum_state(self, state: dict) -> None:
        self.momentum_encoder.load_state_dict(state["momentum_encoder"])
        self.momentum_projector.load_state_dict(state["momentum_projector"])


class MoCoFramework(_MomentumBranchMixin, ContrastiveFramework):
    kind = "moco"

    def attach(self, model, seed: int = 0):
        super().attach(model, seed)
        self._init_momentum(model)
        self.queue = MoCoQueue.create(self.cfg.queue_size, model.cfg.projector_out)
        self._pending_keys: torch.Tensor | None = None
        self._shuffle_gen = torch_generator(seed, "shuffle_bn")
        self._shuffle_bn = model.cfg.shuffle_bn

    def contrastive_loss(self, model, feats_a, feats_b, clips_a, clips_b):
        q = model.project(feats_a)
        with torch.no_grad():
            if self._shuffle_bn and clips_b.shape[0] > 1:
                perm = torch.randperm(clips_b.shape[0], generator=self._shuffle_gen)
                keys = self._momentum_forward(clips_b[perm])[torch.argsort(perm)]
            else:
                keys = self._momentum_forward(clips_b)
            keys = _normalize_rows(keys)
        loss = infonce_loss(q, keys, negatives=self.queue.contents(), alpha=self.cfg.temperature)
        self._pending_keys = keys.detach()
        return loss

    def post_step(self, model):
        self._update_momentum(model)
        if self._pending_keys is not None:
            queue_push(self.queue, self._pending_keys)
            self._pending_keys = None

    def state_dict(self):
        return {
            **self._momentum_state(),
            "queue_buffer": self.queue.buffer,
            "queue_cursor": self.queue.cursor,
            "queue_fill": self.queue.fill,
        }

    def load_state_dict(self, state):
        self._load_momentum_state(state)
        self.queue.buffer = state["queue_buffer"]
        self.queue.cursor = int(state["queue_cursor"])
        self.queue.fill = int(state["queue_fill"])


class BYOLFramework(_MomentumBranchMixin, ContrastiveFramework):
    kind = "byol"
    needs_predictor = True

    def attach(self, model, seed: int = 0):
        super().attach(model, seed)
        self._init_momentum(model)

    def contrastive_loss(self, model, feats_a, feats_b, clips_a, clips_b):
        def one_direction(feats_online, clips_target):
            q = model.predict_latent(model.project(feats_online))
            target = self._momentum_forward(clips_target)
            return negative_cosine_loss(q, target)

        loss = one_direction(feats_a, clips_b)
        if self.cfg.symmetrize_byol:
            loss = 0.5 * (loss + one_direction(feats_b, clips_a))
        return loss

    def post_step(self, model):
        self._update_momentum(model)

    def state_dict(self):
        return self._momentum_state()

    def load_state_dict(self, state):
        self._load_momentum_state(state)


class SimSiamFramework(ContrastiveFramework):
    kind = "simsiam"
    needs_predictor = True

    def contrastive_loss(self, model, feats_a, feats_b, clips_a, clips_b):
        z_a = model.project(feats_a)
        z_b = model.project(feats_b)

        def one_direction(z_online, z_target):
            return negative_cosine_loss(model.predict_latent(z_online), z_target.detach())

        loss = one_direction(z_a, z_b)
        if self.cfg.symmetrize_byol:
            loss = 0.5 * (loss + one_direction(z_b, z_a))
        return loss


_FRAMEWORK_CLASSES = {
    "simclr": SimCLRFramework,
    "moco": MoCoFramework,
    "byol": BYOLFramework,
    "simsiam": SimSiamFramework,
}


def make_framework(cfg: FrameworkConfig) -> ContrastiveFramework:
    cfg.validate()
    return _FRAMEWORK_CLASSES[cfg.framework](cfg)
