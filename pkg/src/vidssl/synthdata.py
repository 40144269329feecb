"""Synthetic moving-shape video datasets.

Each video shows one geometric shape (square, circle or triangle) drifting
with wrap-around motion over a reference background shared by all videos:
the red channel ramps with x, the green channel ramps with y, and the blue
channel is spatially flat but ramps with the frame index.  Any crop
therefore reveals where in the frame and when in the video it was cut,
which is what lets linear heads on per-clip features separate overlap-rate
classes.  The shape is filled with a zero-mean checkerboard that moves with
it, so it is visually loud without disturbing the channel means that carry
those references, and a per-video random texture is mixed in at low
contrast so videos remain visually distinct.  The class
determines both the shape kind and the drift direction, so the label is
recoverable from appearance and from motion.  Generation is a pure function
of (dataset seed, video id), bit-for-bit reproducible across platforms.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError
from .seeding import rng_from

DEFAULT_CLIP_LENGTH = 16

SHAPE_NAMES = ("square", "circle", "triangle")


@dataclass(frozen=True)
class DatasetSpec:
    """Sizing and seeding of a procedurally generated dataset."""

    num_classes: int = 8
    videos_per_class: int = 64
    num_frames: int = 58
    height: int = 32
    width: int = 32
    channels: int = 3
    seed: int = 7
    train_fraction: float = 0.75

    def validate(self, min_clip_length: int = DEFAULT_CLIP_LENGTH) -> None:
        for name in ("num_classes", "videos_per_class", "num_frames", "height", "width", "channels"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"DatasetSpec.{name} must be positive, got {getattr(self, name)}")
        if self.channels != 3:
            raise ConfigError(f"DatasetSpec.channels must be 3, got {self.channels}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"DatasetSpec.train_fraction must be in (0,1), got {self.train_fraction}")
        if self.num_frames < 2 * min_clip_length:
            raise ConfigError(
                f"DatasetSpec.num_frames={self.num_frames} is shorter than twice the "
                f"clip length ({min_clip_length}); no room for temporal jitter"
            )

    @property
    def num_videos(self) -> int:
        return self.num_classes * self.videos_per_class


@dataclass(frozen=True)
class MotionParams:
    """Per-video generative parameters; rendering is pure in these."""

    shape_kind: int  # index into SHAPE_NAMES
    start_x: float
    start_y: float
    velocity_x: float  # pixels per frame, wraps at borders
    velocity_y: float
    size: float  # shape half-extent in pixels
    color: tuple[float, float, float]  # per-channel amplitude of the shape's fill pattern
    texture_key: int  # seeds the static background texture


@dataclass
class VideoSample:
    frames: np.ndarray = field(repr=False)  # (T, H, W, C) float32 in [0, 1]
    class_id: int = 0
    video_id: int = 0
    motion: MotionParams | None = None


def _wrapped_delta(coords: np.ndarray, center: np.ndarray, extent: int) -> np.ndarray:
    """Signed displacement on a circle of circumference ``extent``."""
    return (coords - center + extent / 2.0) % extent - extent / 2.0


def _shape_mask(kind: int, dy: np.ndarray, dx: np.ndarray, size: float) -> np.ndarray:
    if kind == 0:  # square
        return np.maximum(np.abs(dy), np.abs(dx)) <= size
    if kind == 1:  # circle
        return dy * dy + dx * dx <= size * size
    if kind == 2:  # triangle, apex at the top
        s = 1.3 * size  # widen so the pixel area is comparable to the others
        return (dy >= -s) & (dy <= s) & (2.0 * np.abs(dx) <= (dy + s))
    raise ConfigError(f"unknown shape kind {kind}")


@lru_cache(maxsize=8)
def _reference_layers(num_frames: int, height: int, width: int) -> np.ndarray:
    """Position/time reference patterns shared by every video, (T, H, W, 3).

    Red ramps with x and green ramps with y, so even the pooled mean
    intensity of a window reveals where it sits in the frame; the window
    means are unchanged by 90-degree rotations, which keeps that cue intact
    under the rotation augmentation.  Blue is spatially flat and ramps with
    the frame index, so a clip's average blue level reveals when it was cut
    and its blue range reveals the playback stride.  Without such anchors
    the scenes would be statistically identical across positions and times
    and no per-clip feature could predict where or when a crop was taken.
    The shape's checker fill is zero-mean (see ``render_video``), so all
    three references survive occlusion; blue gets the widest span -- and a
    slimmer checker amplitude -- because the time axis is the hardest to
    resolve.  All ramps keep enough headroom that the scene never clips.
    """
    period = float(max(num_frames, 16))
    x = np.arange(width, dtype=np.float64)
    y = np.arange(height, dtype=np.float64)
    t = np.arange(num_frames, dtype=np.float64)

    def ramp(phase: np.ndarray, span: float, lo: float, hi: float) -> np.ndarray:
        return lo + (hi - lo) * (phase % span) / (span - 1.0)

    layers = np.empty((num_frames, height, width, 3), dtype=np.float32)
    layers[..., 0] = ramp(x, float(width), 0.30, 0.70)[None, None, :]
    layers[..., 1] = ramp(y, float(height), 0.30, 0.70)[None, :, None]
    layers[..., 2] = ramp(t, period, 0.22, 0.74)[:, None, None]
    layers.setflags(write=False)
    return layers


def _background(texture_key: int, spec: DatasetSpec) -> np.ndarray:
    """Static per-video residual texture, (H, W, C), weaker in blue."""
    rng = rng_from(texture_key, "texture")
    cells = 8
    amplitude = np.array([0.04, 0.04, 0.04], dtype=np.float64)[: spec.channels]
    coarse = rng.uniform(-1.0, 1.0, size=(cells, cells, spec.channels)) * amplitude
    iy = (np.arange(spec.height) * cells) // spec.height
    ix = (np.arange(spec.width) * cells) // spec.width
    return coarse[iy][:, ix].astype(np.float32)


def sample_motion(class_id: int, spec: DatasetSpec, rng: np.random.Generator) -> MotionParams:
    """Draw per-video motion parameters with the class signature baked in."""
    angle = 2.0 * math.pi * class_id / spec.num_classes + rng.uniform(-0.2, 0.2)
    speed = rng.uniform(0.8, 1.2)
    return MotionParams(
        shape_kind=class_id % len(SHAPE_NAMES),
        start_x=float(rng.uniform(0, spec.width)),
        start_y=float(rng.uniform(0, spec.height)),
        velocity_x=float(speed * math.cos(angle)),
        velocity_y=float(speed * math.sin(angle)),
        size=float(rng.uniform(4.5, 6.0)),
        # blue amplitude stays under the headroom left by its wider ramp
        color=(
            float(rng.uniform(0.18, 0.26)),
            float(rng.uniform(0.18, 0.26)),
            float(rng.uniform(0.12, 0.18)),
        ),
        texture_key=int(rng.integers(0, 2**62)),
    )


def render_video(class_id: int, motion: MotionParams, spec: DatasetSpec) -> np.ndarray:
    """Render all frames; position at frame t is start + t * velocity (wrapped).

    The shape is filled with a high-contrast checkerboard that translates
    with it, with per-channel amplitude ``color``.  The pattern sums to
    ~zero over the shape, so window mean intensities -- which carry the
    position/time references -- are left almost untouched, while the shape
    itself stays loud: its outline gives the kind, the moving pattern gives
    strong motion energy, and the amplitudes identify the video.
    """
    if not 0 <= class_id < spec.num_classes:
        raise ConfigError(f"class_id {class_id} out of range [0, {spec.num_classes})")
    t = np.arange(spec.num_frames, dtype=np.float64)
    cx = (motion.start_x + t * motion.velocity_x) % spec.width
    cy = (motion.start_y + t * motion.velocity_y) % spec.height
    yy = np.arange(spec.height, dtype=np.float64)[None, :, None]
    xx = np.arange(spec.width, dtype=np.float64)[None, None, :]
    dy = _wrapped_delta(yy, cy[:, None, None], spec.height)
    dx = _wrapped_delta(xx, cx[:, None, None], spec.width)
    mask = _shape_mask(motion.shape_kind, dy, dx, motion.size)
    checker = ((np.floor(dx / 2.0) + np.floor(dy / 2.0)) % 2.0) * 2.0 - 1.0

    frames = _reference_layers(spec.num_frames, spec.height, spec.width) + _background(motion.texture_key, spec)[None]
    frames[mask] += checker[mask, None].astype(np.float32) * np.asarray(motion.color, dtype=np.float32)
    np.clip(frames, 0.0, 1.0, out=frames)
    return frames


def make_dataset(spec: DatasetSpec, min_clip_length: int = DEFAULT_CLIP_LENGTH) -> list[VideoSample]:
    """Generate the full dataset; identical spec gives identical samples."""
    spec.validate(min_clip_length)
    samples = []
    for class_id in range(spec.num_classes):
        for j in range(spec.videos_per_class):
            video_id = class_id * spec.videos_per_class + j
            rng = rng_from(spec.seed, video_id)
            motion = sample_motion(class_id, spec, rng)
            samples.append(
                VideoSample(
                    frames=render_video(class_id, motion, spec),
                    class_id=class_id,
                    video_id=video_id,
                    motion=motion,
                )
            )
    return samples


def is_train_video(spec: DatasetSpec, video_id: int) -> bool:
    """Split membership as a pure function of (spec, video_id)."""
    per_class = int(round(spec.videos_per_class * spec.train_fraction))
    if spec.videos_per_class >= 2:
        # keep both splits nonempty even for very small datasets
        per_class = min(max(per_class, 1), spec.videos_per_class - 1)
    return video_id % spec.videos_per_class < per_class


def split_dataset(dataset: list[VideoSample], spec: DatasetSpec) -> tuple[list[VideoSample], list[VideoSample]]:
    """Stratified disjoint train/test partition."""
    train = [s for s in dataset if is_train_video(spec, s.video_id)]
    test = [s for s in dataset if not is_train_video(spec, s.video_id)]
    return train, test


def export_dataset(dataset: list[VideoSample], out_dir: str) -> str:
    """Write one .npy tensor per video plus a plain-text manifest.

    Manifest line format: ``video_id class_id relative_path TxHxWxC``.
    """
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for sample in dataset:
        rel = f"video_{sample.video_id:05d}.npy"
        np.save(os.path.join(out_dir, rel), sample.frames)
        shape = "x".join(str(d) for d in sample.frames.shape)
        lines.append(f"{sample.video_id} {sample.class_id} {rel} {shape}")
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


def load_dataset(in_dir: str) -> list[VideoSample]:
    """Read a directory written by :func:`export_dataset`."""
    manifest = os.path.join(in_dir, "manifest.txt")
    samples = []
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            vid, cls, rel, shape = line.split()
            frames = np.load(os.path.join(in_dir, rel))
            expected = tuple(int(d) for d in shape.split("x"))
            if frames.shape != expected:
                raise ConfigError(f"manifest shape {expected} does not match {frames.shape} for {rel}")
            samples.append(VideoSample(frames=frames, class_id=int(cls), video_id=int(vid)))
    return samples
