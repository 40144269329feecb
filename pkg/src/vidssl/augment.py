"""Clip-pair augmentation with prescribed spatio-temporal overlap.

A pair is built in two steps: sample the first clip's crop box and frame
window freely, then draw target spatial/temporal overlap rates from small
candidate lists and solve integer offsets that realize those rates against
the first clip.  Both clips share crop size and playback rate, so the
achieved rates are exact up to integer rounding.  Photometric jitter and
90-degree rotation are applied per clip afterwards and never move the
solved geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import ConfigError, ContractError, PlacementError, SampleGenerationError
from .synthdata import VideoSample


@dataclass(frozen=True)
class CropBox:
    x0: int
    y0: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h

    def validate(self, frame_h: int, frame_w: int) -> None:
        if self.w <= 0 or self.h <= 0:
            raise ContractError(f"crop extents must be positive: {self}")
        if self.x0 < 0 or self.y0 < 0 or self.x0 + self.w > frame_w or self.y0 + self.h > frame_h:
            raise PlacementError(f"crop {self} exceeds frame {frame_h}x{frame_w}")


@dataclass(frozen=True)
class ClipWindow:
    t0: int
    length: int
    playback_rate: int

    @property
    def span(self) -> int:
        """Number of source frames covered, length * playback_rate."""
        return self.length * self.playback_rate

    def validate(self, num_frames: int) -> None:
        if self.t0 < 0 or self.length <= 0 or self.playback_rate <= 0:
            raise ContractError(f"bad window {self}")
        if self.t0 + self.span > num_frames:
            raise ContractError(f"window {self} overruns video of {num_frames} frames")


@dataclass(frozen=True)
class OverlapCandidates:
    spatial_rates: tuple[float, ...]
    temporal_rates: tuple[float, ...]

    def validate(self) -> None:
        for name, rates in (("spatial_rates", self.spatial_rates), ("temporal_rates", self.temporal_rates)):
            if not rates:
                raise ConfigError(f"{name} must be non-empty")
            if any(not 0.0 < r <= 1.0 for r in rates):
                raise ConfigError(f"{name} entries must lie in (0, 1]: {rates}")
            if any(b <= a for a, b in zip(rates, rates[1:])):
                raise ConfigError(f"{name} must be strictly increasing: {rates}")
            # Candidate lists end at (or within rounding of) full overlap; the
            # common 3-candidate set uses 0.99 as its top rate.
            if rates[-1] < 0.95:
                raise ConfigError(f"{name} must end at full overlap (>= 0.95): {rates}")


@dataclass(frozen=True)
class PhotometricParams:
    """Per-clip jitter ranges; zero ranges make the op an exact identity."""

    brightness: float = 0.0  # additive shift drawn from [-brightness, brightness]
    channel_gain: float = 0.01  # per-channel gain drawn from [1-g, 1+g]
    blur_prob: float = 0.3
    blur_sigma: tuple[float, float] = (0.1, 0.5)
    max_rotation_deg: float = 10.0


@dataclass(frozen=True)
class PretextLabels:
    """Targets for the classification heads; None when the task is disabled."""

    spatial_overlap_class: int | None
    temporal_overlap_class: int | None
    playback_class: int | None
    rotation_class: int | None
    rotation_class_b: int | None
    achieved_spatial_rate: float
    achieved_temporal_rate: float


@dataclass
class AugmentedPair:
    clip_a: np.ndarray = field(repr=False)  # (clip_length, crop_size, crop_size, C) float32
    clip_b: np.ndarray = field(repr=False)
    labels: PretextLabels = None
    boxes: tuple[CropBox, CropBox] = None
    windows: tuple[ClipWindow, ClipWindow] = None


@dataclass(frozen=True)
class AugmentConfig:
    spatial_rates: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)
    temporal_rates: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)
    playback_rates: tuple[int, ...] = (1, 2)
    clip_length: int = 16
    crop_size: int = 16  # network input side after resize
    spatial_tolerance: float = 0.02
    max_retries: int = 16
    enable_playback: bool = True
    enable_rotation: bool = True
    enable_stor: bool = True
    crop_min_side: int = 20
    crop_max_side: int = 20
    classify_second_clip: bool = False
    photometric: PhotometricParams = field(default_factory=PhotometricParams)

    @property
    def candidates(self) -> OverlapCandidates:
        return OverlapCandidates(tuple(self.spatial_rates), tuple(self.temporal_rates))

    def validate(self, frame_h: int, frame_w: int, num_frames: int) -> None:
        self.candidates.validate()
        if not self.playback_rates or any(r <= 0 for r in self.playback_rates):
            raise ConfigError(f"playback_rates must be positive integers: {self.playback_rates}")
        if any(b <= a for a, b in zip(self.playback_rates, self.playback_rates[1:])):
            raise ConfigError(f"playback_rates must be strictly increasing: {self.playback_rates}")
        if self.clip_length < 2:
            raise ConfigError(f"clip_length must be at least 2, got {self.clip_length}")
        if self.crop_size < 4:
            raise ConfigError(f"crop_size must be at least 4, got {self.crop_size}")
        if not 0 < self.crop_min_side <= self.crop_max_side:
            raise ConfigError(f"need 0 < crop_min_side <= crop_max_side, got {self.crop_min_side}..{self.crop_max_side}")
        if self.crop_max_side > min(frame_h, frame_w):
            raise ConfigError(
                f"crop_max_side {self.crop_max_side} exceeds frame side {min(frame_h, frame_w)}"
            )
        if not 0.0 < self.spatial_tolerance < 1.0:
            raise ConfigError(f"spatial_tolerance must be in (0,1), got {self.spatial_tolerance}")
        if self.max_retries < 1:
            raise ConfigError(f"max_retries must be >= 1, got {self.max_retries}")
        min_temporal = self.temporal_rates[0]
        for rate in self.playback_rates:
            span = self.clip_length * rate
            if span > num_frames:
                raise ConfigError(
                    f"playback rate {rate} needs {span} source frames but videos have {num_frames}"
                )
            max_offset = _round_half_up((1.0 - min_temporal) * span)
            if max_offset > num_frames - span:
                raise ConfigError(
                    f"temporal overlap {min_temporal} at playback rate {rate} needs an offset of "
                    f"{max_offset} frames but only {num_frames - span} are available; use longer "
                    f"videos, larger overlap rates, or smaller playback rates"
                )
        if self.enable_stor:
            for rate in self.spatial_rates:
                if not _feasible_first_geometries(
                    self.crop_min_side, self.crop_max_side, rate, self.spatial_tolerance, frame_h, frame_w
                ):
                    raise ConfigError(
                        f"spatial overlap {rate} cannot be placed in a {frame_h}x{frame_w} frame with "
                        f"crop sides {self.crop_min_side}..{self.crop_max_side}; use larger frames, "
                        f"smaller crops, or different candidate rates"
                    )


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def rect_overlap_rate(a: CropBox, b: CropBox) -> float:
    """Intersection area over box area for equal-size boxes."""
    if a.area != b.area:
        raise ContractError(f"overlap rate needs equal-area boxes, got {a.area} vs {b.area}")
    ix = max(0, min(a.x0 + a.w, b.x0 + b.w) - max(a.x0, b.x0))
    iy = max(0, min(a.y0 + a.h, b.y0 + b.h) - max(a.y0, b.y0))
    return (ix * iy) / a.area


def interval_overlap_rate(a: ClipWindow, b: ClipWindow) -> float:
    """Shared covered-frame interval over span for equal-span windows."""
    if a.span != b.span:
        raise ContractError(f"overlap rate needs equal spans, got {a.span} vs {b.span}")
    shared = max(0, min(a.t0 + a.span, b.t0 + b.span) - max(a.t0, b.t0))
    return shared / a.span


def _solve_abs_dy(target_rate: float, w: int, h: int, abs_dx: int) -> int:
    """|dy| solving (w-|dx|)(h-|dy|) = target_rate*w*h, rounded to nearest."""
    return _round_half_up(h - target_rate * w * h / (w - abs_dx))


def solve_spatial_offset(target_rate: float, w: int, h: int, rng: np.random.Generator) -> tuple[int, int]:
    """Signed integer offsets (dx, dy) with (w-|dx|)(h-|dy|) ~= target_rate*w*h.

    |dx| is uniform over its feasible range, |dy| solved and rounded to the
    nearest integer, both signs equiprobable.
    """
    if not 0.0 < target_rate <= 1.0:
        raise ConfigError(f"target overlap rate must be in (0, 1], got {target_rate}")
    if w < 2 or h < 2:
        raise ConfigError(f"crop extents too small to offset: {w}x{h}")
    max_dx = int(math.floor(w * (1.0 - target_rate)))
    abs_dx = int(rng.integers(0, max_dx + 1))
    abs_dy = _solve_abs_dy(target_rate, w, h, abs_dx)
    sign_x = 1 if int(rng.integers(0, 2)) == 0 else -1
    sign_y = 1 if int(rng.integers(0, 2)) == 0 else -1
    return sign_x * abs_dx, sign_y * abs_dy


@lru_cache(maxsize=1024)
def _locus_offsets(w: int, h: int, target_rate: float, tolerance: float) -> tuple[tuple[int, int], ...]:
    """Signed (dx, dy) on the solved offset locus achieving the rate within tolerance.

    Frame-independent: feasibility against frame borders is checked by the
    callers.  Cached because the locus depends only on crop size and rate.
    """
    offsets = []
    max_dx = int(math.floor(w * (1.0 - target_rate)))
    for abs_dx in range(max_dx + 1):
        abs_dy = _solve_abs_dy(target_rate, w, h, abs_dx)
        achieved = max(0, w - abs_dx) * max(0, h - abs_dy) / (w * h)
        if abs(achieved - target_rate) > tolerance:
            continue
        for sign_x in (1,) if abs_dx == 0 else (1, -1):
            for sign_y in (1,) if abs_dy == 0 else (1, -1):
                offsets.append((sign_x * abs_dx, sign_y * abs_dy))
    return tuple(offsets)


def feasible_spatial_placements(
    first: CropBox, target_rate: float, tolerance: float, frame_dims: tuple[int, int]
) -> list[CropBox]:
    """All in-frame second crops on the solved offset locus within tolerance.

    Drawing uniformly from this set gives the same conditional distribution
    as rejection-sampling offsets until one fits, but never fails when a
    valid placement exists.
    """
    frame_h, frame_w = frame_dims
    placements = []
    for dx, dy in _locus_offsets(first.w, first.h, target_rate, tolerance):
        x0 = first.x0 + dx
        y0 = first.y0 + dy
        if 0 <= x0 and 0 <= y0 and x0 + first.w <= frame_w and y0 + first.h <= frame_h:
            placements.append(CropBox(x0, y0, first.w, first.h))
    return placements


@lru_cache(maxsize=1024)
def _feasible_first_geometries(
    min_side: int, max_side: int, target_rate: float, tolerance: float, frame_h: int, frame_w: int
) -> tuple[tuple[int, int, int], ...]:
    """All (side, x0, y0) first crops that admit at least one second placement.

    Drawing uniformly from this set equals resampling the first crop until a
    placement exists, without the failure probability of a bounded retry loop.
    """
    geometries = []
    for side in range(min_side, max_side + 1):
        offsets = _locus_offsets(side, side, target_rate, tolerance)
        max_x = frame_w - side
        max_y = frame_h - side
        for x0 in range(max_x + 1):
            for y0 in range(max_y + 1):
                if any(0 <= x0 + dx <= max_x and 0 <= y0 + dy <= max_y for dx, dy in offsets):
                    geometries.append((side, x0, y0))
    return tuple(geometries)


def place_second_crop(first: CropBox, offset: tuple[int, int], frame_dims: tuple[int, int]) -> CropBox:
    """Translate the first box by (dx, dy); raises PlacementError if it leaves the frame."""
    frame_h, frame_w = frame_dims
    dx, dy = offset
    box = CropBox(first.x0 + dx, first.y0 + dy, first.w, first.h)
    box.validate(frame_h, frame_w)
    return box


def solve_temporal_offset(target_rate: float, span: int, T: int, t0_first: int, rng: np.random.Generator) -> int:
    """Start frame for the second window hitting the target interval overlap."""
    if not 0.0 < target_rate <= 1.0:
        raise ConfigError(f"target overlap rate must be in (0, 1], got {target_rate}")
    if t0_first < 0 or t0_first + span > T:
        raise ContractError(f"first window [{t0_first}, {t0_first + span}) overruns {T} frames")
    offset = _round_half_up((1.0 - target_rate) * span)
    feasible = [t0_first + d * offset for d in (1, -1) if 0 <= t0_first + d * offset <= T - span]
    if feasible:
        return feasible[int(rng.integers(0, len(feasible)))] if len(feasible) > 1 else feasible[0]
    # Neither direction fits: clamp whichever lands closer to the target rate.
    best = None
    for d in (1, -1):
        t0 = min(max(t0_first + d * offset, 0), T - span)
        achieved = max(0, span - abs(t0 - t0_first)) / span
        err = abs(achieved - target_rate)
        if best is None or err < best[0]:
            best = (err, t0)
    if best[0] > 1.0 / span:
        raise SampleGenerationError(
            f"cannot realize temporal overlap {target_rate} from t0={t0_first} (span {span}, T={T})",
            diagnostics={"target_rate": target_rate, "span": span, "T": T, "t0_first": t0_first},
        )
    return best[1]


def resample_playback(frames: np.ndarray, window: ClipWindow) -> np.ndarray:
    """Strided temporal slice: frames t0, t0+rate, ... (length frames)."""
    window.validate(frames.shape[0])
    idx = window.t0 + np.arange(window.length) * window.playback_rate
    return frames[idx]


def apply_rotation(clip: np.ndarray, k: int) -> np.ndarray:
    """Rotate every frame by 90*k degrees; k=0 returns the input unchanged."""
    if k not in (0, 1, 2, 3):
        raise ConfigError(f"rotation class must be in 0..3, got {k}")
    if k == 0:
        return clip
    return np.ascontiguousarray(np.rot90(clip, k=k, axes=(1, 2)))


def apply_photometric(clip: np.ndarray, params: PhotometricParams, rng: np.random.Generator) -> np.ndarray:
    """Clip-consistent brightness/gain jitter, optional blur and small rotation."""
    out = clip.astype(np.float32, copy=True)
    if params.brightness > 0:
        out += np.float32(rng.uniform(-params.brightness, params.brightness))
    if params.channel_gain > 0:
        gains = rng.uniform(1.0 - params.channel_gain, 1.0 + params.channel_gain, size=out.shape[-1])
        out *= gains.astype(np.float32)
    if params.blur_prob > 0 and rng.uniform() < params.blur_prob:
        sigma = rng.uniform(*params.blur_sigma)
        out = ndimage.gaussian_filter(out, sigma=(0.0, sigma, sigma, 0.0), mode="nearest")
    if params.max_rotation_deg > 0:
        angle = rng.uniform(-params.max_rotation_deg, params.max_rotation_deg)
        out = ndimage.rotate(out, angle, axes=(2, 1), reshape=False, order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0, out=out)


def _resize_clip(clip: np.ndarray, side: int) -> np.ndarray:
    """Bilinear spatial resize of a (T, H, W, C) clip to (T, side, side, C)."""
    if clip.shape[1] == side and clip.shape[2] == side:
        return clip.astype(np.float32, copy=False)
    t = torch.from_numpy(np.ascontiguousarray(clip, dtype=np.float32)).permute(0, 3, 1, 2)
    t = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False)
    return t.permute(0, 2, 3, 1).contiguous().numpy()


def _extract_clip(video: VideoSample, box: CropBox, window: ClipWindow) -> np.ndarray:
    frames = resample_playback(video.frames, window)
    return frames[:, box.y0 : box.y0 + box.h, box.x0 : box.x0 + box.w, :]


def _sample_first_geometry(
    cfg: AugmentConfig,
    dims: tuple[int, int, int],
    rate: int,
    temporal_target: float | None,
    rng: np.random.Generator,
    spatial_target: float | None = None,
) -> tuple[CropBox, ClipWindow]:
    """First crop/window, drawn uniformly from the geometries that leave room
    for the solved second clip when overlap targets are given."""
    T, H, W = dims
    if spatial_target is None:
        side = int(rng.integers(cfg.crop_min_side, cfg.crop_max_side + 1))
        x0 = int(rng.integers(0, W - side + 1))
        y0 = int(rng.integers(0, H - side + 1))
    else:
        geometries = _feasible_first_geometries(
            cfg.crop_min_side, cfg.crop_max_side, spatial_target, cfg.spatial_tolerance, H, W
        )
        if not geometries:
            raise SampleGenerationError(
                f"no first crop admits a second placement at spatial rate {spatial_target}",
                diagnostics={
                    "spatial_target": spatial_target,
                    "frame_dims": (H, W),
                    "crop_sides": (cfg.crop_min_side, cfg.crop_max_side),
                },
            )
        side, x0, y0 = geometries[int(rng.integers(0, len(geometries)))]
    span = cfg.clip_length * rate
    if temporal_target is None:
        t0 = int(rng.integers(0, T - span + 1))
    else:
        offset = _round_half_up((1.0 - temporal_target) * span)
        feasible = [t for t in range(T - span + 1) if t + offset <= T - span or t - offset >= 0]
        t0 = feasible[int(rng.integers(0, len(feasible)))]
    return CropBox(x0, y0, side, side), ClipWindow(t0, cfg.clip_length, rate)


def generate_pair(video: VideoSample, cfg: AugmentConfig, rng: np.random.Generator) -> AugmentedPair:
    """Two-step sampling: free first clip, overlap-solved second clip."""
    T, H, W, _ = video.frames.shape
    cfg.validate(H, W, T)

    if cfg.enable_playback:
        playback_idx = int(rng.integers(0, len(cfg.playback_rates)))
        rate = int(cfg.playback_rates[playback_idx])
    else:
        playback_idx, rate = None, 1
    if cfg.enable_stor:
        s_idx = int(rng.integers(0, len(cfg.spatial_rates)))
        t_idx = int(rng.integers(0, len(cfg.temporal_rates)))
    else:
        s_idx = t_idx = None

    box_a = box_b = win_a = win_b = None
    if not cfg.enable_stor:
        # Independent second view; still shares crop size and playback rate.
        box_a, win_a = _sample_first_geometry(cfg, (T, H, W), rate, None, rng)
        second_box, win_b = _sample_first_geometry(cfg, (T, H, W), rate, None, rng)
        box_b = CropBox(
            min(second_box.x0, W - box_a.w),
            min(second_box.y0, H - box_a.h),
            box_a.w,
            box_a.h,
        )
    else:
        target_s = cfg.spatial_rates[s_idx]
        target_t = cfg.temporal_rates[t_idx]
        for _ in range(cfg.max_retries):
            first_box, first_win = _sample_first_geometry(cfg, (T, H, W), rate, target_t, rng, target_s)
            placements = feasible_spatial_placements(first_box, target_s, cfg.spatial_tolerance, (H, W))
            if not placements:
                continue  # defensive: the first geometry is drawn from the feasible set
            candidate_box = placements[int(rng.integers(0, len(placements)))]
            t0_b = solve_temporal_offset(target_t, first_win.span, T, first_win.t0, rng)
            candidate_win = ClipWindow(t0_b, cfg.clip_length, rate)
            if abs(interval_overlap_rate(first_win, candidate_win) - target_t) > 1.0 / cfg.clip_length:
                continue
            box_a, box_b, win_a, win_b = first_box, candidate_box, first_win, candidate_win
            break
    if box_b is None:
        raise SampleGenerationError(
            "could not place an overlapping pair",
            diagnostics={
                "video_id": video.video_id,
                "spatial_target": None if s_idx is None else cfg.spatial_rates[s_idx],
                "temporal_target": None if t_idx is None else cfg.temporal_rates[t_idx],
                "frame_dims": (T, H, W),
                "crop_sides": (cfg.crop_min_side, cfg.crop_max_side),
            },
        )

    clip_a = _resize_clip(_extract_clip(video, box_a, win_a), cfg.crop_size)
    clip_b = _resize_clip(_extract_clip(video, box_b, win_b), cfg.crop_size)

    if cfg.enable_rotation:
        # Only the second view is rotated: the first keeps its canonical
        # orientation, so one side of every pair preserves undistorted
        # position cues for the overlap heads.
        rot_a = 0
        rot_b = int(rng.integers(0, 4))
        clip_b = apply_rotation(clip_b, rot_b)
    else:
        rot_a = rot_b = None

    clip_a = apply_photometric(clip_a, cfg.photometric, rng)
    clip_b = apply_photometric(clip_b, cfg.photometric, rng)

    labels = PretextLabels(
        spatial_overlap_class=s_idx,
        temporal_overlap_class=t_idx,
        playback_class=playback_idx,
        rotation_class=rot_a,
        rotation_class_b=rot_b,
        achieved_spatial_rate=rect_overlap_rate(box_a, box_b),
        achieved_temporal_rate=interval_overlap_rate(win_a, win_b),
    )
    return AugmentedPair(clip_a=clip_a, clip_b=clip_b, labels=labels, boxes=(box_a, box_b), windows=(win_a, win_b))
