"""Overlap solvers, pair generation, and the augmentation ops."""

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from vidssl import (
    AugmentConfig,
    ClipWindow,
    CropBox,
    DatasetSpec,
    OverlapCandidates,
    PhotometricParams,
    apply_photometric,
    apply_rotation,
    generate_pair,
    interval_overlap_rate,
    make_dataset,
    place_second_crop,
    rect_overlap_rate,
    resample_playback,
    solve_spatial_offset,
    solve_temporal_offset,
)
from vidssl.augment import _solve_abs_dy, feasible_spatial_placements
from vidssl.errors import ConfigError, ContractError, PlacementError, SampleGenerationError
from vidssl.seeding import rng_from

QUIET = PhotometricParams(brightness=0, channel_gain=0, blur_prob=0, blur_sigma=(0.1, 0.1), max_rotation_deg=0)


@pytest.fixture(scope="module")
def tiny_videos():
    return make_dataset(DatasetSpec(videos_per_class=2))


# ---------------------------------------------------------------- overlap rates

def test_rect_overlap_rate_examples():
    a = CropBox(0, 0, 112, 112)
    assert rect_overlap_rate(a, a) == 1.0
    assert rect_overlap_rate(a, CropBox(112, 112, 112, 112)) == 0.0
    assert rect_overlap_rate(a, CropBox(0, 56, 112, 112)) == pytest.approx(0.5)


def test_rect_overlap_rate_rejects_unequal_areas():
    with pytest.raises(ContractError):
        rect_overlap_rate(CropBox(0, 0, 10, 10), CropBox(0, 0, 10, 11))


def test_interval_overlap_rate_examples():
    a = ClipWindow(0, 16, 1)
    assert interval_overlap_rate(a, a) == 1.0
    assert interval_overlap_rate(a, ClipWindow(8, 16, 1)) == pytest.approx(0.5)
    assert interval_overlap_rate(a, ClipWindow(13, 16, 1)) == pytest.approx(3 / 16)


def test_interval_overlap_rate_rejects_unequal_spans():
    with pytest.raises(ContractError):
        interval_overlap_rate(ClipWindow(0, 16, 1), ClipWindow(0, 16, 2))


@given(
    x=st.integers(0, 30), y=st.integers(0, 30), u=st.integers(0, 30), v=st.integers(0, 30),
    w=st.integers(1, 20), h=st.integers(1, 20),
)
def test_rect_overlap_rate_symmetric_bounded(x, y, u, v, w, h):
    a, b = CropBox(x, y, w, h), CropBox(u, v, w, h)
    r = rect_overlap_rate(a, b)
    assert r == rect_overlap_rate(b, a)
    assert 0.0 <= r <= 1.0
    assert (r == 1.0) == (a == b)


# ---------------------------------------------------------------- spatial solver

def test_solved_dy_matches_worked_examples():
    assert _solve_abs_dy(0.5, 112, 112, 0) == 56
    assert _solve_abs_dy(0.2, 112, 112, 28) == 82
    achieved = rect_overlap_rate(CropBox(0, 0, 112, 112), CropBox(28, 82, 112, 112))
    assert achieved == pytest.approx(84 * 30 / 12544)
    assert abs(achieved - 0.2) <= 0.02


def test_solve_spatial_offset_rate_one_is_identity():
    rng = rng_from(0, "solver")
    for _ in range(20):
        assert solve_spatial_offset(1.0, 24, 24, rng) == (0, 0)


def test_solve_spatial_offset_respects_bounds_and_tolerance():
    rng = rng_from(1, "solver")
    for rate in (0.2, 0.4, 0.6, 0.8, 1.0):
        seen_signs = set()
        for _ in range(400):
            dx, dy = solve_spatial_offset(rate, 24, 24, rng)
            assert abs(dx) <= math.floor(24 * (1 - rate))
            achieved = (24 - abs(dx)) * (24 - abs(dy)) / (24 * 24)
            assert abs(achieved - rate) <= 0.02
            seen_signs.add((dx >= 0, dy >= 0))
        if rate < 1.0:
            assert len(seen_signs) == 4  # both signs occur on both axes


def test_solve_spatial_offset_rejects_bad_rate():
    rng = rng_from(2, "solver")
    for bad in (0.0, -0.1, 1.2):
        with pytest.raises(ConfigError):
            solve_spatial_offset(bad, 24, 24, rng)


def brute_force_placements(first, rate, tol, frame_dims):
    """Independent oracle: scan the entire offset grid produced by the solver."""
    frame_h, frame_w = frame_dims
    out = set()
    for abs_dx in range(int(math.floor(first.w * (1 - rate))) + 1):
        abs_dy = _solve_abs_dy(rate, first.w, first.h, abs_dx)
        for sx in (1, -1):
            for sy in (1, -1):
                x0, y0 = first.x0 + sx * abs_dx, first.y0 + sy * abs_dy
                if not (0 <= x0 and 0 <= y0 and x0 + first.w <= frame_w and y0 + first.h <= frame_h):
                    continue
                box = CropBox(x0, y0, first.w, first.h)
                if abs(rect_overlap_rate(first, box) - rate) <= tol:
                    out.add((x0, y0))
    return out


@given(
    x0=st.integers(0, 16), y0=st.integers(0, 16), side=st.integers(8, 24),
    rate_idx=st.integers(0, 4),
)
@settings(max_examples=200)
def test_feasible_placements_match_brute_force(x0, y0, side, rate_idx):
    rate = (0.2, 0.4, 0.6, 0.8, 1.0)[rate_idx]
    frame = (40, 40)
    if x0 + side > 40 or y0 + side > 40:
        return
    first = CropBox(x0, y0, side, side)
    got = feasible_spatial_placements(first, rate, 0.02, frame)
    assert {(b.x0, b.y0) for b in got} == brute_force_placements(first, rate, 0.02, frame)
    for b in got:
        assert abs(rect_overlap_rate(first, b) - rate) <= 0.02


def test_place_second_crop_translation_and_bounds():
    first = CropBox(8, 8, 112, 112)
    assert place_second_crop(first, (8, 0), (128, 128)) == CropBox(16, 8, 112, 112)
    with pytest.raises(PlacementError):
        place_second_crop(CropBox(0, 0, 112, 112), (-5, 0), (128, 128))


# ---------------------------------------------------------------- temporal solver

def test_solve_temporal_offset_examples():
    rng = rng_from(3, "temporal")
    assert solve_temporal_offset(1.0, 16, 64, 5, rng) == 5
    assert solve_temporal_offset(0.5, 16, 64, 0, rng) == 8
    t0 = solve_temporal_offset(0.2, 16, 64, 20, rng)
    assert abs(t0 - 20) == 13
    achieved = interval_overlap_rate(ClipWindow(20, 16, 1), ClipWindow(t0, 16, 1))
    assert achieved == pytest.approx(3 / 16)


def test_solve_temporal_offset_direction_randomised():
    starts = {solve_temporal_offset(0.5, 16, 64, 24, rng_from(i, "dir")) for i in range(40)}
    assert starts == {16, 32}


def test_solve_temporal_offset_infeasible_raises():
    rng = rng_from(4, "temporal")
    with pytest.raises(SampleGenerationError):
        solve_temporal_offset(0.2, 16, 16, 0, rng)  # no room for a 13-frame offset


def test_solve_temporal_offset_clamps_when_close_enough():
    # T=17 leaves offset 1 of the needed 2; achieved 15/16 vs target 7/8 is inside 1/16
    rng = rng_from(5, "temporal")
    t0 = solve_temporal_offset(0.875, 16, 17, 0, rng)
    assert t0 == 1


# ---------------------------------------------------------------- clip ops

def test_resample_playback_strides():
    frames = np.arange(64, dtype=np.float32).reshape(64, 1, 1, 1)
    clip = resample_playback(frames, ClipWindow(0, 16, 1))
    assert np.array_equal(clip[:, 0, 0, 0], np.arange(16))
    clip = resample_playback(frames, ClipWindow(0, 16, 2))
    assert np.array_equal(clip[:, 0, 0, 0], np.arange(0, 32, 2))
    with pytest.raises(ContractError):
        resample_playback(frames, ClipWindow(40, 16, 2))


def test_rotation_group_structure():
    rng = rng_from(6, "rot")
    clip = rng.random((4, 8, 8, 3)).astype(np.float32)
    assert apply_rotation(clip, 0) is clip
    assert np.array_equal(apply_rotation(apply_rotation(clip, 1), 3), clip)
    k2 = apply_rotation(clip, 2)
    assert np.array_equal(k2[0, 0, 0], clip[0, -1, -1])
    with pytest.raises(ConfigError):
        apply_rotation(clip, 4)


@given(k1=st.integers(0, 3), k2=st.integers(0, 3))
def test_rotation_composition(k1, k2):
    clip = rng_from(7, "rot", k1, k2).random((2, 6, 6, 3)).astype(np.float32)
    composed = apply_rotation(apply_rotation(clip, k1), k2)
    assert np.array_equal(composed, apply_rotation(clip, (k1 + k2) % 4))


def test_photometric_identity_and_clamp():
    clip = rng_from(8, "photo").random((4, 8, 8, 3)).astype(np.float32)
    assert np.array_equal(apply_photometric(clip, QUIET, rng_from(0, "x")), clip)
    bright = PhotometricParams(brightness=0.3, channel_gain=0, blur_prob=0, max_rotation_deg=0)
    out = apply_photometric(np.full((2, 4, 4, 3), 0.95, dtype=np.float32), bright, rng_from(1, "x"))
    assert out.max() <= 1.0 and out.min() >= 0.0


def test_photometric_deterministic_under_seed():
    clip = rng_from(9, "photo").random((4, 8, 8, 3)).astype(np.float32)
    params = PhotometricParams()
    a = apply_photometric(clip, params, rng_from(2, "x"))
    b = apply_photometric(clip, params, rng_from(2, "x"))
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- candidates & config

def test_candidates_must_increase_and_end_high():
    OverlapCandidates((0.2, 0.4, 0.6, 0.8, 1.0), (0.5, 1.0)).validate()
    OverlapCandidates((0.33, 0.66, 0.99), (0.33, 0.66, 0.99)).validate()  # 0.99 top is allowed
    for bad in [(0.4, 0.2, 1.0), (0.2, 0.2, 1.0), (0.2, 0.5), (1.0, 1.2)]:
        with pytest.raises(ConfigError):
            OverlapCandidates(tuple(bad), (1.0,)).validate()


def test_config_validation_catches_impossible_geometry():
    cfg = AugmentConfig()
    cfg.validate(40, 40, 64)
    with pytest.raises(ConfigError):
        cfg.validate(28, 28, 64)  # 0.2 overlap cannot be placed in a 28px frame
    with pytest.raises(ConfigError):
        cfg.validate(40, 40, 33)  # playback 2 span is 32; no room for 0.2 overlap offsets
    with pytest.raises(ConfigError):
        dataclasses.replace(cfg, crop_max_side=64).validate(40, 40, 64)


# ---------------------------------------------------------------- generate_pair

def quiet_cfg(**overrides) -> AugmentConfig:
    return dataclasses.replace(AugmentConfig(), photometric=QUIET, **overrides)


def test_pair_shapes_and_shared_geometry(tiny_videos):
    cfg = AugmentConfig()
    for i in range(50):
        pair = generate_pair(tiny_videos[i % len(tiny_videos)], cfg, rng_from(0, "pair", i))
        assert pair.clip_a.shape == (16, 16, 16, 3) == pair.clip_b.shape
        assert pair.clip_a.dtype == np.float32
        box_a, box_b = pair.boxes
        win_a, win_b = pair.windows
        assert (box_a.w, box_a.h) == (box_b.w, box_b.h)
        assert (win_a.length, win_a.playback_rate) == (win_b.length, win_b.playback_rate)


def test_pair_rates_match_labels_within_tolerance(tiny_videos):
    cfg = quiet_cfg()
    for i in range(300):
        pair = generate_pair(tiny_videos[i % len(tiny_videos)], cfg, rng_from(1, "pair", i))
        labels = pair.labels
        spatial = rect_overlap_rate(*pair.boxes)
        temporal = interval_overlap_rate(*pair.windows)
        assert abs(spatial - cfg.spatial_rates[labels.spatial_overlap_class]) <= cfg.spatial_tolerance
        assert abs(temporal - cfg.temporal_rates[labels.temporal_overlap_class]) <= 1 / cfg.clip_length
        assert spatial == pytest.approx(labels.achieved_spatial_rate)
        assert temporal == pytest.approx(labels.achieved_temporal_rate)
        assert labels.playback_class in range(len(cfg.playback_rates))
        assert labels.rotation_class == 0  # first clip always keeps canonical orientation
        assert labels.rotation_class_b in range(4)


def test_pair_generation_deterministic(tiny_videos):
    a = generate_pair(tiny_videos[0], AugmentConfig(), rng_from(2, "pair", 7))
    b = generate_pair(tiny_videos[0], AugmentConfig(), rng_from(2, "pair", 7))
    assert np.array_equal(a.clip_a, b.clip_a) and np.array_equal(a.clip_b, b.clip_b)
    assert a.labels == b.labels and a.boxes == b.boxes and a.windows == b.windows


def test_degenerate_candidates_reproduce_first_clip(tiny_videos):
    cfg = quiet_cfg(spatial_rates=(1.0,), temporal_rates=(1.0,), enable_rotation=False)
    pair = generate_pair(tiny_videos[0], cfg, rng_from(3, "pair"))
    assert pair.boxes[0] == pair.boxes[1]
    assert pair.windows[0] == pair.windows[1]
    assert np.array_equal(pair.clip_a, pair.clip_b)


def test_disabled_tasks_emit_none_labels(tiny_videos):
    cfg = quiet_cfg(enable_playback=False, enable_rotation=False, enable_stor=False)
    pair = generate_pair(tiny_videos[0], cfg, rng_from(4, "pair"))
    labels = pair.labels
    assert labels.spatial_overlap_class is None and labels.temporal_overlap_class is None
    assert labels.playback_class is None and labels.rotation_class is None
    assert pair.windows[0].playback_rate == 1 == pair.windows[1].playback_rate
    assert pair.boxes[0].w == pair.boxes[1].w


def test_label_indices_are_uniform(tiny_videos):
    cfg = quiet_cfg()
    counts = {"s": [0] * 5, "t": [0] * 5, "p": [0] * 2, "r": [0] * 4}
    n = 10_000
    for i in range(n):
        pair = generate_pair(tiny_videos[i % len(tiny_videos)], cfg, rng_from(5, "uniform", i))
        counts["s"][pair.labels.spatial_overlap_class] += 1
        counts["t"][pair.labels.temporal_overlap_class] += 1
        counts["p"][pair.labels.playback_class] += 1
        counts["r"][pair.labels.rotation_class_b] += 1
    for key, observed in counts.items():
        p_value = stats.chisquare(observed).pvalue
        assert p_value > 0.01, f"{key} label counts {observed} not uniform (p={p_value:.4f})"
