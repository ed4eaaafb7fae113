"""Dilated sampling V(s), clip extraction, rate labels and slow-down ground truth."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from prplab.errors import ConfigError, DatasetError, InputError
from prplab.video_data import AugmentSpec, RawVideo, apply_crop, center_crop_params, sample_crop

ATTENTION_SOURCES = ("gt_aligned", "raw_window")


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class SamplingSpec:
    intervals: tuple[int, ...] = (1, 2, 4, 8)
    clip_len: int = 16
    recon_rate: int = 2
    attention_source: str = "gt_aligned"

    def __post_init__(self) -> None:
        self.intervals = tuple(int(s) for s in self.intervals)
        if not self.intervals:
            raise ConfigError("sampling.intervals must not be empty")
        for s in self.intervals:
            if not _is_power_of_two(s):
                raise ConfigError(f"sampling.intervals: {s} is not a power of two")
        if len(set(self.intervals)) != len(self.intervals):
            raise ConfigError(f"sampling.intervals contains duplicates: {self.intervals}")
        self.intervals = tuple(sorted(self.intervals))
        if self.clip_len < 2:
            raise ConfigError("sampling.clip_len must be >= 2")
        if self.recon_rate not in (1, 2, 4):
            raise ConfigError(f"sampling.recon_rate must be one of 1, 2, 4 (got {self.recon_rate})")
        if self.attention_source not in ATTENTION_SOURCES:
            raise ConfigError(f"sampling.attention_source must be one of {ATTENTION_SOURCES}")

    @property
    def num_classes(self) -> int:
        return len(self.intervals)

    def rate_class(self, s: int) -> int:
        try:
            return self.intervals.index(s)
        except ValueError:
            raise InputError(f"interval {s} not in {self.intervals}") from None


@dataclass
class TrainingSample:
    input_clip: np.ndarray
    ground_truth: np.ndarray
    attention_source: np.ndarray
    rate_class: int
    start_index: int
    interval: int
    video_index: int = 0
    label: Optional[int] = None


def dilated_sample(video: RawVideo, s: int) -> RawVideo:
    """V(s): keep raw frame u*s for u < floor(T / s)."""
    if s < 1:
        raise InputError(f"sampling interval must be >= 1, got {s}")
    count = video.frame_count // s
    if count < 1:
        raise InputError(f"video of {video.frame_count} frames is shorter than interval {s}")
    return RawVideo(video.frames[: count * s : s], source_id=video.source_id, label=video.label)


def extract_clip(video_s: RawVideo, start: int, l: int) -> np.ndarray:
    if start < 0 or l < 1 or start + l > video_s.frame_count:
        raise InputError(f"clip [{start}, {start + l}) outside video of {video_s.frame_count} frames")
    return video_s.frames[start:start + l]


def ground_truth_positions(start: int, s: int, r: int, l: int) -> list[Fraction]:
    step = Fraction(s, r)
    return [start + step * u for u in range(r * l)]


def frames_at(frames: np.ndarray, positions: Sequence[Fraction]) -> np.ndarray:
    """Sample frames at rational positions; linear interpolation between neighbours, clamped at the tail."""
    last = frames.shape[0] - 1
    out = np.empty((len(positions),) + frames.shape[1:], dtype=frames.dtype)
    for k, p in enumerate(positions):
        lo = math.floor(p)
        frac = p - lo
        lo_c = min(lo, last)
        if frac == 0:
            out[k] = frames[lo_c]
        else:
            hi_c = min(lo + 1, last)
            w = float(frac)
            mixed = (1.0 - w) * frames[lo_c].astype(np.float64) + w * frames[hi_c].astype(np.float64)
            out[k] = mixed.astype(frames.dtype)
    return out


def required_last_index(spec: SamplingSpec, s: int) -> int:
    """Offset (from start) of the last raw frame a sample at interval s reads without clamping."""
    l, r = spec.clip_len, spec.recon_rate
    last_gt = math.ceil(Fraction(s * l) - Fraction(s, r))
    need = max(s * (l - 1), last_gt)
    if spec.attention_source == "raw_window":
        need = max(need, s * l - 1)
    return need


def make_training_sample(
    video: RawVideo,
    spec: SamplingSpec,
    s: int,
    start: int,
    rng_seed: Optional[int] = None,
    video_index: int = 0,
) -> TrainingSample:
    """Build (X(s), G, R, class) for one window.

    ``rng_seed`` is accepted for interface symmetry; the construction itself is deterministic.
    """
    rate_class = spec.rate_class(s)
    l, r = spec.clip_len, spec.recon_rate
    if start < 0 or start + s * (l - 1) > video.frame_count - 1:
        raise InputError(
            f"window start={start}, s={s}, l={l} overflows video of {video.frame_count} frames"
        )
    frames = video.frames
    input_clip = frames[start: start + s * (l - 1) + 1: s].copy()
    ground_truth = frames_at(frames, ground_truth_positions(start, s, r, l))
    if spec.attention_source == "gt_aligned":
        attention_source = ground_truth
    else:
        idx = np.minimum(np.arange(start, start + s * l), video.frame_count - 1)
        attention_source = frames[idx]
    return TrainingSample(
        input_clip=input_clip,
        ground_truth=ground_truth,
        attention_source=attention_source,
        rate_class=rate_class,
        start_index=start,
        interval=s,
        video_index=video_index,
        label=video.label,
    )


def supported_intervals(video: RawVideo, spec: SamplingSpec) -> list[int]:
    return [s for s in spec.intervals if required_last_index(spec, s) <= video.frame_count - 1]


def sample_batch(videos: Sequence[RawVideo], spec: SamplingSpec, batch_size: int, rng_seed) -> list[TrainingSample]:
    """Draw video, interval and start uniformly; deterministic given ``rng_seed``."""
    if len(videos) == 0:
        raise DatasetError("cannot sample from an empty dataset")
    support = [supported_intervals(v, spec) for v in videos]
    eligible = [i for i, sup in enumerate(support) if sup]
    if not eligible:
        raise DatasetError(
            f"no video supports any interval in {spec.intervals} with clip_len={spec.clip_len}"
        )
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    batch = []
    for _ in range(batch_size):
        vi = eligible[int(rng.integers(len(eligible)))]
        video = videos[vi]
        s = support[vi][int(rng.integers(len(support[vi])))]
        max_start = video.frame_count - 1 - required_last_index(spec, s)
        start = int(rng.integers(max_start + 1))
        batch.append(make_training_sample(video, spec, s, start, video_index=vi))
    return batch


def augment_sample(sample: TrainingSample, aug: AugmentSpec, rng: Optional[np.random.Generator] = None,
                   center: bool = False) -> TrainingSample:
    """Apply one shared resize/crop/flip to input, ground truth and attention source."""
    if center:
        params = center_crop_params(aug)
    else:
        params = sample_crop(aug, rng if rng is not None else np.random.default_rng(aug.seed))
    gt = apply_crop(sample.ground_truth, aug, params)
    if sample.attention_source is sample.ground_truth:
        att = gt
    else:
        att = apply_crop(sample.attention_source, aug, params)
    return TrainingSample(
        input_clip=apply_crop(sample.input_clip, aug, params),
        ground_truth=gt,
        attention_source=att,
        rate_class=sample.rate_class,
        start_index=sample.start_index,
        interval=sample.interval,
        video_index=sample.video_index,
        label=sample.label,
    )
