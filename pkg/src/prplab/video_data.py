"""Raw video containers, frame-directory IO, synthetic motion corpora and clip augmentation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from prplab.errors import DatasetError, InputError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
VIDEO_SUFFIXES = (".avi", ".mp4", ".mkv", ".mov", ".webm")

DIRECTIONS = {
    "right": (0, 1),
    "left": (0, -1),
    "down": (1, 0),
    "up": (-1, 0),
}


@dataclass
class RawVideo:
    """A decoded frame sequence, frames stored as a (T, H, W, C) float32 array in [0, 1]."""

    frames: np.ndarray
    source_id: str = ""
    label: Optional[int] = None

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim == 3:
            frames = frames[..., None]
        if frames.ndim != 4 or frames.shape[0] < 1:
            raise InputError(f"frames must be (T, H, W, C) with T >= 1, got shape {frames.shape}")
        self.frames = frames

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape[1:]

    def __len__(self) -> int:
        return self.frame_count


@dataclass(frozen=True)
class MotionClass:
    direction: str
    speed: int

    @property
    def name(self) -> str:
        if self.speed == 0:
            return "stationary"
        return f"{self.direction}_v{self.speed}"

    @property
    def velocity(self) -> tuple[int, int]:
        dy, dx = DIRECTIONS.get(self.direction, (0, 0))
        return dy * self.speed, dx * self.speed


def default_motion_classes(speeds: Sequence[int] = (1, 3)) -> tuple[MotionClass, ...]:
    return tuple(MotionClass(d, v) for v in speeds for d in DIRECTIONS)


STATIONARY = MotionClass("none", 0)


@dataclass
class SyntheticSpec:
    num_videos: int = 64
    frame_count: int = 64
    height: int = 36
    width: int = 36
    motion_classes: tuple[MotionClass, ...] = field(default_factory=default_motion_classes)
    noise_std: float = 0.02
    pattern_size: int = 9
    # "by_speed": square for even speed tiers, disc for odd ones; "random": per-video coin flip
    shape_mode: str = "by_speed"
    background: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        self.motion_classes = tuple(
            m if isinstance(m, MotionClass) else parse_motion_class(m) for m in self.motion_classes
        )
        if self.num_videos < 1 or self.frame_count < 1:
            raise InputError("num_videos and frame_count must be >= 1")
        if not self.motion_classes:
            raise InputError("at least one motion class is required")
        if self.noise_std < 0:
            raise InputError("noise_std must be >= 0")
        if not 1 <= self.pattern_size <= min(self.height, self.width):
            raise InputError("pattern_size must fit inside the frame")
        if self.shape_mode not in ("by_speed", "random"):
            raise InputError("shape_mode must be 'by_speed' or 'random'")

    @property
    def class_names(self) -> list[str]:
        return [m.name for m in self.motion_classes]


def parse_motion_class(value) -> MotionClass:
    """Accept 'stationary', 'right_v3' or a {direction, speed} mapping."""
    if isinstance(value, dict):
        return MotionClass(str(value["direction"]), int(value["speed"]))
    text = str(value)
    if text == "stationary":
        return STATIONARY
    direction, _, speed = text.rpartition("_v")
    if direction not in DIRECTIONS or not speed.isdigit():
        raise InputError(f"cannot parse motion class {value!r}")
    return MotionClass(direction, int(speed))


@dataclass
class AugmentSpec:
    resize_hw: tuple[int, int] = (128, 171)
    crop_hw: tuple[int, int] = (112, 112)
    flip: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        self.resize_hw = tuple(int(v) for v in self.resize_hw)
        self.crop_hw = tuple(int(v) for v in self.crop_hw)
        if any(c > r for c, r in zip(self.crop_hw, self.resize_hw)):
            raise InputError(f"crop {self.crop_hw} larger than resize {self.resize_hw}")


# --------------------------------------------------------------------------
# Loading
# --------------------------------------------------------------------------

def _resize_frame(frame: np.ndarray, resize_hw: Optional[tuple[int, int]]) -> np.ndarray:
    if resize_hw is None or tuple(frame.shape[:2]) == tuple(resize_hw):
        return frame
    h, w = resize_hw
    channels = [
        np.asarray(Image.fromarray(frame[..., c]).resize((w, h), Image.BILINEAR))
        for c in range(frame.shape[2])
    ]
    return np.stack(channels, axis=-1)


def _image_to_array(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("RGB")
        return np.asarray(img, dtype=np.float32) / 255.0


def _decode_container(path: Path) -> list[np.ndarray]:
    try:
        import cv2
    except ImportError as err:  # pragma: no cover - depends on environment
        raise InputError(f"no video decoder available for {path}; use a frame directory") from err
    cap = cv2.VideoCapture(str(path))
    frames = []
    try:
        while True:
            ok, frame = cap.read()
            if not ok:
                break
            frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0)
    finally:
        cap.release()
    return frames


def load_frame_sequence(path, resize_hw: Optional[tuple[int, int]] = None, label: Optional[int] = None) -> RawVideo:
    """Read a frame directory (lexical order) or a video container into a RawVideo.

    Frames of inconsistent size are tolerated: each one is resized independently.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file or directory: {path}")
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"no decodable frames in {path}")
        raw = [_image_to_array(p) for p in files]
    else:
        if path.suffix.lower() not in VIDEO_SUFFIXES:
            raise InputError(f"unsupported file type: {path}")
        raw = _decode_container(path)
        if not raw:
            raise DatasetError(f"no decodable frames in {path}")
    if resize_hw is None:
        sizes = {f.shape for f in raw}
        if len(sizes) > 1:
            resize_hw = raw[0].shape[:2]
    frames = np.stack([_resize_frame(f, resize_hw) for f in raw])
    return RawVideo(np.clip(frames, 0.0, 1.0), source_id=path.name, label=label)


@dataclass
class VideoEntry:
    path: Path
    label: int
    video_id: str


class VideoDataset(Sequence[RawVideo]):
    """Frame-directory dataset ``<root>/<class>/<video_id>/<frames>`` with ``classes.txt``.

    Videos are decoded lazily and cached.
    """

    def __init__(self, root, resize_hw: Optional[tuple[int, int]] = None, cache: bool = True):
        self.root = Path(root)
        if not self.root.is_dir():
            raise InputError(f"dataset root not found: {self.root}")
        classes_file = self.root / "classes.txt"
        if classes_file.exists():
            self.classes = [ln.strip() for ln in classes_file.read_text().splitlines() if ln.strip()]
        else:
            self.classes = sorted(p.name for p in self.root.iterdir() if p.is_dir())
        self.resize_hw = resize_hw
        self.entries: list[VideoEntry] = []
        for label, name in enumerate(self.classes):
            class_dir = self.root / name
            if not class_dir.is_dir():
                continue
            for vid in sorted(class_dir.iterdir()):
                if vid.is_dir() or vid.suffix.lower() in VIDEO_SUFFIXES:
                    self.entries.append(VideoEntry(vid, label, f"{name}/{vid.name}"))
        if not self.entries:
            raise DatasetError(f"dataset at {self.root} contains no videos")
        self._cache: dict[int, RawVideo] = {}
        self._use_cache = cache

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        if index < 0:
            index += len(self)
        if index in self._cache:
            return self._cache[index]
        entry = self.entries[index]
        video = load_frame_sequence(entry.path, self.resize_hw, label=entry.label)
        video.source_id = entry.video_id
        if self._use_cache:
            self._cache[index] = video
        return video

    def __iter__(self) -> Iterator[RawVideo]:
        for i in range(len(self)):
            yield self[i]


def write_frame_directory(video: RawVideo, out_dir, fmt: str = "png") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(video.frames):
        arr = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)
        if arr.shape[-1] == 1:
            arr = arr[..., 0]
        p = out_dir / f"{i:06d}.{fmt}"
        Image.fromarray(arr).save(p)
        paths.append(p)
    return paths


# --------------------------------------------------------------------------
# Synthetic corpus
# --------------------------------------------------------------------------

def _smooth_background(rng: np.random.Generator, h: int, w: int, c: int) -> np.ndarray:
    coarse = rng.uniform(0.0, 0.3, size=(max(h // 6, 2), max(w // 6, 2), c)).astype(np.float32)
    img = Image.fromarray((coarse * 255).astype(np.uint8)) if c == 3 else None
    if img is not None:
        return np.asarray(img.resize((w, h), Image.BILINEAR), dtype=np.float32) / 255.0
    ys = np.linspace(0, coarse.shape[0] - 1, h).round().astype(int)
    xs = np.linspace(0, coarse.shape[1] - 1, w).round().astype(int)
    return coarse[ys][:, xs]


def pattern_mask(spec: SyntheticSpec, shape: str, origin: tuple[int, int], t: int, velocity: tuple[int, int]) -> np.ndarray:
    """Boolean mask of the pattern at frame t, wrapping at the borders."""
    h, w, size = spec.height, spec.width, spec.pattern_size
    cy = origin[0] + velocity[0] * t
    cx = origin[1] + velocity[1] * t
    ys = (np.arange(h) - cy) % h
    xs = (np.arange(w) - cx) % w
    if shape == "square":
        return (ys < size)[:, None] & (xs < size)[None, :]
    r = (size - 1) / 2.0
    dy = ys - r
    dx = xs - r
    return dy[:, None] ** 2 + dx[None, :] ** 2 <= r * r + 0.25


def synthetic_layout(spec: SyntheticSpec, index: int) -> dict:
    """Per-video generator parameters (class, shape, origin, colour); deterministic in (spec, index)."""
    if not 0 <= index < spec.num_videos:
        raise InputError(f"index {index} out of range [0, {spec.num_videos})")
    rng = np.random.default_rng([spec.seed, index])
    label = index % len(spec.motion_classes)
    motion = spec.motion_classes[label]
    coin = int(rng.integers(2))
    if spec.shape_mode == "by_speed":
        tiers = sorted({m.speed for m in spec.motion_classes})
        coin = tiers.index(motion.speed) % 2
    return {
        "rng": rng,
        "label": label,
        "motion": motion,
        "shape": "square" if coin == 0 else "disc",
        "origin": (int(rng.integers(spec.height)), int(rng.integers(spec.width))),
        "color": rng.uniform(0.7, 1.0, size=3).astype(np.float32),
    }


def generate_synthetic_video(spec: SyntheticSpec, index: int) -> RawVideo:
    layout = synthetic_layout(spec, index)
    rng = layout["rng"]
    h, w = spec.height, spec.width
    if spec.background:
        background = _smooth_background(rng, h, w, 3)
    else:
        background = np.zeros((h, w, 3), dtype=np.float32)
    velocity = layout["motion"].velocity
    frames = np.empty((spec.frame_count, h, w, 3), dtype=np.float32)
    for t in range(spec.frame_count):
        frame = background.copy()
        mask = pattern_mask(spec, layout["shape"], layout["origin"], t, velocity)
        frame[mask] = layout["color"]
        frames[t] = frame
    if spec.noise_std > 0:
        frames += rng.normal(0.0, spec.noise_std, size=frames.shape).astype(np.float32)
        np.clip(frames, 0.0, 1.0, out=frames)
    return RawVideo(frames, source_id=f"synthetic_{index:05d}", label=layout["label"])


def generate_synthetic_corpus(spec: SyntheticSpec) -> list[RawVideo]:
    return [generate_synthetic_video(spec, i) for i in range(spec.num_videos)]


def write_synthetic_dataset(spec: SyntheticSpec, out_dir, force: bool = False,
                            indices: Optional[Sequence[int]] = None) -> Path:
    """Write the canonical frame-directory layout plus ``classes.txt``.

    ``indices`` restricts the output to a subset of the corpus (e.g. one split).
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise InputError(f"output directory {out_dir} is not empty (use --force)")
    out_dir.mkdir(parents=True, exist_ok=True)
    names = spec.class_names
    (out_dir / "classes.txt").write_text("\n".join(names) + "\n")
    chosen = range(spec.num_videos) if indices is None else indices
    for i in chosen:
        video = generate_synthetic_video(spec, i)
        write_frame_directory(video, out_dir / names[video.label] / video.source_id)
    log.info("wrote %d synthetic videos to %s", len(chosen), out_dir)
    return out_dir


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------

def resize_clip(clip: np.ndarray, resize_hw: tuple[int, int]) -> np.ndarray:
    if tuple(clip.shape[1:3]) == tuple(resize_hw):
        return clip
    return np.stack([_resize_frame(np.ascontiguousarray(f), resize_hw) for f in clip])


def sample_crop(aug: AugmentSpec, rng: np.random.Generator) -> tuple[int, int, bool]:
    """Draw (top, left, flip) for one clip."""
    max_top = aug.resize_hw[0] - aug.crop_hw[0]
    max_left = aug.resize_hw[1] - aug.crop_hw[1]
    if max_top < 0 or max_left < 0:
        raise InputError(f"crop {aug.crop_hw} larger than resized frame {aug.resize_hw}")
    top = int(rng.integers(max_top + 1))
    left = int(rng.integers(max_left + 1))
    flip = bool(aug.flip and rng.random() < 0.5)
    return top, left, flip


def center_crop_params(aug: AugmentSpec) -> tuple[int, int, bool]:
    return (aug.resize_hw[0] - aug.crop_hw[0]) // 2, (aug.resize_hw[1] - aug.crop_hw[1]) // 2, False


def apply_crop(clip: np.ndarray, aug: AugmentSpec, params: tuple[int, int, bool]) -> np.ndarray:
    clip = resize_clip(clip, aug.resize_hw)
    top, left, flip = params
    ch, cw = aug.crop_hw
    out = clip[:, top:top + ch, left:left + cw]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_clip(clip: np.ndarray, aug: AugmentSpec, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Resize then crop/flip every frame with one shared window."""
    rng = rng if rng is not None else np.random.default_rng(aug.seed)
    clip = np.asarray(clip, dtype=np.float32)
    return apply_crop(clip, aug, sample_crop(aug, rng))
