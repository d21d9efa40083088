"""Building network inputs: 6-frame residual stacks, sampling, augmentation
and the on-disk stack cache.

A stack takes six consecutive frames, converts each to luminance, crops a
square window and keeps the five successive differences r_i = y_i - y_{i+1}.
Residuals are divided by 255 by default so inputs live in [-1, 1]; pass
normalize=False to keep raw residual values.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import FormatError, InvalidInputError, OutOfRangeError
from .video import luminance_plane

STACK_PLANES = 5
STACK_FRAMES = 6  # frames consumed per stack

LABEL_ORIGINAL = 0
LABEL_FORGED = 1
_LABEL_UNKNOWN_BYTE = 255


@dataclass(frozen=True)
class StackOrigin:
    video_id: str
    start_frame: int
    crop_x: int
    crop_y: int


@dataclass(frozen=True)
class ResidualStack:
    planes: np.ndarray  # (5, crop, crop) float32
    origin: StackOrigin
    label: int | None = None  # LABEL_ORIGINAL / LABEL_FORGED / None
    normalized: bool = True

    def __post_init__(self):
        arr = np.asarray(self.planes, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] != STACK_PLANES or arr.shape[1] != arr.shape[2]:
            raise InvalidInputError(
                f"stack must be ({STACK_PLANES}, crop, crop), got {arr.shape}")
        object.__setattr__(self, "planes", arr)

    @property
    def crop_size(self) -> int:
        return self.planes.shape[1]


def extract_stack(video, start_frame: int, crop_x: int = 0, crop_y: int = 0,
                  crop_size: int | None = None, video_id: str = "",
                  normalize: bool = True, label: int | None = None) -> ResidualStack:
    """Residual stack from frames start_frame .. start_frame + 5."""
    n_frames = len(video)
    if start_frame < 0 or start_frame + STACK_FRAMES > n_frames:
        raise OutOfRangeError(
            f"stack at frame {start_frame} needs {STACK_FRAMES} frames; "
            f"video has {n_frames}")
    if crop_size is None:
        crop_size = min(video.width, video.height)
    if crop_x < 0 or crop_y < 0 or crop_x + crop_size > video.width \
            or crop_y + crop_size > video.height:
        raise InvalidInputError(
            f"crop {crop_size} at ({crop_x}, {crop_y}) does not fit a "
            f"{video.width}x{video.height} frame")
    lumas = []
    for i in range(STACK_FRAMES):
        y = luminance_plane(video.get_frame(start_frame + i))
        lumas.append(y[crop_y:crop_y + crop_size, crop_x:crop_x + crop_size])
    planes = np.stack([lumas[i] - lumas[i + 1] for i in range(STACK_PLANES)])
    if normalize:
        planes = planes / np.float32(255.0)
    return ResidualStack(planes, StackOrigin(video_id, start_frame, crop_x, crop_y),
                         label=label, normalized=normalize)


def sample_stacks(video, count: int, rng_seed: int, crop_size: int | None = None,
                  video_id: str = "", normalize: bool = True,
                  label: int | None = None) -> list[ResidualStack]:
    """count stacks at uniformly random (possibly overlapping) positions."""
    n_frames = len(video)
    if n_frames < STACK_FRAMES:
        raise OutOfRangeError(f"video has {n_frames} frames; need {STACK_FRAMES}")
    if count < 1:
        raise InvalidInputError(f"count must be >= 1, got {count}")
    if crop_size is None:
        crop_size = min(video.width, video.height)
    rng = np.random.default_rng(rng_seed)
    stacks = []
    for _ in range(count):
        start = int(rng.integers(0, n_frames - STACK_FRAMES + 1))
        cx = int(rng.integers(0, video.width - crop_size + 1))
        cy = int(rng.integers(0, video.height - crop_size + 1))
        stacks.append(extract_stack(video, start, cx, cy, crop_size,
                                    video_id=video_id, normalize=normalize, label=label))
    return stacks


def tile_origins(width: int, height: int, crop_size: int) -> list[tuple[int, int]]:
    """Non-overlapping crop origins for dataset builds."""
    return [(x, y)
            for y in range(0, height - crop_size + 1, crop_size)
            for x in range(0, width - crop_size + 1, crop_size)]


def _rotate_cw(planes: np.ndarray, quarter_turns: int) -> np.ndarray:
    # clockwise: a pixel at (r, c) lands at (c, S - 1 - r) per quarter turn
    return np.rot90(planes, k=-quarter_turns, axes=(1, 2))


def apply_transform(stack: ResidualStack, quarter_turns: int, flip: bool) -> ResidualStack:
    if quarter_turns % 4 and stack.planes.shape[1] != stack.planes.shape[2]:
        raise InvalidInputError("90/270 degree rotation needs a square crop")
    planes = _rotate_cw(stack.planes, quarter_turns % 4)
    if flip:
        planes = planes[:, :, ::-1]
    return replace(stack, planes=np.ascontiguousarray(planes))


def augment(stack_pair: tuple[ResidualStack, ResidualStack],
            rng: np.random.Generator) -> tuple[ResidualStack, ResidualStack]:
    """One random rotation (0/90/180/270 clockwise) plus an independent
    horizontal coin flip, applied identically to both members of the pair."""
    quarter_turns = int(rng.integers(0, 4))
    flip = bool(rng.integers(0, 2))
    a, b = stack_pair
    return apply_transform(a, quarter_turns, flip), apply_transform(b, quarter_turns, flip)


# ---------------------------------------------------------------------------
# Stack cache file: magic "FCDS", u32 version, u32 count, then per stack a
# header (u64 video-id hash, u32 start frame, u32 crop_x, u32 crop_y,
# u32 crop, u8 label, u8 normalized) followed by little-endian float32 planes.
# ---------------------------------------------------------------------------

_CACHE_MAGIC = b"FCDS"
_CACHE_VERSION = 1
_HEADER = struct.Struct("<QIIIIBB")


def _id_hash(video_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(video_id.encode("utf-8"),
                                          digest_size=8).digest(), "little")


def write_stack_cache(path, stacks: list[ResidualStack]) -> None:
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<II", _CACHE_VERSION, len(stacks)))
        for s in stacks:
            label = _LABEL_UNKNOWN_BYTE if s.label is None else s.label
            fh.write(_HEADER.pack(_id_hash(s.origin.video_id), s.origin.start_frame,
                                  s.origin.crop_x, s.origin.crop_y, s.crop_size,
                                  label, int(s.normalized)))
            fh.write(s.planes.astype("<f4").tobytes())


def read_stack_cache(path) -> list[ResidualStack]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _CACHE_MAGIC:
        raise FormatError(f"{path}: not a stack cache (bad magic)", offset=0)
    version, count = struct.unpack_from("<II", raw, 4)
    if version != _CACHE_VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}", offset=4)
    pos = 12
    stacks = []
    for i in range(count):
        if pos + _HEADER.size > len(raw):
            raise FormatError(f"{path}: truncated header for stack {i}", offset=pos)
        vid_hash, start, cx, cy, crop, label, normalized = _HEADER.unpack_from(raw, pos)
        pos += _HEADER.size
        nbytes = STACK_PLANES * crop * crop * 4
        if pos + nbytes > len(raw):
            raise FormatError(f"{path}: truncated planes for stack {i}", offset=pos)
        planes = np.frombuffer(raw, dtype="<f4", count=STACK_PLANES * crop * crop,
                               offset=pos).reshape(STACK_PLANES, crop, crop)
        pos += nbytes
        stacks.append(ResidualStack(
            planes.copy(),
            StackOrigin(f"#{vid_hash:016x}", start, cx, cy),
            label=None if label == _LABEL_UNKNOWN_BYTE else label,
            normalized=bool(normalized)))
    return stacks


# ---------------------------------------------------------------------------
# Alternate input builders for the input-type ablation switch.
# ---------------------------------------------------------------------------

def build_input(video, start_frame: int, crop_x: int, crop_y: int, crop_size: int,
                input_type: str = "5-residual", normalize: bool = True) -> np.ndarray:
    """Input planes for one window under the selected input type.

    input_type in {"3-Y", "6-Y", "2-residual", "5-residual"}: raw luminance
    stacks or residual stacks with the given plane count.
    """
    n_lumas = {"3-Y": 3, "6-Y": 6, "2-residual": 3, "5-residual": 6}.get(input_type)
    if n_lumas is None:
        raise InvalidInputError(f"unknown input type {input_type!r}")
    if start_frame < 0 or start_frame + n_lumas > len(video):
        raise OutOfRangeError(f"window at {start_frame} needs {n_lumas} frames")
    lumas = []
    for i in range(n_lumas):
        y = luminance_plane(video.get_frame(start_frame + i))
        lumas.append(y[crop_y:crop_y + crop_size, crop_x:crop_x + crop_size])
    if input_type.endswith("-Y"):
        planes = np.stack(lumas)
    else:
        planes = np.stack([lumas[i] - lumas[i + 1] for i in range(n_lumas - 1)])
    if normalize:
        planes = planes / np.float32(255.0)
    return planes
