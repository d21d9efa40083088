"""Raw video representation, Y4M file I/O and synthetic video generation.

Frames hold float32 samples in [0, 255]; nothing is quantized until a video
is written back to disk, so sub-unit differences introduced by interpolation
survive the whole analysis pipeline.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import FormatError, InvalidInputError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)

PATTERNS = ("checker", "gradient-blobs", "textured-noise")


@dataclass(frozen=True)
class Frame:
    """One video frame: (height, width, channels) float32 samples in [0, 255]."""

    data: np.ndarray
    index: int = 0

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise InvalidInputError(
                f"frame data must be (h, w, 1) or (h, w, 3), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("frame contains non-finite samples")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def plane(self) -> np.ndarray:
        """Single-channel view (h, w); only valid for 1-channel frames."""
        if self.channels != 1:
            raise InvalidInputError("plane() requires a 1-channel frame")
        return self.data[:, :, 0]


@dataclass(frozen=True)
class Video:
    """Ordered frames with uniform dimensions and a rational frame rate."""

    frames: tuple[Frame, ...]
    fps: Fraction

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise InvalidInputError("video must contain at least one frame")
        fps = Fraction(self.fps)
        if fps <= 0:
            raise InvalidInputError(f"fps must be positive, got {fps}")
        first = frames[0]
        for i, f in enumerate(frames):
            if f.index != frames[0].index + i:
                raise InvalidInputError(
                    f"frame indices must increase by 1 (frame {i} has index {f.index})")
            if (f.width, f.height, f.channels) != (first.width, first.height, first.channels):
                raise InvalidInputError(f"frame {i} dimensions differ from frame 0")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "fps", fps)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def channels(self) -> int:
        return self.frames[0].channels

    def get_frame(self, i: int) -> Frame:
        """Frame accessor used by the analysis pipeline (instrumentable)."""
        return self.frames[i]


class FrameAccessCounter:
    """Video proxy that counts get_frame calls; used to audit detection cost."""

    def __init__(self, video: Video):
        self._video = video
        self.accesses = 0
        self.indices: list[int] = []

    def __len__(self):
        return len(self._video)

    def __getattr__(self, name):
        return getattr(self._video, name)

    def get_frame(self, i: int) -> Frame:
        self.accesses += 1
        self.indices.append(i)
        return self._video.get_frame(i)


def to_luminance(frame: Frame) -> Frame:
    """BT.601 luminance: y = 0.299 R + 0.587 G + 0.114 B, kept as float32."""
    if frame.channels != 3:
        raise InvalidInputError(f"to_luminance needs a 3-channel frame, got {frame.channels}")
    y = frame.data @ LUMA_WEIGHTS
    return Frame(y[:, :, None], index=frame.index)


def luminance_plane(frame: Frame) -> np.ndarray:
    """(h, w) luminance of a 1- or 3-channel frame."""
    if frame.channels == 1:
        return frame.plane()
    return to_luminance(frame).plane()


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


# ---------------------------------------------------------------------------
# YUV4MPEG2 I/O
#
# Mono videos round-trip bit-exactly for integer-valued samples.  3-channel
# frames are written as C444 via BT.601 full-range YCbCr; on read the chroma
# is discarded by default (the pipeline only analyses luminance) unless
# keep_chroma=True.
# ---------------------------------------------------------------------------

_Y4M_MAGIC = b"YUV4MPEG2"


def _quantize(plane: np.ndarray) -> np.ndarray:
    # round-half-up, clamp to [0, 255]
    return np.clip(np.floor(plane.astype(np.float64) + 0.5), 0, 255).astype(np.uint8)


def _rgb_to_ycbcr(data: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r, g, b = data[:, :, 0], data[:, :, 1], data[:, :, 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 + (b - y) * 0.564
    cr = 128.0 + (r - y) * 0.713
    return y, cb, cr


def _ycbcr_to_rgb(y, cb, cr) -> np.ndarray:
    r = y + 1.403 * (cr - 128.0)
    b = y + 1.773 * (cb - 128.0)
    g = (y - 0.299 * r - 0.114 * b) / 0.587
    return np.stack([r, g, b], axis=-1)


def write_y4m(video: Video, path) -> None:
    """Write a video as YUV4MPEG2 (Cmono for 1-channel, C444 for 3-channel)."""
    fps = video.fps
    colorspace = "mono" if video.channels == 1 else "444"
    header = f"YUV4MPEG2 W{video.width} H{video.height} F{fps.numerator}:{fps.denominator} Ip A1:1 C{colorspace}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for frame in video.frames:
            fh.write(b"FRAME\n")
            if video.channels == 1:
                fh.write(_quantize(frame.plane()).tobytes())
            else:
                for plane in _rgb_to_ycbcr(frame.data):
                    fh.write(_quantize(plane).tobytes())


def read_y4m(path, keep_chroma: bool = False) -> Video:
    """Read an 8-bit YUV4MPEG2 file (mono, 4:2:0 or 4:4:4) into a Video.

    Chroma is discarded unless keep_chroma=True, in which case 4:4:4 input is
    converted back to RGB (4:2:0 chroma is always discarded).
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(_Y4M_MAGIC):
        raise FormatError(f"{path}: missing YUV4MPEG2 magic", offset=0)
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: unterminated stream header", offset=len(raw))
    header = raw[len(_Y4M_MAGIC):nl].decode("ascii", errors="replace")
    width = height = None
    fps = None
    colorspace = "420jpeg"
    for tag in header.split():
        key, value = tag[0], tag[1:]
        if key == "W":
            width = int(value)
        elif key == "H":
            height = int(value)
        elif key == "F":
            m = re.fullmatch(r"(\d+):(\d+)", value)
            if not m:
                raise FormatError(f"{path}: bad frame-rate tag F{value}", offset=len(_Y4M_MAGIC))
            fps = Fraction(int(m.group(1)), int(m.group(2)))
        elif key == "C":
            colorspace = value
    if width is None or height is None or fps is None:
        raise FormatError(f"{path}: header missing W/H/F tag", offset=0)

    ysize = width * height
    if colorspace == "mono":
        csize, subsample = 0, None
    elif colorspace.startswith("420"):
        csize, subsample = (width // 2) * (height // 2), 2
    elif colorspace.startswith("444"):
        csize, subsample = ysize, 1
    else:
        raise FormatError(f"{path}: unsupported colorspace C{colorspace}", offset=0)
    frame_bytes = ysize + 2 * csize

    frames = []
    pos = nl + 1
    index = 0
    while pos < len(raw):
        fnl = raw.find(b"\n", pos)
        if fnl < 0 or not raw[pos:fnl].startswith(b"FRAME"):
            raise FormatError(f"{path}: expected FRAME marker for frame {index}", offset=pos)
        pos = fnl + 1
        payload = raw[pos:pos + frame_bytes]
        if len(payload) < frame_bytes:
            raise FormatError(
                f"{path}: truncated payload for frame {index} "
                f"(got {len(payload)} of {frame_bytes} bytes)", offset=pos)
        y = np.frombuffer(payload[:ysize], dtype=np.uint8).reshape(height, width)
        if keep_chroma and subsample == 1:
            cb = np.frombuffer(payload[ysize:2 * ysize], dtype=np.uint8).reshape(height, width)
            cr = np.frombuffer(payload[2 * ysize:], dtype=np.uint8).reshape(height, width)
            rgb = _ycbcr_to_rgb(y.astype(np.float32), cb.astype(np.float32),
                                cr.astype(np.float32))
            frames.append(Frame(rgb, index=index))
        else:
            frames.append(Frame(y.astype(np.float32)[:, :, None], index=index))
        pos += frame_bytes
        index += 1
    if not frames:
        raise FormatError(f"{path}: no frames in stream", offset=nl + 1)
    return Video(tuple(frames), fps)


# ---------------------------------------------------------------------------
# Synthetic desk-scale video generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Motion:
    """Content motion model: kind in {static, translate, oscillate}.

    translate: (dx, dy) pixels per frame (cumulative offset rounded per frame).
    oscillate: horizontal sine sweep of the given amplitude and period.
    """

    kind: str = "static"
    dx: float = 0.0
    dy: float = 0.0
    amplitude: float = 4.0
    period: int = 12

    @staticmethod
    def parse(text: str) -> "Motion":
        if text == "static":
            return Motion("static")
        m = re.fullmatch(r"translate:(-?[\d.]+),(-?[\d.]+)", text)
        if m:
            return Motion("translate", dx=float(m.group(1)), dy=float(m.group(2)))
        m = re.fullmatch(r"oscillate(?::([\d.]+),(\d+))?", text)
        if m:
            amp = float(m.group(1)) if m.group(1) else 4.0
            per = int(m.group(2)) if m.group(2) else 12
            return Motion("oscillate", amplitude=amp, period=per)
        raise InvalidInputError(f"unknown motion spec {text!r}")

    def offset_at(self, t_frames: float) -> tuple[float, float]:
        """Continuous content offset (ox, oy) after t_frames frame intervals."""
        if self.kind == "static":
            return 0.0, 0.0
        if self.kind == "translate":
            return self.dx * t_frames, self.dy * t_frames
        if self.kind == "oscillate":
            return self.amplitude * math.sin(2.0 * math.pi * t_frames / self.period), 0.0
        raise InvalidInputError(f"unknown motion kind {self.kind!r}")


class SceneRenderer:
    """Deterministic scene that can be sampled at arbitrary content offsets.

    The scene is a large canvas; rendering a frame crops a width x height
    window at the (rounded) offset, with clamp-to-edge behaviour at the
    canvas border.  Sensor noise is added per rendered frame from the rng
    passed in, so repeated renders stay reproducible.
    """

    def __init__(self, width: int, height: int, pattern: str, seed: int,
                 channels: int = 1, margin: int = 64):
        if pattern not in PATTERNS:
            raise InvalidInputError(f"pattern must be one of {PATTERNS}, got {pattern!r}")
        self.width = width
        self.height = height
        self.channels = channels
        self.margin = margin
        rng = np.random.default_rng(seed)
        ch, cw = height + 2 * margin, width + 2 * margin
        if pattern == "checker":
            cell = 8
            yy, xx = np.mgrid[0:ch, 0:cw]
            canvas = np.where(((yy // cell) + (xx // cell)) % 2 == 0, 64.0, 192.0)
        elif pattern == "gradient-blobs":
            yy, xx = np.mgrid[0:ch, 0:cw]
            canvas = 96.0 + 48.0 * xx / cw + 32.0 * yy / ch
            for _ in range(6):
                cx = rng.uniform(0, cw)
                cy = rng.uniform(0, ch)
                sig = rng.uniform(6, 20)
                amp = rng.uniform(-70, 70)
                canvas = canvas + amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig ** 2))
        else:  # textured-noise
            canvas = rng.uniform(0, 255, size=(ch, cw))
            # mild box smoothing so block matching has structure to lock on
            canvas = (canvas
                      + np.roll(canvas, 1, axis=0) + np.roll(canvas, -1, axis=0)
                      + np.roll(canvas, 1, axis=1) + np.roll(canvas, -1, axis=1)) / 5.0
        canvas = np.clip(canvas, 0, 255).astype(np.float32)
        if channels == 3:
            shades = rng.uniform(0.6, 1.0, size=3).astype(np.float32)
            canvas = canvas[:, :, None] * shades[None, None, :]
        else:
            canvas = canvas[:, :, None]
        self.canvas = canvas

    def render(self, offset: tuple[float, float], noise_sigma: float = 0.0,
               noise_rng: np.random.Generator | None = None) -> np.ndarray:
        # positive offset moves content right/down, so the crop window moves
        # the opposite way over the canvas
        ox = int(round(offset[0]))
        oy = int(round(offset[1]))
        ch, cw = self.canvas.shape[:2]
        x0 = min(max(self.margin - ox, 0), cw - self.width)
        y0 = min(max(self.margin - oy, 0), ch - self.height)
        out = self.canvas[y0:y0 + self.height, x0:x0 + self.width].copy()
        if noise_sigma > 0:
            if noise_rng is None:
                raise InvalidInputError("noise_sigma > 0 requires a noise rng")
            out += noise_rng.normal(0.0, noise_sigma, size=out.shape).astype(np.float32)
            out = np.clip(out, 0, 255)
        return out.astype(np.float32)


def synth_video(width: int, height: int, fps, n_frames: int, pattern: str,
                motion: Motion | str = "static", noise_sigma: float = 0.0,
                seed: int = 0, channels: int = 1) -> Video:
    """Deterministic synthetic video; a detection stack needs >= 6 frames."""
    if n_frames < 6:
        raise InvalidInputError(f"n_frames must be >= 6 (got {n_frames}); "
                                "a detection stack spans 6 frames")
    if isinstance(motion, str):
        motion = Motion.parse(motion)
    margin = max(64, int(abs(motion.dx) * n_frames) + 8, int(abs(motion.dy) * n_frames) + 8,
                 int(motion.amplitude) + 8)
    scene = SceneRenderer(width, height, pattern, seed, channels=channels, margin=margin)
    noise_rng = np.random.default_rng(seed + 1) if noise_sigma > 0 else None
    frames = []
    for k in range(n_frames):
        data = scene.render(motion.offset_at(k), noise_sigma, noise_rng)
        frames.append(Frame(data, index=k))
    return Video(tuple(frames), Fraction(fps))
