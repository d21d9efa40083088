"""Frame-rate up-conversion: output scheduling plus NNI/BI/MCI synthesis.

Scheduling works on one conversion cycle.  With src and dst frame rates
brought to a common denominator (a and b ticks per second, g = gcd(a, b)),
a cycle spans L = b/g output slots covering S = a/g source frames.  Output
slot k sits at time k*a on a grid where source frame j sits at j*b.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import InvalidInputError
from .video import Frame, Video, luminance_plane

SCHEMES = ("nni", "bi", "mci")

DEFAULT_BLOCK_SIZE = 16
DEFAULT_SEARCH_RANGE = 7


@dataclass(frozen=True)
class Original:
    src_offset: int


@dataclass(frozen=True)
class Duplicate:
    src_offset: int


@dataclass(frozen=True)
class Interpolated:
    prev_offset: int
    next_offset: int
    alpha: Fraction  # weight on the previous frame; weight on next is 1 - alpha


@dataclass(frozen=True)
class ConversionPlan:
    src_fps: Fraction
    dst_fps: Fraction
    scheme: str
    cycle: tuple  # SlotRole per output slot of one cycle
    sources_per_cycle: int

    @property
    def cycle_length(self) -> int:
        return len(self.cycle)

    @property
    def forged_fraction(self) -> Fraction:
        forged = sum(1 for s in self.cycle if not isinstance(s, Original))
        return Fraction(forged, len(self.cycle))


def plan_conversion(src_fps, dst_fps, scheme: str,
                    bi_fixed_half: bool = False) -> ConversionPlan:
    """Slot schedule for one conversion cycle.

    NNI emits every source frame once (Original) and fills the remaining
    slots by duplicating the temporally nearest source frame (ties take the
    earlier frame).  BI/MCI keep a slot Original only when its timestamp
    coincides with a source timestamp and interpolate every other slot from
    the bracketing sources with alpha = (t_next - t) / (t_next - t_prev).
    """
    scheme = scheme.lower()
    if scheme not in SCHEMES:
        raise InvalidInputError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    src = Fraction(src_fps)
    dst = Fraction(dst_fps)
    if src <= 0 or dst <= 0:
        raise InvalidInputError("frame rates must be positive")
    if dst <= src:
        raise InvalidInputError(
            f"down-conversion is unsupported (src {src} >= dst {dst})")
    den = src.denominator * dst.denominator // math.gcd(src.denominator, dst.denominator)
    a = int(src * den)  # source ticks
    b = int(dst * den)  # output ticks
    g = math.gcd(a, b)
    cycle_len = b // g
    sources = a // g

    cycle = []
    if scheme == "nni":
        prev_j = None
        for k in range(cycle_len):
            j0 = (k * a) // b
            d0 = k * a - j0 * b
            d1 = (j0 + 1) * b - k * a
            j = j0 if d0 <= d1 else j0 + 1  # tie -> earlier frame
            if j != prev_j:
                cycle.append(Original(j))
            else:
                cycle.append(Duplicate(j))
            prev_j = j
    else:
        for k in range(cycle_len):
            t = k * a
            if t % b == 0:
                cycle.append(Original(t // b))
            else:
                prev_j = t // b
                next_j = prev_j + 1
                alpha = Fraction(1, 2) if bi_fixed_half else Fraction(next_j * b - t, b)
                cycle.append(Interpolated(prev_j, next_j, alpha))
    return ConversionPlan(src, dst, scheme, tuple(cycle), sources)


@dataclass(frozen=True)
class MotionField:
    """Per-block integer motion vectors between two frames.

    vectors[gy, gx] = (u_x, u_y): sampling next's block at +u in prev
    minimizes the SAD, i.e. the vector points from the interpolated position
    into the previous frame.
    """

    block_size: int
    vectors: np.ndarray  # (grid_h, grid_w, 2) int, (u_x, u_y)
    costs: np.ndarray    # (grid_h, grid_w) float SAD

    @property
    def grid_h(self) -> int:
        return self.vectors.shape[0]

    @property
    def grid_w(self) -> int:
        return self.vectors.shape[1]


def _block_sums(img: np.ndarray, block_size: int) -> np.ndarray:
    h, w = img.shape
    rows = np.add.reduceat(img, np.arange(0, h, block_size), axis=0)
    return np.add.reduceat(rows, np.arange(0, w, block_size), axis=1)


def estimate_motion(prev: Frame, next_: Frame, block_size: int = DEFAULT_BLOCK_SIZE,
                    search_range: int = DEFAULT_SEARCH_RANGE) -> MotionField:
    """Exhaustive full-search block matching of next blocks into prev.

    Ties are broken by smaller |u|_1, then by candidate raster order
    (dy outer, dx inner, both ascending), so the result is deterministic.
    """
    if prev.channels != 1 or next_.channels != 1:
        raise InvalidInputError("motion estimation expects 1-channel frames")
    if prev.data.shape != next_.data.shape:
        raise InvalidInputError("frames must share dimensions")
    if block_size < 4:
        raise InvalidInputError(f"block_size must be >= 4, got {block_size}")
    if search_range < 1:
        raise InvalidInputError(f"search_range must be >= 1, got {search_range}")
    h, w = prev.data.shape[:2]
    if h < block_size or w < block_size:
        raise InvalidInputError("frame smaller than one block")

    p = prev.plane().astype(np.float64)
    n = next_.plane().astype(np.float64)
    r = search_range
    p_pad = np.pad(p, r, mode="edge")

    gh = -(-h // block_size)
    gw = -(-w // block_size)
    best_cost = np.full((gh, gw), np.inf)
    best_l1 = np.full((gh, gw), np.inf)
    best_u = np.zeros((gh, gw, 2), dtype=np.int64)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = p_pad[r + dy:r + dy + h, r + dx:r + dx + w]
            sad = _block_sums(np.abs(n - shifted), block_size)
            l1 = abs(dx) + abs(dy)
            better = (sad < best_cost) | ((sad == best_cost) & (l1 < best_l1))
            best_cost = np.where(better, sad, best_cost)
            best_l1 = np.where(better, l1, best_l1)
            best_u[better] = (dx, dy)
    return MotionField(block_size, best_u, best_cost)


def smooth_motion(field: MotionField) -> MotionField:
    """Component-wise 3x3 median over the block grid; edge blocks use the
    neighbors that exist.  Costs are left untouched."""
    gh, gw = field.grid_h, field.grid_w
    out = np.empty_like(field.vectors)
    for gy in range(gh):
        for gx in range(gw):
            y0, y1 = max(gy - 1, 0), min(gy + 2, gh)
            x0, x1 = max(gx - 1, 0), min(gx + 2, gw)
            hood = field.vectors[y0:y1, x0:x1].reshape(-1, 2)
            out[gy, gx, 0] = int(np.median(hood[:, 0]))
            out[gy, gx, 1] = int(np.median(hood[:, 1]))
    return MotionField(field.block_size, out, field.costs)


def mci_synthesize(prev: Frame, next_: Frame, field: MotionField, alpha: float) -> Frame:
    """Motion-compensated blend of prev and next at weight alpha on prev.

    Per block with stored vector u (pointing from next into prev), the output
    samples prev displaced by round((1 - alpha) * u) and next displaced by
    round(-alpha * u), the linear-motion split of the full displacement, then
    blends alpha * prev_sample + (1 - alpha) * next_sample.  Out-of-frame
    samples clamp to the edge.
    """
    if prev.data.shape != next_.data.shape:
        raise InvalidInputError("frames must share dimensions")
    if not 0.0 <= float(alpha) <= 1.0:
        raise InvalidInputError(f"alpha must lie in [0, 1], got {alpha}")
    alpha = float(alpha)
    h, w = prev.data.shape[:2]
    bs = field.block_size

    # per-pixel displacement maps from the per-block vectors
    u = np.repeat(np.repeat(field.vectors, bs, axis=0), bs, axis=1)[:h, :w]
    du = np.rint((1.0 - alpha) * u).astype(np.int64)
    dv = np.rint(-alpha * u).astype(np.int64)

    yy, xx = np.mgrid[0:h, 0:w]
    py = np.clip(yy + du[:, :, 1], 0, h - 1)
    px = np.clip(xx + du[:, :, 0], 0, w - 1)
    ny = np.clip(yy + dv[:, :, 1], 0, h - 1)
    nx = np.clip(xx + dv[:, :, 0], 0, w - 1)
    out = alpha * prev.data[py, px] + (1.0 - alpha) * next_.data[ny, nx]
    return Frame(out.astype(np.float32), index=prev.index)


def _interpolate_frame(prev: Frame, next_: Frame, slot: Interpolated, scheme: str,
                       block_size: int, search_range: int, out_index: int) -> Frame:
    alpha = float(slot.alpha)
    if scheme == "bi":
        data = alpha * prev.data + (1.0 - alpha) * next_.data
        return Frame(data.astype(np.float32), index=out_index)
    # MCI: motion from luminance, compensation applied per channel
    p_luma = Frame(luminance_plane(prev)[:, :, None])
    n_luma = Frame(luminance_plane(next_)[:, :, None])
    field = smooth_motion(estimate_motion(p_luma, n_luma, block_size, search_range))
    if prev.channels == 1:
        return Frame(mci_synthesize(prev, next_, field, alpha).data, index=out_index)
    chans = [mci_synthesize(Frame(prev.data[:, :, c:c + 1]),
                            Frame(next_.data[:, :, c:c + 1]), field, alpha).data[:, :, 0]
             for c in range(prev.channels)]
    return Frame(np.stack(chans, axis=-1), index=out_index)


def upconvert(video: Video, plan: ConversionPlan,
              block_size: int = DEFAULT_BLOCK_SIZE,
              search_range: int = DEFAULT_SEARCH_RANGE) -> tuple[Video, list[bool]]:
    """Apply a conversion plan to a video.

    Original/Duplicate slots copy source frames bit-exactly; Interpolated
    slots are synthesized per the plan's scheme.  The forged mask marks
    Duplicate and Interpolated outputs.
    """
    if video.fps != plan.src_fps:
        raise InvalidInputError(
            f"video fps {video.fps} does not match plan source fps {plan.src_fps}")
    n = len(video)
    if n == 0:
        raise InvalidInputError("empty video")
    L = plan.cycle_length
    S = plan.sources_per_cycle
    frames: list[Frame] = []
    mask: list[bool] = []
    q = 0
    while True:
        cyc, pos = divmod(q, L)
        base = cyc * S
        slot = plan.cycle[pos]
        if isinstance(slot, (Original, Duplicate)):
            src = base + slot.src_offset
            if src >= n:
                break
            frames.append(Frame(video.frames[src].data, index=q))
            mask.append(isinstance(slot, Duplicate))
        else:
            p_idx = base + slot.prev_offset
            nx_idx = base + slot.next_offset
            if nx_idx >= n:
                break
            frames.append(_interpolate_frame(video.frames[p_idx], video.frames[nx_idx],
                                             slot, plan.scheme, block_size,
                                             search_range, q))
            mask.append(True)
        q += 1
    return Video(tuple(frames), plan.dst_fps), mask
