"""Paired-batch training, metrics, voting-ensemble detection and temporal
localization, plus the synthetic paired corpus used at desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import fcdnet, interp, nn, preprocess
from .errors import InvalidInputError, OutOfRangeError
from .preprocess import LABEL_FORGED, LABEL_ORIGINAL, ResidualStack, STACK_FRAMES
from .video import Frame, SceneRenderer, Video

DEFAULT_SCHEMES = ("nni", "bi", "mci")
DEFAULT_FPS_PAIRS = ((15, 20), (15, 30), (25, 30))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    tn: int
    fp: int
    fn: int
    tnr: float        # percent; nan when undefined
    tpr: float        # percent (recall); nan when undefined
    precision: float  # percent; nan when undefined
    recall: float     # percent; nan when undefined
    f1: float         # percent; nan when undefined
    undefined: tuple[str, ...] = ()

    def as_row(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn,
                "tnr": self.tnr, "tpr": self.tpr, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


def compute_metrics(predictions, labels) -> MetricsReport:
    """Confusion counts and percentage rates; forged (label 1) is positive.

    TNR = TN/(TN+FP), TPR = recall = TP/(TP+FN), F1 the harmonic mean of
    precision and recall.  Zero-denominator ratios come back as NaN with the
    metric name listed in `undefined`, never silently 0.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0:
        raise InvalidInputError("compute_metrics needs at least one sample")
    if predictions.shape != labels.shape:
        raise InvalidInputError("predictions and labels must have equal length")
    if np.any((labels != 0) & (labels != 1)):
        raise InvalidInputError("labels must be 0 or 1")
    if np.any((predictions != 0) & (predictions != 1)):
        raise InvalidInputError("predictions must be 0 or 1")
    tp = int(np.sum((predictions == 1) & (labels == 1)))
    tn = int(np.sum((predictions == 0) & (labels == 0)))
    fp = int(np.sum((predictions == 1) & (labels == 0)))
    fn = int(np.sum((predictions == 0) & (labels == 1)))
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return math.nan
        return 100.0 * num / den

    tnr = ratio(tn, tn + fp, "tnr")
    recall = ratio(tp, tp + fn, "recall")
    precision = ratio(tp, tp + fp, "precision")
    if math.isnan(precision) or math.isnan(recall) or precision + recall == 0:
        undefined.append("f1")
        f1 = math.nan
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return MetricsReport(tp, tn, fp, fn, tnr, recall, precision, recall, f1,
                         tuple(undefined))


# ---------------------------------------------------------------------------
# Detection and localization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    probs: np.ndarray   # (n_stacks, 2)
    votes: np.ndarray   # (n_stacks,) per-stack argmax
    decision: int       # 0 original / 1 forged


def majority_vote(votes) -> int:
    """Majority decision over 0/1 votes; an even split counts as forged."""
    votes = np.asarray(votes)
    return int(2 * int(votes.sum()) >= len(votes))


def _forward_stacks(net: fcdnet.FcdNet, stacks: list[ResidualStack],
                    chunk: int = 32) -> np.ndarray:
    probs = []
    for i in range(0, len(stacks), chunk):
        x = np.stack([s.planes for s in stacks[i:i + chunk]])
        probs.append(net.forward(x.astype(np.float32), training=False))
    return np.concatenate(probs)


def detect(net: fcdnet.FcdNet, video, n_stacks: int = 9, seed: int = 0,
           video_id: str = "") -> Verdict:
    """Sample n_stacks residual stacks, classify each and take the majority."""
    if len(video) < STACK_FRAMES:
        raise OutOfRangeError(
            f"detection needs at least {STACK_FRAMES} frames, video has {len(video)}")
    stacks = preprocess.sample_stacks(video, n_stacks, seed,
                                      crop_size=net.config.crop_size,
                                      video_id=video_id)
    probs = _forward_stacks(net, stacks)
    votes = np.array([fcdnet.classify(row) for row in probs])
    return Verdict(probs, votes, majority_vote(votes))


def localize(net: fcdnet.FcdNet, video, crop_x: int = 0, crop_y: int = 0):
    """Slide a 6-frame window with stride 1 over the video.

    Returns (window_scores, frame_scores): the forged probability of each of
    the N-5 windows, and the per-frame mean over the windows covering each
    frame.
    """
    n = len(video)
    if n < STACK_FRAMES:
        raise OutOfRangeError(
            f"localization needs at least {STACK_FRAMES} frames, video has {n}")
    stacks = [preprocess.extract_stack(video, start, crop_x, crop_y,
                                       net.config.crop_size)
              for start in range(n - STACK_FRAMES + 1)]
    window_scores = _forward_stacks(net, stacks)[:, 1]
    frame_sum = np.zeros(n)
    frame_cnt = np.zeros(n)
    for start, score in enumerate(window_scores):
        frame_sum[start:start + STACK_FRAMES] += score
        frame_cnt[start:start + STACK_FRAMES] += 1
    return window_scores, frame_sum / frame_cnt


# ---------------------------------------------------------------------------
# Paired training
# ---------------------------------------------------------------------------

StackPair = tuple[ResidualStack, ResidualStack]  # (original, forged)


def pair_up(stacks: list[ResidualStack]) -> list[StackPair]:
    """Match labeled stacks into (original, forged) pairs that share a video
    id and start frame."""
    originals = {}
    pairs = []
    for s in stacks:
        if s.label == LABEL_ORIGINAL:
            originals[(s.origin.video_id, s.origin.start_frame,
                       s.origin.crop_x, s.origin.crop_y)] = s
    for s in stacks:
        if s.label == LABEL_FORGED:
            key = (s.origin.video_id, s.origin.start_frame,
                   s.origin.crop_x, s.origin.crop_y)
            if key in originals:
                pairs.append((originals[key], s))
    return pairs


def _check_pair(pair: StackPair):
    a, b = pair
    if a.origin.start_frame != b.origin.start_frame:
        raise InvalidInputError("paired stacks must share a start frame")


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val_f1: float


def evaluate_pairs(net: fcdnet.FcdNet, pairs: list[StackPair]) -> MetricsReport:
    stacks = [s for pair in pairs for s in pair]
    labels = np.array([0, 1] * len(pairs))
    probs = _forward_stacks(net, stacks)
    preds = np.array([fcdnet.classify(row) for row in probs])
    return compute_metrics(preds, labels)


def train(net: fcdnet.FcdNet, pairs: list[StackPair], epochs: int,
          lr: float = 1e-4, weight_decay: float = 1e-5, batch_size: int = 64,
          seed: int = 0, val_pairs: list[StackPair] | None = None,
          val_every: int = 1, log=None) -> TrainResult:
    """Paired mini-batch training: each step holds batch_size/2 original and
    batch_size/2 forged stacks from identical video positions, with a shared
    random rotation/flip per pair.  When a validation split is given, the
    parameters of the best-validation-F1 epoch are restored at the end.
    """
    if not pairs:
        raise InvalidInputError("training dataset has no pairs")
    for pair in pairs:
        _check_pair(pair)
    pairs_per_step = max(1, batch_size // 2)
    rng = np.random.default_rng(seed)
    history: list[dict] = []
    best_f1 = -1.0
    best_epoch = -1
    best_state = None
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for step_start in range(0, len(order), pairs_per_step):
            chosen = order[step_start:step_start + pairs_per_step]
            batch = [preprocess.augment(pairs[i], rng) for i in chosen]
            x = np.stack([s.planes for pair in batch for s in pair]).astype(np.float32)
            labels = np.array([0, 1] * len(batch))
            probs = net.forward(x, training=True)
            loss, grad_logits = nn.bce_loss(probs, labels)
            net.store.zero_grad()
            net.backward(grad_logits)
            nn.adam_step(net.store, lr, weight_decay=weight_decay)
            losses.append(loss)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_pairs and (epoch % val_every == 0 or epoch == epochs - 1):
            report = evaluate_pairs(net, val_pairs)
            record["val_f1"] = report.f1
            record["val_acc"] = 100.0 * (report.tp + report.tn) / (
                report.tp + report.tn + report.fp + report.fn)
            if not math.isnan(report.f1) and report.f1 > best_f1:
                best_f1 = report.f1
                best_epoch = epoch
                best_state = net.store.clone_values()
        history.append(record)
        if log:
            log(record)
    if best_state is not None:
        net.store.load_values(best_state)
    return TrainResult(history, best_epoch, best_f1)


# ---------------------------------------------------------------------------
# Synthetic paired corpus (desk-scale stand-in for real datasets)
# ---------------------------------------------------------------------------


def render_scene_video(scene: SceneRenderer, fps, n_frames: int,
                       velocity_px_per_sec: tuple[float, float],
                       noise_sigma: float, noise_rng: np.random.Generator) -> Video:
    """Sample a scene at the given frame rate with constant content velocity."""
    fps = Fraction(fps)
    vx, vy = velocity_px_per_sec
    frames = []
    for k in range(n_frames):
        t = k / float(fps)
        data = scene.render((vx * t, vy * t), noise_sigma, noise_rng)
        frames.append(Frame(data, index=k))
    return Video(tuple(frames), fps)


@dataclass(frozen=True)
class SynthCase:
    """One synthetic video pair: a true video at the target rate and a forged
    version obtained by up-converting the lower-rate sampling of the same
    scene."""

    video_id: str
    scheme: str
    src_fps: int
    dst_fps: int
    original: Video
    forged: Video
    forged_mask: list[bool]


def make_synth_case(video_id: str, scheme: str, src_fps: int, dst_fps: int,
                    seed: int, size: int = 64, n_src_frames: int = 24,
                    pattern: str = "textured-noise", noise_sigma: float = 4.0) -> SynthCase:
    rng = np.random.default_rng(seed)
    speed = float(rng.uniform(0.8, 2.0)) * src_fps  # ~1-2 px per source frame
    angle = float(rng.uniform(0, 2 * math.pi))
    velocity = (speed * math.cos(angle), speed * math.sin(angle))
    margin = int(abs(velocity[0]) + abs(velocity[1])) * (n_src_frames // src_fps + 1) + 64
    scene = SceneRenderer(size, size, pattern, int(rng.integers(0, 2 ** 31)),
                          margin=margin)
    noise_rng = np.random.default_rng(int(rng.integers(0, 2 ** 31)))
    src_video = render_scene_video(scene, src_fps, n_src_frames, velocity,
                                   noise_sigma, noise_rng)
    plan = interp.plan_conversion(src_fps, dst_fps, scheme)
    forged, mask = interp.upconvert(src_video, plan)
    original = render_scene_video(scene, dst_fps, len(forged), velocity,
                                  noise_sigma, noise_rng)
    return SynthCase(video_id, scheme, src_fps, dst_fps, original, forged, mask)


def build_synth_pairs(n_videos: int, seed: int = 0, crop: int = 64,
                      stacks_per_video: int = 2,
                      schemes=DEFAULT_SCHEMES, fps_pairs=DEFAULT_FPS_PAIRS,
                      n_src_frames: int = 24) -> tuple[list[StackPair], list[SynthCase]]:
    """Paired stacks over a synthetic corpus cycling through the scheme and
    frame-rate grid; original and forged stacks share positions."""
    rng = np.random.default_rng(seed)
    pairs: list[StackPair] = []
    cases: list[SynthCase] = []
    combos = [(sch, sf, df) for sch in schemes for sf, df in fps_pairs]
    for i in range(n_videos):
        scheme, src_fps, dst_fps = combos[i % len(combos)]
        case = make_synth_case(f"synth-{seed}-{i}", scheme, src_fps, dst_fps,
                               seed=int(rng.integers(0, 2 ** 31)), size=crop,
                               n_src_frames=n_src_frames)
        cases.append(case)
        n_out = len(case.forged)
        for _ in range(stacks_per_video):
            start = int(rng.integers(0, n_out - STACK_FRAMES + 1))
            orig = preprocess.extract_stack(case.original, start, 0, 0, crop,
                                            video_id=case.video_id,
                                            label=LABEL_ORIGINAL)
            forged = preprocess.extract_stack(case.forged, start, 0, 0, crop,
                                              video_id=case.video_id,
                                              label=LABEL_FORGED)
            pairs.append((orig, forged))
    return pairs, cases


def make_spliced_video(seed: int = 0, size: int = 64, src_fps: int = 15,
                       dst_fps: int = 25, segment_frames: tuple[int, int, int] = (25, 25, 25),
                       scheme: str = "nni") -> tuple[Video, list[bool]]:
    """Original / up-converted / original splice at a uniform output rate,
    with the per-frame forged mask."""
    n_fore, n_mid, n_aft = segment_frames
    total_out = n_fore + n_mid + n_aft
    n_src = math.ceil(total_out * src_fps / dst_fps) + STACK_FRAMES
    case = make_synth_case(f"splice-{seed}", scheme, src_fps, dst_fps, seed,
                           size=size, n_src_frames=n_src)
    if len(case.forged) < total_out:
        raise InvalidInputError("spliced segments longer than rendered video")
    frames = []
    mask = []
    for q in range(total_out):
        if n_fore <= q < n_fore + n_mid:
            frames.append(Frame(case.forged.frames[q].data, index=q))
            mask.append(bool(case.forged_mask[q]))
        else:
            frames.append(Frame(case.original.frames[q].data, index=q))
            mask.append(False)
    return Video(tuple(frames), Fraction(dst_fps)), mask
