import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from frucforge.video import Frame, Video  # noqa: E402
from fractions import Fraction  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_video(frames_data, fps=30):
    """Video from a list of (h, w) or (h, w, c) float arrays."""
    frames = tuple(Frame(np.asarray(d, dtype=np.float32), index=i)
                   for i, d in enumerate(frames_data))
    return Video(frames, Fraction(fps))


@pytest.fixture
def flat_video():
    """Eight identical 16x16 gray frames at 30 fps."""
    return make_video([np.full((16, 16), 128.0)] * 8)
