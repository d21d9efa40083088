"""frucforge: frame-rate up-conversion forgery and detection toolkit.

Forging: NNI / BI / MCI up-conversion of raw Y4M video with ground-truth
forged masks.  Detection: a residual-stack convolutional classifier with a
majority-voting ensemble and sliding-window temporal localization, built on
a self-contained numpy training stack.
"""

__version__ = "0.1.0"

from .errors import FormatError, FrucError, InvalidInputError, OutOfRangeError
from .video import (Frame, FrameAccessCounter, Motion, SceneRenderer, Video,
                    psnr, read_y4m, synth_video, to_luminance, write_y4m)
from .interp import (ConversionPlan, Duplicate, Interpolated, MotionField,
                     Original, estimate_motion, mci_synthesize, plan_conversion,
                     smooth_motion, upconvert)
from .preprocess import (ResidualStack, StackOrigin, augment, build_input,
                         extract_stack, read_stack_cache, sample_stacks,
                         write_stack_cache)
from .fcdnet import (FcdNet, NetConfig, desk_config, load, solve_channel_plan)
from .traineval import (MetricsReport, Verdict, build_synth_pairs,
                        compute_metrics, detect, localize, majority_vote,
                        make_spliced_video, train)

__all__ = [
    "FrucError", "InvalidInputError", "FormatError", "OutOfRangeError",
    "Frame", "Video", "FrameAccessCounter", "Motion", "SceneRenderer",
    "read_y4m", "write_y4m", "synth_video", "to_luminance", "psnr",
    "ConversionPlan", "Original", "Duplicate", "Interpolated", "MotionField",
    "plan_conversion", "upconvert", "estimate_motion", "smooth_motion",
    "mci_synthesize",
    "ResidualStack", "StackOrigin", "extract_stack", "sample_stacks",
    "augment", "build_input", "write_stack_cache", "read_stack_cache",
    "FcdNet", "NetConfig", "desk_config", "load", "solve_channel_plan",
    "MetricsReport", "Verdict", "compute_metrics", "majority_vote", "detect",
    "localize", "train", "build_synth_pairs", "make_spliced_video",
    "__version__",
]
