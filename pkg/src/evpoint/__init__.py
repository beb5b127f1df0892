"""Event-camera interest points: encodings, a fixed CNN, self-supervised
training, and homography-based evaluation, all in plain numpy."""

from .events import (
    Event,
    EventStream,
    TemporalWindow,
    TripletConfig,
    centered_window,
    triplet_windows,
)
from .features import FeaturePipeline, FeatureSet, Keypoint, extract_keypoints, match
from .geometry import (
    DegenerateGeometryError,
    HomographySampleConfig,
    Match,
    dlt_homography,
    ransac_homography,
    sample_homography,
    warp_frame,
    warp_points,
)
from .network import WeightSet, detector_heatmap, forward_frame, init_weights
from .representation import Representation, encode_triplet, encode_window
from .selfsup import TrainConfig, TrainResult, train_descriptor, train_detector
from .synth import SceneConfig, SyntheticSequence, generate

__version__ = "0.1.0"

__all__ = [
    "Event",
    "EventStream",
    "TemporalWindow",
    "TripletConfig",
    "centered_window",
    "triplet_windows",
    "Representation",
    "encode_window",
    "encode_triplet",
    "DegenerateGeometryError",
    "HomographySampleConfig",
    "Match",
    "dlt_homography",
    "ransac_homography",
    "sample_homography",
    "warp_frame",
    "warp_points",
    "WeightSet",
    "init_weights",
    "forward_frame",
    "detector_heatmap",
    "FeaturePipeline",
    "FeatureSet",
    "Keypoint",
    "extract_keypoints",
    "match",
    "TrainConfig",
    "TrainResult",
    "train_detector",
    "train_descriptor",
    "SceneConfig",
    "SyntheticSequence",
    "generate",
    "__version__",
]
