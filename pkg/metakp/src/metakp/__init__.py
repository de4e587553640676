"""Toy-scale self-supervised keypoint network with meta-learned training.

Trains a small detector/descriptor network on homography-warped synthetic
images and exports keypoint sidecar files for the SLAM engine. The only
coupling to the engine is the sidecar file format.
"""

from .net import KeypointNet
from .data import TrainSample, make_corner_image, random_homography, warp_and_label
from .losses import descriptor_loss, detector_loss, sample_loss, total_loss
from .maml import MamlConfig, maml_train
from .export import export_sidecars

__all__ = [
    "KeypointNet",
    "TrainSample",
    "make_corner_image",
    "random_homography",
    "warp_and_label",
    "detector_loss",
    "descriptor_loss",
    "total_loss",
    "sample_loss",
    "MamlConfig",
    "maml_train",
    "export_sidecars",
]
