"""Dense pixelwise visual descriptors from self-supervised geometric correspondence.

The pipeline: synthetic RGBD scene generation (scene), TSDF reconstruction
and masking (recon), match/non-match sampling (correspondence), contrastive
training of a compact FCN (net, loss, training), correspondence evaluation
(evaluation), and descriptor-conditioned grasp planning (grasp).  The
sklearn-style entry point is DenseObjectDescriptor; the CLI lives in cli.
"""

from .dataset import GenConfig, SceneDataset, generate_dataset
from .estimator import DenseObjectDescriptor
from .frames import GroundTruth, RgbdFrame
from .geometry import Intrinsics, Pixel, Pose
from .training import TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "DenseObjectDescriptor", "GenConfig", "SceneDataset", "generate_dataset",
    "GroundTruth", "RgbdFrame", "Intrinsics", "Pixel", "Pose",
    "TrainConfig", "TrainResult", "train", "__version__",
]
