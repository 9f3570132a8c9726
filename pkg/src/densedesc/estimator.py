"""scikit-learn style front end for dense descriptor learning.

DenseObjectDescriptor is a transformer: fit() trains the descriptor network
on a SceneDataset (or a dataset directory), transform() maps RGB images to
dense descriptor images.  Constructor arguments mirror TrainConfig field
for field, so get_params/set_params/clone compose with the usual sklearn
tooling.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import net as nets
from .dataset import SceneDataset
from .evaluation import DEFAULT_MATCH_THRESHOLD, MatchDecision, best_match
from .geometry import Pixel
from .training import TrainConfig, train
from .validation import check_image_batch


class DenseObjectDescriptor(BaseEstimator, TransformerMixin):
    """Learn a dense pixelwise descriptor mapping from a scene dataset.

    Parameters follow TrainConfig; see training.TrainConfig for semantics.
    Fitted attributes: params_, arch_, adam_state_, train_log_.
    """

    def __init__(self, descriptor_dim=3, steps=3500, mode="consistent",
                 margin=0.5, masking=True, hard_negative_scaling=True,
                 background_randomization=True, augment_rotations=True,
                 comparison_probs=None, n_matches=500, n_nonmatch_per_match=150,
                 n_cross_pairs=None, occlusion_eps=0.01, exclusion_radius=3.0,
                 background_randomization_prob=0.5, base_lr=1e-4,
                 weight_decay=1e-4, lr_decay=0.9, lr_decay_every=250,
                 checkpoint_every=500, seed=0, out_dir=None):
        self.descriptor_dim = descriptor_dim
        self.steps = steps
        self.mode = mode
        self.margin = margin
        self.masking = masking
        self.hard_negative_scaling = hard_negative_scaling
        self.background_randomization = background_randomization
        self.augment_rotations = augment_rotations
        self.comparison_probs = comparison_probs
        self.n_matches = n_matches
        self.n_nonmatch_per_match = n_nonmatch_per_match
        self.n_cross_pairs = n_cross_pairs
        self.occlusion_eps = occlusion_eps
        self.exclusion_radius = exclusion_radius
        self.background_randomization_prob = background_randomization_prob
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.checkpoint_every = checkpoint_every
        self.seed = seed
        self.out_dir = out_dir

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            mode=self.mode, steps=self.steps, seed=self.seed,
            descriptor_dim=self.descriptor_dim, margin=self.margin,
            masking=self.masking,
            hard_negative_scaling=self.hard_negative_scaling,
            background_randomization=self.background_randomization,
            augment_rotations=self.augment_rotations,
            comparison_probs=self.comparison_probs,
            n_matches=self.n_matches,
            n_nonmatch_per_match=self.n_nonmatch_per_match,
            n_cross_pairs=self.n_cross_pairs,
            occlusion_eps=self.occlusion_eps,
            exclusion_radius=self.exclusion_radius,
            background_randomization_prob=self.background_randomization_prob,
            base_lr=self.base_lr, weight_decay=self.weight_decay,
            lr_decay=self.lr_decay, lr_decay_every=self.lr_decay_every,
            checkpoint_every=self.checkpoint_every)

    def fit(self, X, y=None):
        """Train on a SceneDataset instance or a dataset directory path."""
        dataset = X if isinstance(X, SceneDataset) \
            else SceneDataset.load(Path(X))
        result = train(self._train_config(), dataset, out_dir=self.out_dir)
        self.params_ = result.params
        self.arch_ = result.arch
        self.adam_state_ = result.state
        self.train_log_ = result.log
        return self

    def transform(self, X):
        """Map RGB image(s) to descriptor image(s).

        Accepts one (H, W, 3) image, a list, or an (N, H, W, 3) array;
        returns matching (H, W, D) or (N, H, W, D) float64 output.
        """
        check_is_fitted(self, "params_")
        images, single = check_image_batch(X)
        descs = [nets.forward(self.params_, self.arch_, img)[0] for img in images]
        return descs[0] if single else np.stack(descs)

    def match(self, image_a, pixel, image_b, search_mask=None,
              match_threshold: float = DEFAULT_MATCH_THRESHOLD) -> MatchDecision:
        """Best descriptor match of image_a's pixel inside image_b."""
        check_is_fitted(self, "params_")
        desc_a = self.transform(image_a)
        desc_b = self.transform(image_b)
        u, v = pixel if not isinstance(pixel, Pixel) else (pixel.u, pixel.v)
        return best_match(desc_a, Pixel(float(u), float(v)), desc_b,
                          search_mask=search_mask, match_threshold=match_threshold)

    @classmethod
    def from_checkpoint(cls, path_prefix) -> "DenseObjectDescriptor":
        """Inference-ready estimator from a saved checkpoint."""
        params, arch, state = nets.load_checkpoint(path_prefix)
        est = cls(descriptor_dim=arch.descriptor_dim)
        est.params_ = params
        est.arch_ = arch
        est.adam_state_ = state
        est.train_log_ = []
        return est
