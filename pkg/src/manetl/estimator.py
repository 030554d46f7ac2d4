"""scikit-learn compatible wrappers around the preprocessing pipeline and model."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from .config import ModelConfig, TrainConfig
from .exceptions import DimensionError
from .functional import log_softmax_array
from .imaging import BACKGROUND, INPUT_SIZE, ROTATION_RANGE, preprocess_image, rotate_with_fill
from .model import MANETL
from .training import Trainer, predict_logits


class CharacterPreprocessor(TransformerMixin, BaseEstimator):
    """Raw RGB character images -> (n, 1, size, size) float32 model inputs.

    Stateless: ``fit`` only records the expected output geometry. Accepts a
    list of (H, W, 3) uint8 arrays of varying size, or one stacked array.
    """

    def __init__(self, size=INPUT_SIZE, invert=True):
        self.size = size
        self.invert = invert

    def fit(self, X, y=None):
        self._validate(X)
        self.n_output_features_ = self.size * self.size
        return self

    def transform(self, X):
        check_is_fitted(self, "n_output_features_")
        images = self._validate(X)
        return np.stack([preprocess_image(img, size=self.size, invert=self.invert)
                         for img in images])

    def _validate(self, X):
        images = list(X)
        if not images:
            raise ValueError("CharacterPreprocessor needs at least one image")
        for i, img in enumerate(images):
            img = np.asarray(img)
            if img.ndim != 3 or img.shape[2] != 3:
                raise DimensionError(f"image {i} must be (H, W, 3), got {img.shape}")
        return images

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.two_d_array = False
        tags.requires_fit = False
        return tags


def _rotation_augmenter(images, seed, rotation_range):
    """Per-epoch rotations of already preprocessed inputs, seeded by (seed, epoch, index)."""

    def augment(epoch):
        out = np.empty_like(images)
        for i, img in enumerate(images):
            angle = np.random.default_rng([seed, epoch, i]).uniform(-rotation_range,
                                                                    rotation_range)
            out[i, 0] = rotate_with_fill(img[0], angle, fill=BACKGROUND)
        return out

    return augment


class MANETLClassifier(ClassifierMixin, BaseEstimator):
    """Two-branch attention classifier with a scikit-learn interface.

    ``X`` holds preprocessed images of shape (n, 1, input_size, input_size);
    pipe raw images through :class:`CharacterPreprocessor` first. Labels may
    be any hashable values; they are encoded through ``classes_``.
    """

    def __init__(self, variant="ensemble", epochs=30, batch_size=32, learning_rate=0.01,
                 momentum=0.9, weight_decay=1e-4, aux_weight=0.3, augment=True,
                 rotation_range=ROTATION_RANGE, input_size=INPUT_SIZE, stem_channels=16,
                 branch_channels=64, head_dropout=0.5, random_state=0):
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.aux_weight = aux_weight
        self.augment = augment
        self.rotation_range = rotation_range
        self.input_size = input_size
        self.stem_channels = stem_channels
        self.branch_channels = branch_channels
        self.head_dropout = head_dropout
        self.random_state = random_state

    def _check_images(self, X):
        X = np.asarray(X, dtype=np.float32)
        size = self.input_size
        if X.ndim == 3:
            X = X[:, None]
        if X.ndim != 4 or X.shape[1:] != (1, size, size):
            raise DimensionError(f"expected images of shape (n, 1, {size}, {size}), got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("input contains NaN or infinity")
        return X

    def fit(self, X, y):
        X = self._check_images(X)
        y = np.asarray(y)
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        model_config = ModelConfig(
            num_classes=len(self.classes_), variant=self.variant, input_size=self.input_size,
            stem_channels=self.stem_channels, branch_channels=self.branch_channels,
            head_dropout=self.head_dropout)
        train_config = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            momentum=self.momentum, weight_decay=self.weight_decay, seed=self.random_state,
            aux_weight=self.aux_weight, augment=self.augment)
        augmenter = None
        if self.augment:
            augmenter = _rotation_augmenter(X, self.random_state, self.rotation_range)
        self.model_ = MANETL(model_config, seed=self.random_state)
        trainer = Trainer(self.model_, train_config, augmenter)
        self.history_ = trainer.fit(X, encoded.astype(np.int64))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return predict_logits(self.model_, self._check_images(X)).astype(np.float64)

    def predict_log_proba(self, X):
        return log_softmax_array(self.decision_function(X))

    def predict_proba(self, X):
        return np.exp(self.predict_log_proba(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
