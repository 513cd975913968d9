"""scikit-learn compatible wrappers around the preprocessing pipeline and
the attention/fuzzy classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import tensor as T
from .imaging import AugmentConfig, FundusImage, PreprocessConfig, preprocess
from .model import BackboneConfig, FuzzyAttentionNet, ModelConfig, StageConfig
from .training import TrainConfig, train


def _check_images(X, name: str = "X") -> np.ndarray:
    """Validate an N x H x W x 3 image batch and return it as floats in [0, 1].

    uint8 batches are rescaled by 1/255; float batches must already be in
    the unit interval.
    """
    arr = np.asarray(X)
    is_int = arr.dtype == np.uint8
    arr = check_array(arr, allow_nd=True, ensure_min_samples=1, dtype=None, input_name=name)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must be N x H x W x 3, got shape {arr.shape}")
    if is_int:
        return arr.astype(np.float64) / 255.0
    arr = arr.astype(np.float64)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"float {name} must lie in [0, 1]")
    return arr


class FundusPreprocessor(TransformerMixin, BaseEstimator):
    """Crop, resize, CLAHE and gamma-correct a batch of fundus images.

    Stateless: ``fit`` only validates the input and records its shape.
    """

    def __init__(self, size=224, crop=True, crop_threshold=10, clahe=True, clahe_tiles=(8, 8),
                 clahe_clip=2.0, gamma=True, gamma_mode="adaptive"):
        self.size = size
        self.crop = crop
        self.crop_threshold = crop_threshold
        self.clahe = clahe
        self.clahe_tiles = clahe_tiles
        self.clahe_clip = clahe_clip
        self.gamma = gamma
        self.gamma_mode = gamma_mode

    def config(self) -> PreprocessConfig:
        return PreprocessConfig(size=self.size, crop=self.crop, crop_threshold=self.crop_threshold,
                                clahe=self.clahe, clahe_tiles=tuple(self.clahe_tiles), clahe_clip=self.clahe_clip,
                                gamma=self.gamma, gamma_mode=self.gamma_mode)

    def fit(self, X, y=None):
        X = _check_images(X)
        self.config()
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.input_shape_ = X.shape[1:]
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "input_shape_")
        X = _check_images(X)
        cfg = self.config()
        out = np.empty((len(X), cfg.size, cfg.size, 3))
        for i, px in enumerate(X):
            out[i] = preprocess(FundusImage(px), cfg).to_float().pixels
        return out


class FuzzyAttentionClassifier(ClassifierMixin, BaseEstimator):
    """Attention CNN with a Gaussian fuzzy head, trained with focal loss.

    ``X`` is an N x H x W x 3 batch (uint8 or floats in [0, 1]) that has
    already been preprocessed to a square size. Labels may be any sortable
    values; they are encoded through ``classes_``.
    """

    def __init__(self, channels=(16, 32, 64, 128), head_dim=32, epochs=100, batch_size=16, lr=1e-3,
                 weight_decay=1e-4, gamma=2.0, label_smoothing=0.1, alpha="balanced", augment=True,
                 scheduler="plateau", seed=0):
        self.channels = channels
        self.head_dim = head_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.gamma = gamma
        self.label_smoothing = label_smoothing
        self.alpha = alpha
        self.augment = augment
        self.scheduler = scheduler
        self.seed = seed

    def _model_config(self, size: int, n_classes: int) -> ModelConfig:
        backbone = BackboneConfig(input_size=(size, size), stages=tuple(StageConfig(int(c)) for c in self.channels),
                                  head_dim=self.head_dim)
        return ModelConfig(backbone=backbone, n_classes=n_classes, class_names=tuple(str(c) for c in self.classes_))

    def fit(self, X, y, eval_set=None):
        """Train for ``epochs`` epochs. ``eval_set=(X_val, y_val)`` drives
        the plateau scheduler; without it the training data is reused."""
        X = _check_images(X)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(X):
            raise ValueError(f"y must be a 1-d array of length {len(X)}")
        if X.shape[1] != X.shape[2]:
            raise ValueError("images must be square; run FundusPreprocessor first")
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit")
        if eval_set is None:
            X_val, y_val = X, y_enc
        else:
            X_val = _check_images(eval_set[0], "X_val")
            y_val = self._encode(eval_set[1])
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.input_size_ = X.shape[1]
        model = FuzzyAttentionNet(self._model_config(X.shape[1], len(self.classes_)), seed=self.seed)
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay,
                          gamma=self.gamma, label_smoothing=self.label_smoothing, alpha=self.alpha,
                          augment=AugmentConfig() if self.augment else AugmentConfig.disabled(),
                          scheduler=self.scheduler, seed=self.seed)
        result = train(model, (X, y_enc), (X_val, y_val), cfg)
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    def _encode(self, y) -> np.ndarray:
        y = np.asarray(y)
        pos = np.searchsorted(self.classes_, y)
        pos = np.clip(pos, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[pos] == y):
            raise ValueError("labels contain classes not seen during fit")
        return pos

    def _forward_batches(self, X, batch_size: int = 64):
        check_is_fitted(self, "model_")
        X = _check_images(X)
        if X.shape[1:3] != (self.input_size_, self.input_size_):
            raise ValueError(f"expected {self.input_size_} x {self.input_size_} images, got {X.shape[1:3]}")
        probs, members = [], []
        with T.no_grad():
            for start in range(0, len(X), batch_size):
                xb = X[start:start + batch_size].transpose(0, 3, 1, 2).astype(self.model_.dtype)
                out = self.model_.forward(xb)
                probs.append(out.probs.data)
                members.append(out.memberships)
        return np.concatenate(probs), np.concatenate(members)

    def predict_proba(self, X) -> np.ndarray:
        return self._forward_batches(X)[0]

    def memberships(self, X) -> np.ndarray:
        """Raw Gaussian memberships (not normalized across classes)."""
        return self._forward_batches(X)[1]

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
