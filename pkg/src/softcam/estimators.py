"""scikit-learn style wrappers around the backbone, heads and trainer."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from . import models as M
from . import saliency as S
from . import training as T
from .synthdata import Dataset, Split


def check_images(X, input_shape: tuple[int, int, int] | None = None) -> np.ndarray:
    """Coerce X to float32 [n, C, H, W]; [n, H, W] gains a channel axis."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped [n, C, H, W] or [n, H, W], got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("found array with 0 samples")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    if input_shape is not None and X.shape[1:] != tuple(input_shape):
        raise ValueError(f"images have shape {X.shape[1:]}, model expects {tuple(input_shape)}")
    return np.ascontiguousarray(X)


def _split(X, y, idx) -> Split:
    return Split(X[idx], y[idx], np.zeros((len(idx), *X.shape[-2:]), bool), np.asarray(idx))


class _CNNClassifier(ClassifierMixin, BaseEstimator):
    head = "softcam"

    def __init__(self, channels=(16, 32, 64, 128), pools=None, preset="resnet", epochs=20, batch_size=16,
                 lr_init=1e-3, lr_min=1e-4, momentum=0.9, weight_decay=5e-4, augment=True,
                 validation_fraction=0.1, random_state=0):
        self.channels = channels
        self.pools = pools
        self.preset = preset
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_init = lr_init
        self.lr_min = lr_min
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.augment = augment
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _train_config(self) -> T.TrainConfig:
        return T.TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr_init=self.lr_init,
                             lr_min=self.lr_min, momentum=self.momentum,
                             weight_decay=self.weight_decay, augment=self.augment,
                             seed=int(self.random_state or 0))

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ValueError(f"y must have shape ({len(X)},), got {y.shape}")
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        y_enc = np.searchsorted(self.classes_, y).astype(np.int64)
        seed = int(self.random_state or 0)
        idx = np.arange(len(X))
        if self.validation_fraction:
            tr, va = train_test_split(idx, test_size=self.validation_fraction, random_state=seed,
                                      stratify=y_enc)
        else:
            tr, va = idx, idx[:0]
        data = Dataset(_split(X, y_enc, tr), _split(X, y_enc, va), _split(X, y_enc, idx[:0]))
        config = M.BackboneConfig.from_channels(tuple(self.channels), input_shape=X.shape[1:],
                                            pools=self.pools)
        model = M.init_weights(config, len(self.classes_), head=self.head, preset=self.preset, seed=seed)
        self.result_ = T.train(model, data, self._train_config())
        self.model_ = self.result_.model
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return M.predict_proba(self.model_, check_images(X, self.model_.config.input_shape))

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.config.input_shape)
        out = np.concatenate([M.logits(self.model_, X[s:s + 128]).data for s in range(0, len(X), 128)])
        return out[:, 1] - out[:, 0] if out.shape[1] == 2 else out

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def explain(self, X, method="GradCAM", target=None):
        """One saliency map per image for ``target`` (the predicted class by default)."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.config.input_shape)
        pred = np.argmax(self.predict_proba(X), axis=1)
        cls = pred if target is None else np.full(len(X), np.searchsorted(self.classes_, target))
        return np.stack([S.explain(self.model_, x, method, int(c)).values for x, c in zip(X, cls)])


class BlackBoxCNNClassifier(_CNNClassifier):
    """CNN with global average pooling followed by the FC head."""

    head = "blackbox"


class SoftCAMClassifier(TransformerMixin, _CNNClassifier):
    """CNN whose head emits class evidence maps; logits are their spatial means.

    ``transform`` returns the evidence volumes [n, classes, N, M]. ``lambda1`` and
    ``lambda2`` weight the L1 and L2 penalties on the evidence during training.
    """

    def __init__(self, lambda1=0.0, lambda2=0.0, l2_squared=False, channels=(16, 32, 64, 128),
                 pools=None, preset="resnet", epochs=20, batch_size=16, lr_init=1e-3, lr_min=1e-4, momentum=0.9,
                 weight_decay=5e-4, augment=True, validation_fraction=0.1, random_state=0):
        super().__init__(channels=channels, pools=pools, preset=preset, epochs=epochs, batch_size=batch_size,
                         lr_init=lr_init, lr_min=lr_min, momentum=momentum,
                         weight_decay=weight_decay, augment=augment,
                         validation_fraction=validation_fraction, random_state=random_state)
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.l2_squared = l2_squared

    def _train_config(self) -> T.TrainConfig:
        return replace(super()._train_config(), lambda1=self.lambda1, lambda2=self.lambda2,
                       l2_squared=self.l2_squared)

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.config.input_shape)
        return np.concatenate([M.softcam_forward(self.model_, X[s:s + 128])[0].data
                               for s in range(0, len(X), 128)])

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X)

    def explain(self, X, method="SoftCAM-evidence", target=None):
        return super().explain(X, method, target)
