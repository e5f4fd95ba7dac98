"""Scikit-learn style classifiers wrapping the capsule network and the
matched baseline CNN, so both compose with pipelines, grid search, and
cross-validation.

Estimator defaults are sized for a CPU: a narrow four-capsule-layer network
and a few epochs.  Widen ``base_capsules``/``stem_channels`` and raise
``epochs`` for accuracy at the cost of wall-clock time.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .data import Dataset, preprocess
from .errors import ShapeError
from .kernels import KernelSpec
from .network import build_baseline_cnn, desk_spec
from .routing import RoutingConfig
from .training import TrainConfig, evaluate, predict_proba, train


def validate_images(X, image_size: int):
    """Coerce X to [n, image_size, image_size, 1] standardized images.

    Accepts [n, h, w], [n, h, w, 1], or flat [n, h*w] with square h == w.
    Rejects non-finite input.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        side = int(round(np.sqrt(X.shape[1])))
        if side * side != X.shape[1]:
            raise ShapeError(f"flat input of width {X.shape[1]} is not square")
        X = X.reshape(X.shape[0], side, side)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4 or X.shape[-1] != 1 or X.shape[0] < 1:
        raise ShapeError(f"expected [n,h,w] or [n,h,w,1] images, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ShapeError("input images contain non-finite values")
    return preprocess(X, target=image_size)


def validate_labels(y, n: int):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    return y


class _RoutedNetworkClassifier(ClassifierMixin, BaseEstimator):
    """Shared fit/predict machinery; subclasses supply the network spec."""

    def _build_spec(self, classes):
        raise NotImplementedError

    def _train_config(self):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           loss=self.loss, learning_rate=self.learning_rate,
                           momentum=self.momentum, seed=self.seed,
                           margin_ramp_epochs=min(5.0, float(self.epochs)))

    def fit(self, X, y):
        images = validate_images(X, self.image_size)
        y = validate_labels(y, images.shape[0])
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ShapeError("need at least two classes to fit")
        dataset = Dataset(images, encoded, classes=self.classes_.size, split="fit")
        self.network_spec_ = self._build_spec(self.classes_.size)
        self.params_, self.report_ = train(dataset=dataset, cfg=self._train_config(),
                                           spec=self.network_spec_)
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet")

    def predict_proba(self, X):
        self._check_fitted()
        images = validate_images(X, self.image_size)
        return predict_proba(self.network_spec_, self.params_, images)

    def predict(self, X):
        self._check_fitted()
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def error_rate(self, X, y):
        """Top-1 error (1 - accuracy) on encoded labels."""
        self._check_fitted()
        images = validate_images(X, self.image_size)
        y = validate_labels(y, images.shape[0])
        encoded = np.searchsorted(self.classes_, y)
        return evaluate(self.network_spec_, self.params_,
                        Dataset(images, encoded, classes=self.classes_.size))


class CapsuleNetClassifier(_RoutedNetworkClassifier):
    """Capsule network classifier with weighted-KDE dynamic routing."""

    def __init__(self, routing_method="frem", base_capsules=2, stem_channels=8,
                 iterations=2, kernel="epanechnikov", metric="l1",
                 normalization="softmax", epochs=3, batch_size=50,
                 learning_rate=0.02, momentum=0.9, loss="spread",
                 image_size=32, seed=0):
        self.routing_method = routing_method
        self.base_capsules = base_capsules
        self.stem_channels = stem_channels
        self.iterations = iterations
        self.kernel = kernel
        self.metric = metric
        self.normalization = normalization
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.loss = loss
        self.image_size = image_size
        self.seed = seed

    def _build_spec(self, classes):
        routing = RoutingConfig(iterations=self.iterations,
                                normalization=self.normalization,
                                kernel=KernelSpec(self.kernel, self.metric))
        return desk_spec(classes=classes, base_capsules=self.base_capsules,
                         stem_channels=self.stem_channels,
                         routing_method=self.routing_method, routing=routing,
                         input_size=self.image_size)


class BaselineCnnClassifier(_RoutedNetworkClassifier):
    """The parameter-matched plain CNN used as the comparison baseline."""

    def __init__(self, base_capsules=2, stem_channels=8, epochs=3,
                 batch_size=50, learning_rate=0.02, momentum=0.9,
                 loss="spread", image_size=32, seed=0):
        self.base_capsules = base_capsules
        self.stem_channels = stem_channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.loss = loss
        self.image_size = image_size
        self.seed = seed

    def _build_spec(self, classes):
        caps = desk_spec(classes=classes, base_capsules=self.base_capsules,
                         stem_channels=self.stem_channels,
                         input_size=self.image_size)
        return build_baseline_cnn(caps)
