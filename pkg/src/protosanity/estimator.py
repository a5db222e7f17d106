"""scikit-learn estimator wrapper around :class:`PrototypeModel`."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .network import build_network
from .numerics import Rng
from .prototypes import (
    DEFAULT_EPSILON,
    PROTOTREE,
    features_of,
    init_model,
    max_similarities,
    predict_logits,
    softmax,
    train_toy,
)
from .validation import check_images, check_labels


class ProtoPartClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Prototype-part image classifier with a weighted-sum decision head.

    Parameters
    ----------
    similarity : {"prototree", "protopnet"}, default="prototree"
        ``exp(-d2)`` or ``log((d2 + 1) / (d2 + epsilon))``.
    epsilon : float, default=1e-4
    prototypes_per_class : int, default=5
    channels : tuple of int, default=(16, 32, 32)
        Output channels of the conv-ReLU-maxpool blocks; the last entry is the
        latent depth D.
    feature_scale : float, default=0.2
        Scale applied to the last block's initial weights.
    epochs : int, default=20
    learning_rate : float, default=5e-4
    batch_size : int, default=32
    optimizer : {"adam", "sgd"}, default="adam"
    random_state : int, default=0

    Attributes
    ----------
    model_ : PrototypeModel
        Trained and projected model.
    classes_ : ndarray
    loss_curve_ : list of float
    """

    def __init__(
        self,
        similarity=PROTOTREE,
        epsilon=DEFAULT_EPSILON,
        prototypes_per_class=5,
        channels=(16, 32, 32),
        feature_scale=0.2,
        epochs=20,
        learning_rate=5e-4,
        batch_size=32,
        optimizer="adam",
        random_state=0,
    ):
        self.similarity = similarity
        self.epsilon = epsilon
        self.prototypes_per_class = prototypes_per_class
        self.channels = channels
        self.feature_scale = feature_scale
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.random_state = random_state

    def fit(self, X, y, image_ids=None):
        X = check_images(X)
        y = check_labels(y, X.shape[0])
        self.classes_, encoded = np.unique(y, return_inverse=True)
        rng = Rng(self.random_state)
        net = build_network(
            channels=tuple(self.channels),
            input_shape=X.shape[1:],
            feature_scale=self.feature_scale,
            rng=rng.stream("init-network"),
        )
        model = init_model(
            net,
            len(self.classes_),
            self.prototypes_per_class,
            kind=self.similarity,
            epsilon=self.epsilon,
            images=X,
            labels=encoded,
            rng=rng.stream("init-prototypes"),
            class_names=[str(c) for c in self.classes_],
        )
        self.model_, self.loss_curve_ = train_toy(
            model,
            X,
            encoded,
            epochs=self.epochs,
            lr=self.learning_rate,
            seed=self.random_state,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            image_ids=image_ids,
        )
        return self

    def _images(self, X):
        check_is_fitted(self, "model_")
        return check_images(X, self.model_.network.input_shape, allow_single=True)

    def decision_function(self, X):
        """Class logits, shape ``(n_samples, n_classes)``."""
        X = self._images(X)
        return predict_logits(self.model_, X)

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[logits.argmax(axis=1)]

    def transform(self, X):
        """Per-prototype maximum similarities ``s(x)``, shape ``(n_samples, P)``."""
        X = self._images(X)
        s, _ = max_similarities(self.model_, features_of(self.model_, X))
        return s
