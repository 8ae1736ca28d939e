"""Frozen toy-world evaluators: an emotion classifier and an identity embedder.

Both are small dense networks over flattened images. They stand in for the
pretrained recognition models used to score real edits, and they are
differentiable so that finetuning losses can flow through them.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ..nn import fit_minibatch, mlp_forward, mlp_init
from ..numerics import ops
from ..numerics.rng import RngStream
from ..numerics.tensor import Tensor, as_tensor


class CalibrationError(RuntimeError):
    """A frozen evaluator failed its calibration target."""


def _flat(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X.reshape(X.shape[0], -1)


class EmotionOracle(ClassifierMixin, BaseEstimator):
    """Dense emotion classifier; penultimate features double as an image embedding."""

    def __init__(self, num_classes=7, hidden=(128, 64), epochs=60, batch_size=64,
                 learning_rate=3e-3, noise_std=0.03, random_state=0):
        self.num_classes = num_classes
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.noise_std = noise_std
        self.random_state = random_state

    @property
    def _n_layers(self) -> int:
        return len(self.hidden) + 1

    def fit(self, X, y):
        X = _flat(X)
        X, y = check_X_y(X, y)
        y = y.astype(np.int64)
        self.classes_ = np.arange(self.num_classes)
        rng = RngStream(self.random_state, 0x6F7263)
        sizes = [X.shape[1], *self.hidden, self.num_classes]
        self.weights_ = mlp_init(sizes, rng, "emo")
        onehot = np.eye(self.num_classes)[y]

        def loss_fn(w, xb, yb):
            if self.noise_std:
                xb = xb + self.noise_std * rng.gaussian(xb.shape)
            logits = mlp_forward(w, "emo", self._n_layers, xb, act="tanh")
            return -ops.tmean(ops.tsum(ops.log_softmax(logits) * yb, axis=1))

        self.loss_history_ = fit_minibatch(self.weights_, loss_fn, (X, onehot), self.epochs,
                                           self.batch_size, self.learning_rate, rng)
        feats = self.embed(X)
        proto = np.stack([feats[y == c].mean(axis=0) if np.any(y == c) else np.zeros(feats.shape[1])
                          for c in range(self.num_classes)])
        norms = np.linalg.norm(proto, axis=1, keepdims=True)
        self.prototypes_ = proto / np.where(norms > 0, norms, 1.0)
        return self

    def _logits_and_features(self, X):
        return mlp_forward(self.weights_, "emo", self._n_layers, X, act="tanh", return_hidden=True)

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        return self._logits_and_features(_flat(X))[0].data

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)

    def embed(self, X) -> np.ndarray:
        """Unit-norm penultimate features."""
        check_is_fitted(self, "weights_")
        return self.embed_tensor(_flat(X)).data

    def embed_tensor(self, X) -> Tensor:
        X = as_tensor(X)
        X = ops.reshape(X, (X.shape[0], -1))
        _, feats = self._logits_and_features(X)
        return ops.l2_normalize(feats, axis=1)

    def class_embed(self, label: int) -> np.ndarray:
        """Unit-norm class prototype (mean embedding of the class)."""
        check_is_fitted(self, "prototypes_")
        return self.prototypes_[int(label)]


class IdentityEmbedder(TransformerMixin, BaseEstimator):
    """Identity regressor followed by a fixed random Fourier feature map.

    The regressor predicts the three identity parameters from pixels; the
    feature map turns them into unit vectors whose cosine approximates a
    Gaussian kernel of width ``bandwidth`` in identity space.
    """

    def __init__(self, hidden=(128, 64), n_features=256, bandwidth=0.5, epochs=60,
                 batch_size=64, learning_rate=3e-3, noise_std=0.02, random_state=0):
        self.hidden = hidden
        self.n_features = n_features
        self.bandwidth = bandwidth
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.noise_std = noise_std
        self.random_state = random_state

    @property
    def _n_layers(self) -> int:
        return len(self.hidden) + 1

    def fit(self, X, identity):
        X = _flat(X)
        P = check_array(identity, dtype=np.float64)
        if P.shape[0] != X.shape[0]:
            raise ValueError("X and identity must have the same number of rows")
        rng = RngStream(self.random_state, 0x696465)
        self.weights_ = mlp_init([X.shape[1], *self.hidden, P.shape[1]], rng, "ide")
        self.freqs_ = rng.gaussian((P.shape[1], self.n_features)) / self.bandwidth
        self.phases_ = rng.uniform((self.n_features,), 0.0, 2 * np.pi)

        def loss_fn(w, xb, pb):
            if self.noise_std:
                xb = xb + self.noise_std * rng.gaussian(xb.shape)
            pred = mlp_forward(w, "ide", self._n_layers, xb, act="tanh")
            return ops.tmean(ops.square(pred - pb))

        self.loss_history_ = fit_minibatch(self.weights_, loss_fn, (X, P), self.epochs,
                                           self.batch_size, self.learning_rate, rng)
        return self

    def predict_identity(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        return mlp_forward(self.weights_, "ide", self._n_layers, _flat(X), act="tanh").data

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        return self.embed_tensor(_flat(X)).data

    def embed_tensor(self, X) -> Tensor:
        X = as_tensor(X)
        X = ops.reshape(X, (X.shape[0], -1))
        p = mlp_forward(self.weights_, "ide", self._n_layers, X, act="tanh")
        feats = ops.cos(p @ as_tensor(self.freqs_) + self.phases_)
        return ops.l2_normalize(feats, axis=1)


def csim(embedder: IdentityEmbedder, x_gen, x_src) -> np.ndarray:
    """Per-item cosine similarity of identity embeddings."""
    a = embedder.transform(np.asarray(x_gen)[None] if np.ndim(x_gen) == 2 else x_gen)
    b = embedder.transform(np.asarray(x_src)[None] if np.ndim(x_src) == 2 else x_src)
    return np.clip(np.sum(a * b, axis=1), -1.0, 1.0)
