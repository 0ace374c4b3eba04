"""scikit-learn compatible wrapper around the training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from . import losses, nn
from .optim import Optimizer, OptimizerConfig, Schedule
from .training import run_epoch


class JacobianMatchingClassifier(ClassifierMixin, BaseEstimator):
    """Student classifier trained with cross entropy plus optional teacher matching.

    ``teacher`` is a fitted :class:`jacmatch.nn.Network` (or None for plain CE,
    possibly with the Jacobian-norm ``penalty``).  Inputs are ``(n, *input_shape)``
    arrays; flat ``(n, d)`` inputs are used as vectors with an MLP student.
    """

    def __init__(self, arch="mlp", width=16, hidden=None, teacher=None, alpha=1.0, beta=0.0, gamma=0.0,
                 sigma=1.0, penalty=0.0, temperature=1.0, jac_mode="full", epochs=20, batch_size=32,
                 lr=1e-3, random_state=0):
        self.arch = arch
        self.width = width
        self.hidden = hidden
        self.teacher = teacher
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.sigma = sigma
        self.penalty = penalty
        self.temperature = temperature
        self.jac_mode = jac_mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state

    def _validate_X(self, X, reset):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim < 2:
            raise ValueError(f"expected a batch of inputs with ndim >= 2, got shape {X.shape}")
        if not np.isfinite(X).all():
            raise ValueError("inputs contain NaN or infinity")
        if reset:
            self.input_shape_ = X.shape[1:]
            self.n_features_in_ = int(np.prod(X.shape[1:]))
        elif X.shape[1:] != self.input_shape_:
            raise ValueError(f"inputs have shape {X.shape[1:]}, the estimator was fitted on {self.input_shape_}")
        return X

    def fit(self, X, y):
        X = self._validate_X(X, reset=True)
        y = np.asarray(y)
        if len(X) != len(y):
            raise ValueError(f"{len(X)} inputs but {len(y)} labels")
        self.classes_ = unique_labels(y)
        codes = np.searchsorted(self.classes_, y)
        spec = losses.LossSpec(alpha=self.alpha, beta=self.beta, gamma=self.gamma, sigma=self.sigma,
                               penalty=self.penalty, temperature=self.temperature,
                               jac_strategy=losses.JacobianStrategy(self.jac_mode))
        if (spec.beta > 0 or spec.gamma > 0) and self.teacher is None:
            raise ValueError("beta or gamma > 0 needs a teacher network")
        net = nn.build(self.arch, self.input_shape_, len(self.classes_), self.width, hidden=self.hidden)
        net.init_params(self.random_state)
        milestones = (max(1, int(0.8 * self.epochs)),)
        opt = Optimizer(OptimizerConfig("adam", Schedule(self.lr, milestones)))
        self.history_ = [run_epoch(net, self.teacher, spec, X, codes, opt, e, self.random_state,
                                   self.batch_size) for e in range(self.epochs)]
        self.network_ = net
        return self

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        return self.network_.predict_logits(self._validate_X(X, reset=False))

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "network_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def transform(self, X):
        """Trunk features (the input of the output layer)."""
        check_is_fitted(self, "network_")
        return self.network_.features(self._validate_X(X, reset=False))
