"""scikit-learn style wrapper around training and inference."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import network, training
from .anomaly import FusionStrategy, infer
from .losses import LossWeights
from .validation import check_pairs


class MAFRDetector(BaseEstimator):
    """Fusion-restoration anomaly detector over (2D, 3D) feature-map pairs.

    ``X`` is a sequence of ``(e2d, e3d)`` pairs, each an H x W x D array or
    a FeatureMap. ``fit`` uses normal samples only. ``predict`` returns 1 for
    anomalous and 0 for normal, thresholding at the largest training score.
    """

    def __init__(
        self,
        epochs=100,
        learning_rate=1e-3,
        batch_size=1,
        lambda_sim=1.0,
        lambda_smooth=1.0,
        lambda_census=1.0,
        census_kernel=3,
        fused_dim=None,
        dropout=0.1,
        strategy="multiply",
        sigma=4.0,
        mask_first=True,
        random_state=0,
    ):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.lambda_sim = lambda_sim
        self.lambda_smooth = lambda_smooth
        self.lambda_census = lambda_census
        self.census_kernel = census_kernel
        self.fused_dim = fused_dim
        self.dropout = dropout
        self.strategy = strategy
        self.sigma = sigma
        self.mask_first = mask_first
        self.random_state = random_state

    def _configs(self, d2, d3):
        weights = LossWeights(self.lambda_sim, self.lambda_smooth, self.lambda_census, census_kernel=self.census_kernel)
        tc = training.TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            weights=weights,
            seed=int(self.random_state or 0),
        )
        mc = network.ModelConfig(d_2d=d2, d_3d=d3, fused_dim=self.fused_dim, dropout=self.dropout)
        return mc, tc

    def fit(self, X, y=None):
        pairs = check_pairs(X)
        d2, d3 = pairs[0][0].channels, pairs[0][1].channels
        mc, tc = self._configs(d2, d3)
        FusionStrategy.parse(self.strategy)
        self.params_, self.train_log_ = training.fit_pairs(pairs, mc, tc)
        self.n_features_2d_ = d2
        self.n_features_3d_ = d3
        self.threshold_ = float(np.max(self._scores(pairs)))
        return self

    def _results(self, pairs):
        return [
            infer(self.params_, e2d, e3d, strategy=self.strategy, sigma=self.sigma, mask_first=self.mask_first)
            for e2d, e3d in pairs
        ]

    def _scores(self, pairs):
        return np.array([r.score for r in self._results(pairs)])

    def _check(self, X):
        check_is_fitted(self, "params_")
        return check_pairs(X, self.n_features_2d_, self.n_features_3d_)

    def score_samples(self, X):
        """Sample anomaly scores (higher is more anomalous)."""
        return self._scores(self._check(X))

    def decision_function(self, X):
        """Positive above the training threshold."""
        return self.score_samples(X) - self.threshold_

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)

    def transform(self, X):
        """Smoothed anomaly maps, shape (n, H, W)."""
        return np.stack([r.final.values for r in self._results(self._check(X))])
