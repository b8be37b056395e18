"""scikit-learn style classifier wrapping the WSD-MIL network."""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import layers
from . import tensor as T
from .bagio import Bag
from .model import WsdConfig, WsdModel
from .optim import Adam, cross_entropy
from .sampler import DEFAULT_CLUSTERS, ClusterSampler, SampledSequence

logger = logging.getLogger(__name__)


def check_bags(X, alpha=100.0, n_clusters=DEFAULT_CLUSTERS, window_base=4, random_state=0):
    """Coerce a list of bags and/or sampled sequences into sequences."""
    if isinstance(X, (Bag, SampledSequence)):
        raise TypeError("expected a list of bags, got a single bag")
    seqs = list(X)
    if not seqs:
        raise ValueError("need at least one bag")
    raw = [i for i, s in enumerate(seqs) if isinstance(s, Bag)]
    if raw:
        sampler = ClusterSampler(alpha, n_clusters, window_base, random_state).fit(None)
        for i, s in zip(raw, sampler.transform([seqs[i] for i in raw])):
            seqs[i] = s
    for s in seqs:
        if not isinstance(s, SampledSequence):
            raise TypeError(f"expected Bag or SampledSequence, got {type(s).__name__}")
        if s.features.ndim != 3 or s.features.shape[0] != 1:
            raise ValueError(f"sequence features must be (1, M_pad, F), got {s.features.shape}")
        if not s.mask.any():
            raise ValueError(f"sequence {s.bag_id!r} has no real instances")
    dims = {s.features.shape[-1] for s in seqs}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dims across bags: {sorted(dims)}")
    return seqs


class WSDMILClassifier(ClassifierMixin, BaseEstimator):
    """Bag classifier: Nystrom + decaying windows + region gate + attention pooling.

    ``X`` is a list of :class:`~wsdmil.bagio.Bag` (sampled on the fly with
    ``alpha``/``n_clusters``) or of ready :class:`~wsdmil.sampler.SampledSequence`.
    ``aggregator="mean"`` or ``"max"`` gives the plain pooling baselines.
    """

    def __init__(self, heads=8, window_base=4, landmarks=64, pinv_iters=6, serg_grid=8,
                 serg_reduction=4, attn_hidden=128, aggregator="attention", disable_wsda=False,
                 fixed_window_grid=None, disable_serg=False, lr=1e-5, epochs=100,
                 betas=(0.9, 0.999), eps=1e-8, alpha=100.0, n_clusters=DEFAULT_CLUSTERS,
                 random_state=0, verbose=False):
        self.heads = heads
        self.window_base = window_base
        self.landmarks = landmarks
        self.pinv_iters = pinv_iters
        self.serg_grid = serg_grid
        self.serg_reduction = serg_reduction
        self.attn_hidden = attn_hidden
        self.aggregator = aggregator
        self.disable_wsda = disable_wsda
        self.fixed_window_grid = fixed_window_grid
        self.disable_serg = disable_serg
        self.lr = lr
        self.epochs = epochs
        self.betas = betas
        self.eps = eps
        self.alpha = alpha
        self.n_clusters = n_clusters
        self.random_state = random_state
        self.verbose = verbose

    def make_config(self, feature_dim: int, num_classes: int = 2) -> WsdConfig:
        return WsdConfig(
            feature_dim=feature_dim, num_classes=num_classes, heads=self.heads,
            window_base=self.window_base, landmarks=self.landmarks, pinv_iters=self.pinv_iters,
            serg_grid=self.serg_grid, serg_reduction=self.serg_reduction,
            attn_hidden=self.attn_hidden, aggregator=self.aggregator,
            disable_wsda=self.disable_wsda, fixed_window_grid=self.fixed_window_grid,
            disable_serg=self.disable_serg)

    def _sequences(self, X):
        return check_bags(X, self.alpha, self.n_clusters, self.window_base, self.random_state)

    def fit(self, X, y=None):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        seqs = self._sequences(X)
        y = np.array([s.label for s in seqs] if y is None else y)
        if y.shape[0] != len(seqs):
            raise ValueError(f"{len(seqs)} bags but {y.shape[0]} labels")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        num_classes = max(2, len(self.classes_))
        cfg = self.make_config(seqs[0].features.shape[-1], num_classes)
        rng = np.random.default_rng(self.random_state)
        self.model_ = WsdModel(cfg, seed=rng.integers(2**63))
        opt = Adam(self.model_.named_parameters(), self.lr, tuple(self.betas), self.eps)
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            total = 0.0
            for i in rng.permutation(len(seqs)):
                opt.zero_grad()
                loss = cross_entropy(layers.forward(seqs[i].features, seqs[i].mask, self.model_), y_idx[i])
                T.backward(loss)
                opt.step()
                total += loss.item()
            self.loss_curve_.append(total / len(seqs))
            if self.verbose:
                logger.info("epoch %d loss %.5f", epoch + 1, self.loss_curve_[-1])
        self.n_features_in_ = cfg.feature_dim
        return self

    @classmethod
    def from_model(cls, model: WsdModel, classes=None, **params) -> "WSDMILClassifier":
        """Wrap an already trained model (e.g. loaded from a checkpoint)."""
        cfg = model.config
        est = cls(heads=cfg.heads, window_base=cfg.window_base, landmarks=cfg.landmarks,
                  pinv_iters=cfg.pinv_iters, serg_grid=cfg.serg_grid,
                  serg_reduction=cfg.serg_reduction, attn_hidden=cfg.attn_hidden,
                  aggregator=cfg.aggregator, disable_wsda=cfg.disable_wsda,
                  fixed_window_grid=cfg.fixed_window_grid, disable_serg=cfg.disable_serg, **params)
        est.model_ = model
        est.classes_ = np.arange(cfg.num_classes) if classes is None else np.asarray(classes)
        est.n_features_in_ = cfg.feature_dim
        est.loss_curve_ = []
        return est

    def decision_logits(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        seqs = self._sequences(X)
        peak = 0
        out = []
        for s in seqs:
            with T.Graph() as g:
                out.append(layers.forward(s.features, s.mask, self.model_).data.copy())
            peak = max(peak, g.peak_bytes)
        self.eval_peak_bytes_ = peak
        return np.stack(out)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_logits(X)
        e = np.exp(logits - logits.max(1, keepdims=True))
        return e / e.sum(1, keepdims=True)

    def decision_function(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return proba[:, 1] if proba.shape[1] == 2 else proba

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predict_proba(X).argmax(1)]

    def train_step_peak_bytes(self, seq: SampledSequence, label: Optional[int] = None) -> int:
        """Peak live tensor bytes of one forward+backward pass on ``seq``."""
        check_is_fitted(self, "model_")
        label = seq.label if label is None else label
        self.model_.zero_grad()
        with T.Graph() as g:
            loss = cross_entropy(layers.forward(seq.features, seq.mask, self.model_), label)
            T.backward(loss)
            del loss
        self.model_.zero_grad()
        return g.peak_bytes


def mean_pooling_mil(**params) -> WSDMILClassifier:
    return WSDMILClassifier(aggregator="mean", **params)


def max_pooling_mil(**params) -> WSDMILClassifier:
    return WSDMILClassifier(aggregator="max", **params)


def abmil(**params) -> WSDMILClassifier:
    """The configuration with both WSDA and SERG removed."""
    return WSDMILClassifier(disable_wsda=True, disable_serg=True, **params)
