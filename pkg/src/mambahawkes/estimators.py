"""Scikit-learn style wrappers around the point-process models and the fusion head.

Inputs are sequences rather than feature matrices, so ``X`` is a
:class:`SequenceDataset` or any iterable of :class:`EventSequence`. Each
sequence model exposes ``score_samples`` (per-sequence log-likelihood),
``score`` (mean log-likelihood per event) and ``transform`` (the per-sequence
score as a one-column feature, ready for the fusion head).
"""

from __future__ import annotations

from typing import Iterable

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from .fusion import EmbeddingBundle, FusionConfig, predict as fusion_predict, train_fusion
from .hawkes import PoissonModel, fit_hawkes, hawkes_loglik_batch
from .intensity import QuadratureSpec, LikelihoodBreakdown
from .metrics import MetricReport
from .sequences import EventSequence, SequenceDataset, truncate_prefix
from .training import TrainConfig, evaluate_terms, predict_next, train_model


def check_sequences(X, num_types: int | None = None, allow_empty: bool = False) -> list[EventSequence]:
    """Validate and materialize a collection of sequences."""
    if isinstance(X, EventSequence):
        raise TypeError("expected a collection of EventSequence, got a single sequence")
    if isinstance(X, np.ndarray):
        raise TypeError("sequence models take EventSequence collections, not arrays")
    seqs = list(X)
    for s in seqs:
        if not isinstance(s, EventSequence):
            raise TypeError(f"expected EventSequence, got {type(s).__name__}")
    if not seqs and not allow_empty:
        raise ValueError("no sequences given")
    types = {s.num_types for s in seqs}
    if len(types) > 1:
        raise ValueError(f"sequences disagree on num_types: {sorted(types)}")
    if num_types is not None and types and types != {num_types}:
        raise ValueError(f"sequences have {types.pop()} types but the model was fitted with {num_types}")
    return seqs


def check_bundles(X, allow_empty: bool = False) -> list[EmbeddingBundle]:
    bundles = list(X)
    for b in bundles:
        if not isinstance(b, EmbeddingBundle):
            raise TypeError(f"expected EmbeddingBundle, got {type(b).__name__}")
    if not bundles and not allow_empty:
        raise ValueError("no bundles given")
    return bundles


def check_is_fitted(est, attr: str) -> None:
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


def _truncate(seqs: list[EventSequence], k: int | None) -> list[EventSequence]:
    return seqs if k is None else [truncate_prefix(s, k) for s in seqs]


def _per_event(terms: Iterable[LikelihoodBreakdown], seqs: list[EventSequence]) -> float:
    return float(sum(t.total for t in terms) / sum(len(s) for s in seqs))


class _SequenceScorer:
    """Shared score/transform plumbing; subclasses provide ``_terms``."""

    def score_samples(self, X) -> np.ndarray:
        seqs = self._prepare(X, allow_empty=True)
        return np.array([t.total for t in self._terms(seqs)], dtype=np.float64)

    def score_terms(self, X) -> list[LikelihoodBreakdown]:
        return self._terms(self._prepare(X, allow_empty=True))

    def score(self, X, y=None) -> float:
        seqs = self._prepare(X)
        return _per_event(self._terms(seqs), seqs)

    def transform(self, X) -> np.ndarray:
        return self.score_samples(X)[:, None]

    def _prepare(self, X, allow_empty=False):
        check_is_fitted(self, "num_types_")
        seqs = check_sequences(X, self.num_types_, allow_empty=allow_empty)
        return _truncate(seqs, getattr(self, "truncate", None))


class MambaHawkesProcess(_SequenceScorer, BaseEstimator):
    """Selective state-space backbone with a softplus intensity head, fitted by maximum likelihood."""

    def __init__(self, d_model=32, d_state=16, n_blocks=2, d_hidden=64, d_out=32, first_delta="t1",
                 lr=1e-3, batch_size=64, epochs=50, patience=10, quad_nodes=16, loglik_mode="marked",
                 objective="full", val_fraction=0.1, truncate=None, random_state=0):
        self.d_model = d_model
        self.d_state = d_state
        self.n_blocks = n_blocks
        self.d_hidden = d_hidden
        self.d_out = d_out
        self.first_delta = first_delta
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.quad_nodes = quad_nodes
        self.loglik_mode = loglik_mode
        self.objective = objective
        self.val_fraction = val_fraction
        self.truncate = truncate
        self.random_state = random_state

    _variant = "mhp"

    def _config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, patience=self.patience,
            quad_nodes=self.quad_nodes, seed=int(self.random_state), loglik_mode=self.loglik_mode,
            variant=self._variant, d_model=self.d_model, d_state=self.d_state, n_blocks=self.n_blocks,
            d_hidden=self.d_hidden, d_out=self.d_out, first_delta=self.first_delta,
            val_fraction=self.val_fraction, truncate=self.truncate, objective=self.objective,
        )

    def fit(self, X, y=None):
        seqs = _truncate(check_sequences(X), self.truncate)
        split = X.split if isinstance(X, SequenceDataset) else None
        result = train_model(SequenceDataset(seqs, split=split), self._config())
        self.model_, self.head_ = result.model, result.head
        self.log_, self.best_epoch_ = result.log, result.best_epoch
        self.num_types_ = seqs[0].num_types
        return self

    def _terms(self, seqs):
        if not seqs:
            return []
        return evaluate_terms(self.model_, self.head_, seqs, QuadratureSpec(self.quad_nodes), self.loglik_mode)


class NextEventMamba(MambaHawkesProcess):
    """The same backbone with a next-event head instead of an intensity (the noHP ablation).

    Its per-sequence score is the negative surrogate loss: minus the summed
    next-type cross-entropy minus the summed squared gap error.
    """

    _variant = "noHP"

    def predict(self, X) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per sequence: next-type probabilities ``(n, R)`` and predicted gaps ``(n,)``."""
        seqs = self._prepare(X, allow_empty=True)
        return [predict_next(self.model_, self.head_, s) for s in seqs]


class ExponentialHawkes(_SequenceScorer, BaseEstimator):
    """Classical multivariate Hawkes process with exponential kernels."""

    def __init__(self, tie_beta=False, max_iter=500, tol=1e-10, objective="full", truncate=None):
        self.tie_beta = tie_beta
        self.max_iter = max_iter
        self.tol = tol
        self.objective = objective
        self.truncate = truncate

    def fit(self, X, y=None):
        seqs = _truncate(check_sequences(X), self.truncate)
        fit = fit_hawkes(seqs, tie_beta=self.tie_beta, max_iter=self.max_iter, tol=self.tol,
                         objective=self.objective)
        self.model_ = fit.model
        self.objective_value_ = fit.objective
        self.n_iter_ = fit.n_iter
        self.converged_ = fit.converged
        self.num_types_ = seqs[0].num_types
        return self

    def _terms(self, seqs):
        return hawkes_loglik_batch(self.model_, seqs) if seqs else []


class PoissonBaseline(_SequenceScorer, BaseEstimator):
    """Homogeneous Poisson process, rate per type = count / total observed span."""

    def __init__(self, truncate=None):
        self.truncate = truncate

    def fit(self, X, y=None):
        seqs = _truncate(check_sequences(X), self.truncate)
        self.model_ = PoissonModel.fit(seqs)
        self.rates_ = self.model_.rates
        self.num_types_ = seqs[0].num_types
        return self

    def _terms(self, seqs):
        return [self.model_.loglik(s) for s in seqs]


class FusionRegressor(RegressorMixin, BaseEstimator):
    """Bipolar-attention fusion head regressing popularity from embedding bundles."""

    def __init__(self, alpha=0.2, mode="full", lr=1e-3, batch_size=64, epochs=50, patience=10,
                 standardize=True, val_fraction=0.2, weight_decay=1e-3, random_state=0):
        self.alpha = alpha
        self.mode = mode
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.standardize = standardize
        self.val_fraction = val_fraction
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y=None):
        bundles = check_bundles(X)
        if y is not None:
            y = np.asarray(y, dtype=np.float64).ravel()
            if y.shape[0] != len(bundles):
                raise ValueError(f"{len(bundles)} bundles but {y.shape[0]} targets")
            for b, t in zip(bundles, y):
                b.target = float(t)
        if any(b.target is None for b in bundles):
            raise ValueError("every training bundle needs a target")
        cfg = FusionConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                           patience=self.patience, seed=int(self.random_state), alpha=self.alpha,
                           mode=self.mode, standardize=self.standardize, val_fraction=self.val_fraction,
                           weight_decay=self.weight_decay)
        result = train_fusion(bundles, cfg)
        self.head_ = result.head
        self.log_ = result.log
        self.best_epoch_ = result.best_epoch
        self.val_report_ = result.val_report
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "head_")
        bundles = check_bundles(X, allow_empty=True)
        return fusion_predict(self.head_, bundles) if bundles else np.empty(0)

    def report(self, X, y=None) -> MetricReport:
        bundles = check_bundles(X)
        y = np.array([b.target for b in bundles], dtype=np.float64) if y is None else np.asarray(y, float)
        return MetricReport.compute(y, self.predict(bundles))
