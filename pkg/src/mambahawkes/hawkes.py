"""Exponential-kernel multivariate Hawkes process: likelihood, gradient and MLE.

Parameterization (shared with the simulator):

    lambda_r(t) = mu_r + sum_{t_i < t} alpha[r_i, r] * exp(-beta[r_i, r] (t - t_i))

The log-likelihood follows the same conventions as the neural model: the
event term sums ``log lambda_{r_j}(t_j)`` over all events (the first one sees
only the base rate) and the compensator covers ``[t_1, t_n]``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .intensity import LikelihoodBreakdown
from .sequences import EventSequence, SequenceDataset

logger = logging.getLogger(__name__)


@dataclass
class HawkesModel:
    mu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_1d(np.array(self.mu, dtype=np.float64))
        R = self.mu.shape[0]
        self.alpha = np.array(self.alpha, dtype=np.float64).reshape(R, R)
        self.beta = np.broadcast_to(np.array(self.beta, dtype=np.float64), (R, R)).copy()
        if np.any(self.mu <= 0) or np.any(self.beta <= 0):
            raise ValueError("mu and beta must be positive")
        if np.any(self.alpha < 0):
            raise ValueError("alpha must be nonnegative")

    @property
    def num_types(self) -> int:
        return int(self.mu.shape[0])

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.alpha / self.beta))))

    def intensity(self, seq: EventSequence, t, upto: int | None = None) -> np.ndarray:
        """Per-type intensity at times ``t`` given events ``0..upto`` (default: all before ``t``)."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        out = np.tile(self.mu, (t.shape[0], 1))
        last = len(seq) if upto is None else upto + 1
        for ti, q in zip(seq.times[:last], seq.types[:last]):
            dt = t - ti
            active = dt > 0 if upto is None else dt >= 0
            contrib = self.alpha[q] * np.exp(-self.beta[q] * np.where(active, dt, 0.0)[:, None])
            out += np.where(active[:, None], contrib, 0.0)
        return out

    def total_intensity_fn(self, seq: EventSequence):
        """``fn(t, j)`` giving total intensity on ``[t_j, t_{j+1})``, for generic integrators."""

        def fn(t, j):
            return self.intensity(seq, t, upto=j).sum(axis=-1)

        return fn


@dataclass
class _Padded:
    times: np.ndarray
    types: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray


def _pad(seqs: Sequence[EventSequence]) -> _Padded:
    L = max(len(s) for s in seqs)
    S = len(seqs)
    times = np.zeros((S, L))
    types = np.zeros((S, L), dtype=np.int64)
    mask = np.zeros((S, L), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s)
        times[i, :n] = s.times
        types[i, :n] = s.types
        mask[i, :n] = True
        times[i, n:] = s.times[-1]
    return _Padded(times, types, mask, mask.sum(axis=1))


def _loglik_terms(mu, alpha, beta, pad: _Padded, want_grad: bool = True, skip_first: bool = False):
    """Per-sequence event and compensator terms plus gradients of their total difference.

    ``skip_first`` drops each sequence's first event term (likelihood conditional on ``t_1``).
    """
    S, L = pad.times.shape
    R = mu.shape[0]
    eye = np.eye(R)
    E = np.zeros((S, R, R))
    Dst = np.zeros((S, R, R))
    event = np.zeros(S)
    g_mu = np.zeros(R)
    g_alpha = np.zeros((R, R))
    g_beta = np.zeros((R, R))
    rows = np.arange(S)
    for j in range(L):
        m = pad.mask[:, j] & (j > 0 or not skip_first)
        r = pad.types[:, j]
        lam = mu + np.einsum("qr,sqr->sr", alpha, E)        # (S, R)
        lam_sel = lam[rows, r]
        with np.errstate(divide="ignore", invalid="ignore"):
            event += np.where(m, np.log(lam_sel), 0.0)
        if want_grad:
            coef = np.where(m, 1.0 / lam_sel, 0.0)          # (S,)
            sel = eye[r] * coef[:, None]                    # (S, R) target indicator / lambda
            g_mu += sel.sum(axis=0)
            g_alpha += np.einsum("sr,sqr->qr", sel, E)
            g_beta -= alpha * np.einsum("sr,sqr->qr", sel, Dst)
        if j + 1 < L:
            dt = np.where(pad.mask[:, j + 1], pad.times[:, j + 1] - pad.times[:, j], 0.0)
            decay = np.exp(-beta[None] * dt[:, None, None])
            src = E + eye[r][:, :, None]
            if want_grad:
                Dst = decay * (Dst + dt[:, None, None] * src)
            E = decay * src

    t_first = pad.times[:, 0]
    t_last = pad.times[rows, pad.lengths - 1]
    span = t_last - t_first
    tail = np.where(pad.mask, t_last[:, None] - pad.times, 0.0)       # (S, L)
    Q = eye[pad.types] * pad.mask[..., None]                          # (S, L, R) source one-hot
    arg = -beta[None, None] * tail[..., None, None]                   # (S, L, R, R)
    ex = np.exp(arg)
    one_m = -np.expm1(arg)
    comp = span * mu.sum() + np.einsum("slq,qr,slqr->s", Q, alpha / beta, one_m)
    grads = None
    if want_grad:
        g_mu -= span.sum()
        g_alpha -= np.einsum("slq,slqr->qr", Q, one_m) / beta
        d_b = -one_m / beta**2 + tail[..., None, None] * ex / beta
        g_beta -= alpha * np.einsum("slq,slqr->qr", Q, d_b)
        grads = (g_mu, g_alpha, g_beta)
    return event, comp, grads


def hawkes_loglik(model: HawkesModel, seq: EventSequence) -> LikelihoodBreakdown:
    if seq.num_types != model.num_types:
        raise ValueError("sequence and model disagree on the number of types")
    ev, comp, _ = _loglik_terms(model.mu, model.alpha, model.beta, _pad([seq]), want_grad=False)
    return LikelihoodBreakdown(float(ev[0]), float(comp[0]))


def hawkes_loglik_batch(model: HawkesModel, seqs: Sequence[EventSequence]) -> list[LikelihoodBreakdown]:
    if not seqs:
        return []
    ev, comp, _ = _loglik_terms(model.mu, model.alpha, model.beta, _pad(seqs), want_grad=False)
    return [LikelihoodBreakdown(float(e), float(c)) for e, c in zip(ev, comp)]


def hawkes_loglik_grad(model: HawkesModel, seqs: Sequence[EventSequence]):
    """Total log-likelihood over ``seqs`` and its gradient in (mu, alpha, beta)."""
    ev, comp, grads = _loglik_terms(model.mu, model.alpha, model.beta, _pad(seqs))
    return float(np.sum(ev - comp)), grads


def hawkes_loglik_naive(model: HawkesModel, seq: EventSequence) -> LikelihoodBreakdown:
    """Quadratic-time reference implementation (no recursion)."""
    ev = 0.0
    for j, (tj, rj) in enumerate(zip(seq.times, seq.types)):
        lam = model.mu[rj]
        for i in range(j):
            q = seq.types[i]
            lam += model.alpha[q, rj] * np.exp(-model.beta[q, rj] * (tj - seq.times[i]))
        ev += np.log(lam)
    tn = seq.times[-1]
    comp = model.mu.sum() * (tn - seq.times[0])
    for ti, q in zip(seq.times, seq.types):
        comp += np.sum(model.alpha[q] / model.beta[q] * -np.expm1(-model.beta[q] * (tn - ti)))
    return LikelihoodBreakdown(float(ev), float(comp))


@dataclass
class HawkesFit:
    model: HawkesModel
    objective: float
    history: list = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0


def _unpack(theta: np.ndarray, R: int, tie_beta: bool):
    mu = np.exp(theta[:R])
    alpha = np.exp(theta[R : R + R * R]).reshape(R, R)
    if tie_beta:
        beta = np.full((R, R), np.exp(theta[R + R * R]))
    else:
        beta = np.exp(theta[R + R * R :]).reshape(R, R)
    return mu, alpha, beta


def fit_hawkes(
    dataset: SequenceDataset | Sequence[EventSequence],
    init: HawkesModel | None = None,
    tie_beta: bool = False,
    max_iter: int = 500,
    tol: float = 1e-10,
    grad_tol: float = 1e-7,
    objective: str = "full",
) -> HawkesFit:
    """Maximum likelihood by gradient ascent on log-parameters.

    Steps use a Barzilai-Borwein length with Armijo step halving, so the
    objective never decreases across accepted iterates. The objective is
    the mean log-likelihood per event.

    ``objective="full"`` maximizes the log-likelihood as scored by
    :func:`hawkes_loglik`. Its first-event term has no matching exposure, so
    on short sequences the base rate is biased upward. ``"conditional"``
    drops that term and gives a consistent estimator.
    """
    if objective not in ("full", "conditional"):
        raise ValueError("objective must be 'full' or 'conditional'")
    skip_first = objective == "conditional"
    seqs = list(dataset)
    if not seqs:
        raise ValueError("cannot fit on an empty dataset")
    R = seqs[0].num_types
    if any(s.num_types != R for s in seqs):
        raise ValueError("all sequences must share num_types")
    pad = _pad(seqs)
    n_events = float(pad.mask.sum()) - (len(seqs) if skip_first else 0)
    n_events = max(n_events, 1.0)

    if init is None:
        span = sum(s.times[-1] - s.times[0] for s in seqs)
        counts = np.bincount(np.concatenate([s.types for s in seqs]), minlength=R).astype(float)
        rate = np.maximum(counts, 1.0) / max(span, 1e-12)
        init = HawkesModel(0.5 * rate, np.full((R, R), 0.1), np.ones((R, R)))
    beta0 = np.log(init.beta)
    beta_part = np.array([beta0.mean()]) if tie_beta else beta0.ravel()
    theta = np.concatenate([np.log(init.mu), np.log(np.maximum(init.alpha, 1e-12)).ravel(), beta_part])

    def evaluate(th):
        mu, alpha, beta = _unpack(th, R, tie_beta)
        ev, comp, (gm, ga, gb) = _loglik_terms(mu, alpha, beta, pad, skip_first=skip_first)
        f = float(np.sum(ev - comp)) / n_events
        gbeta = gb * beta
        gb_part = np.array([gbeta.sum()]) if tie_beta else gbeta.ravel()
        g = np.concatenate([gm * mu, (ga * alpha).ravel(), gb_part]) / n_events
        return f, g

    f, g = evaluate(theta)
    if not np.isfinite(f):
        raise ArithmeticError("initial Hawkes objective is not finite")
    history = [f]
    step = 0.1 / max(np.linalg.norm(g), 1e-12)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        gg = float(g @ g)
        if np.sqrt(gg) < grad_tol:
            converged = True
            break
        accepted = False
        for _ in range(60):
            trial = theta + step * g
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                f_new, g_new = evaluate(trial)
            if np.isfinite(f_new) and np.all(np.isfinite(g_new)) and f_new >= f + 1e-4 * step * gg:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            logger.warning("Hawkes fit stopped: no ascent step found at iteration %d", it)
            break
        s = trial - theta
        y = g - g_new
        sy = float(s @ y)
        step = float(s @ s) / sy if sy > 0 else 2.0 * step
        step = float(np.clip(step, 1e-10, 1e4))
        done = abs(f_new - f) < tol * max(1.0, abs(f))
        theta, f, g = trial, f_new, g_new
        history.append(f)
        if done:
            converged = True
            break

    mu, alpha, beta = _unpack(theta, R, tie_beta)
    model = HawkesModel(mu, alpha, beta)
    if model.spectral_radius >= 1.0:
        warnings.warn(
            f"fitted Hawkes model is not stationary (spectral radius {model.spectral_radius:.3g})",
            RuntimeWarning,
            stacklevel=2,
        )
    return HawkesFit(model, f, history, converged, it)


@dataclass
class PoissonModel:
    """Homogeneous Poisson process with one rate per type."""

    rates: np.ndarray

    def __post_init__(self):
        self.rates = np.atleast_1d(np.asarray(self.rates, dtype=np.float64))
        if self.rates.ndim != 1 or np.any(self.rates <= 0):
            raise ValueError("Poisson rates must be a positive vector")

    @classmethod
    def fit(cls, seqs: Sequence[EventSequence]) -> "PoissonModel":
        seqs = list(seqs)
        R = seqs[0].num_types
        span = sum(s.times[-1] - s.times[0] for s in seqs)
        counts = np.bincount(np.concatenate([s.types for s in seqs]), minlength=R).astype(float)
        if span <= 0:
            raise ValueError("Poisson MLE needs at least one sequence with two events")
        return cls(np.maximum(counts, 1e-12) / span)

    def loglik(self, seq: EventSequence) -> LikelihoodBreakdown:
        ev = float(np.sum(np.log(self.rates[seq.types])))
        return LikelihoodBreakdown(ev, float(self.rates.sum() * (seq.times[-1] - seq.times[0])))
