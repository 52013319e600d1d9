"""Softplus intensity head, point-process log-likelihood and sequence scoring.

On the interval ``[t_j, t_{j+1})`` the intensity of type ``r`` is

    lambda_r(t) = f_r(alpha_r (t - t_j) + w_r . h(t_j) + b_r),
    f_r(x) = beta_r log(1 + exp(x / beta_r)).

Likelihood conventions:

* the event term of event ``j >= 2`` uses the left limit of the previous
  piece, i.e. the intensity given the history strictly before ``t_j``;
* the first event has no preceding piece inside the integration range, so
  its term uses the first piece at ``t_1``;
* the non-event term integrates the total intensity over ``[t_1, t_n]`` with
  per-interval Gauss-Legendre quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import HiddenStates, MHPModel, PaddedBatch, forward_hidden, hidden_representations, pad_batch
from .sequences import EventSequence

LOGLIK_MODES = ("marked", "paper_literal")


class NumericalError(ArithmeticError):
    """A likelihood or loss evaluated to NaN or infinity."""


@dataclass(frozen=True)
class QuadratureSpec:
    nodes: int = 16

    def __post_init__(self):
        if int(self.nodes) < 1:
            raise ValueError("quadrature needs at least one node")

    def rule(self) -> tuple[np.ndarray, np.ndarray]:
        """Gauss-Legendre nodes and weights mapped to ``[0, 1]``."""
        x, w = np.polynomial.legendre.leggauss(int(self.nodes))
        return (x + 1.0) / 2.0, w / 2.0


@dataclass(frozen=True)
class LikelihoodBreakdown:
    event_term: float
    nonevent_term: float

    @property
    def total(self) -> float:
        return self.event_term - self.nonevent_term


@dataclass
class IntensityHead:
    """Per-type softplus intensity parameters; ``beta = exp(log_beta)`` stays positive."""

    num_types: int
    d_out: int
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, num_types: int, d_out: int, seed=0, base_rate: float | np.ndarray = 1.0) -> "IntensityHead":
        rng = np.random.default_rng(seed)
        rate = np.broadcast_to(np.asarray(base_rate, dtype=np.float64), (num_types,))
        head = cls(num_types, d_out)
        head.params = {
            "alpha": np.zeros(num_types),
            "w": rng.normal(0.0, 0.1 / np.sqrt(d_out), size=(num_types, d_out)),
            "b": inverse_softplus(rate),
            "log_beta": np.zeros(num_types),
        }
        return head

    @classmethod
    def constant(cls, num_types: int, d_out: int, rate: float) -> "IntensityHead":
        """Degenerate head with ``lambda_r(t) = rate`` everywhere."""
        head = cls(num_types, d_out)
        head.params = {
            "alpha": np.zeros(num_types),
            "w": np.zeros((num_types, d_out)),
            "b": np.zeros(num_types),
            "log_beta": np.full(num_types, np.log(rate / np.log(2.0))),
        }
        return head

    @property
    def beta(self) -> np.ndarray:
        return np.exp(self.params["log_beta"])

    def validate(self) -> None:
        R, Dm = self.num_types, self.d_out
        shapes = {"alpha": (R,), "w": (R, Dm), "b": (R,), "log_beta": (R,)}
        if set(shapes) != set(self.params):
            raise ValueError("intensity head parameter names mismatch")
        for k, s in shapes.items():
            if np.shape(self.params[k]) != s:
                raise ValueError(f"{k}: expected shape {s}, got {np.shape(self.params[k])}")


def softplus(x, beta=1.0):
    """``beta * log(1 + exp(x / beta))`` computed without overflow."""
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta <= 0):
        raise ValueError("beta must be positive")
    return beta * np.logaddexp(0.0, np.asarray(x, dtype=np.float64) / beta)


def inverse_softplus(y, beta=1.0):
    y = np.asarray(y, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    u = y / beta
    return beta * (u + np.log(-np.expm1(-u)))


def intensity_at(head: IntensityHead, H: HiddenStates, seq: EventSequence, t, r: int | None = None):
    """``lambda_r(t)`` (or the total over types when ``r`` is None), right-continuous at events."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < seq.times[0]):
        raise ValueError("intensity is undefined before the first event")
    j = np.searchsorted(seq.times, t_arr, side="right") - 1
    p = head.params
    base = H.H[j] @ p["w"].T + p["b"]                       # (..., R)
    x = base + p["alpha"] * (t_arr - seq.times[j])[..., None]
    lam = softplus(x, head.beta)
    if r is None:
        return lam.sum(axis=-1)
    if not 0 <= r < head.num_types:
        raise ValueError("type out of range")
    return lam[..., r]


def _gaps(batch: PaddedBatch) -> np.ndarray:
    g = np.diff(batch.times, axis=1, prepend=0.0)
    g[~batch.mask] = 0.0
    g[:, 0] = 0.0
    return g


def batch_loglik(
    H: Tensor,
    head_params: Mapping,
    batch: PaddedBatch,
    num_types: int,
    quad: QuadratureSpec = QuadratureSpec(),
    mode: str = "marked",
    conditional: bool = False,
) -> tuple[Tensor, Tensor]:
    """Differentiable (event_term, nonevent_term), each of shape (B,).

    ``conditional=True`` leaves the first event out of the event term.
    """
    if mode not in LOGLIK_MODES:
        raise ValueError(f"loglik mode must be one of {LOGLIK_MODES}")
    hp = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in head_params.items()}
    beta = ad.exp(hp["log_beta"])
    alpha = hp["alpha"]
    base = ad.matmul(H, ad.swapaxes(hp["w"], 0, 1), rowwise=True) + hp["b"]   # (B, L, R)
    gaps = _gaps(batch)
    mask = batch.mask.astype(np.float64)
    if conditional:
        mask[:, 0] = 0.0
    L = base.shape[1]

    if L > 1:
        left = base[:, :-1, :] + alpha * Tensor(gaps[:, 1:, None])
        x_ev = ad.concat([base[:, :1, :], left], axis=1)
    else:
        x_ev = base
    lam_ev = ad.softplus(x_ev, beta)
    if mode == "marked":
        onehot = np.eye(num_types)[batch.types]
        sel = ad.tsum(lam_ev * Tensor(onehot), axis=-1)
    else:
        sel = ad.tsum(lam_ev, axis=-1)
    with np.errstate(divide="ignore"):
        log_sel = ad.log(sel)
    _check_finite(log_sel.data, batch, "event log-intensity")
    event = ad.tsum(log_sel * Tensor(mask), axis=-1)

    if L > 1:
        nodes, weights = quad.rule()
        g = gaps[:, 1:, None]                                 # (B, L-1, 1)
        s = g * nodes                                         # (B, L-1, Q)
        wq = g * weights
        x = ad.expand_dims(base[:, :-1, :], 2) + alpha * Tensor(s[..., None])
        lam = ad.softplus(x, beta)                            # (B, L-1, Q, R)
        _check_finite(lam.data.sum(axis=(2, 3)), batch, "interval intensity", offset=1)
        nonevent = ad.tsum(ad.tsum(lam, axis=-1) * Tensor(wq), axis=(1, 2))
    else:
        nonevent = Tensor(np.zeros(base.shape[0]))
    return event, nonevent


def _check_finite(values: np.ndarray, batch: PaddedBatch, what: str, offset: int = 0) -> None:
    m = batch.mask[:, offset:] if offset else batch.mask
    bad = ~np.isfinite(values) & m[:, : values.shape[1]]
    if np.any(bad):
        b, j = np.argwhere(bad)[0]
        raise NumericalError(
            f"sequence {batch.ids[b]!r}: non-finite {what} at event index {j + offset}"
        )


def log_likelihood(
    model: MHPModel,
    head: IntensityHead,
    seq: EventSequence,
    quad: QuadratureSpec = QuadratureSpec(),
    mode: str = "marked",
) -> LikelihoodBreakdown:
    return log_likelihood_batch(model, head, [seq], quad, mode)[0]


def log_likelihood_batch(model, head, seqs, quad=QuadratureSpec(), mode="marked") -> list[LikelihoodBreakdown]:
    if not seqs:
        return []
    for s in seqs:
        if s.num_types != model.num_types or s.num_types != head.num_types:
            raise ValueError(
                f"sequence {s.id!r} has {s.num_types} types; checkpoint expects {model.num_types}"
            )
    batch = pad_batch(seqs, model.first_delta)
    with ad.no_grad():
        H = forward_hidden(model.params, model, batch.types, batch.deltas)
        ev, ne = batch_loglik(H, head.params, batch, model.num_types, quad, mode)
    return [LikelihoodBreakdown(float(e), float(n)) for e, n in zip(ev.data, ne.data)]


def score_sequence(model, head, seq, quad: QuadratureSpec = QuadratureSpec(), mode: str = "marked") -> float:
    """Log-likelihood of ``seq`` under a trained model, used downstream as a scalar feature."""
    return log_likelihood(model, head, seq, quad, mode).total


def gauss_legendre_compensator(
    intensity: Callable[[np.ndarray, int], np.ndarray],
    times: np.ndarray,
    quad: QuadratureSpec = QuadratureSpec(),
) -> float:
    """Integrate a piecewise-smooth total intensity over ``[t_1, t_n]``.

    ``intensity(t, j)`` evaluates the total intensity at points ``t`` inside
    ``[times[j], times[j+1])``, using only history up to event ``j``.
    """
    nodes, weights = quad.rule()
    total = 0.0
    for j in range(len(times) - 1):
        width = times[j + 1] - times[j]
        pts = times[j] + width * nodes
        total += width * float(np.dot(weights, intensity(pts, j)))
    return total


def mhp_total_intensity(model: MHPModel, head: IntensityHead, seq: EventSequence):
    """Closure suitable for :func:`gauss_legendre_compensator`."""
    H = hidden_representations(model, seq)

    def fn(t, j):
        return intensity_at(head, H, seq, t)

    return fn
