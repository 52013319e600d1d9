"""Gradients, Adam, finite-difference checks and the training loops.

Parameters of a backbone and its output head are handled as one flat dict
with ``model/`` and ``head/`` prefixes so that the optimizer, checkpoints and
gradient checks treat every run mode the same way.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import MHPModel, PaddedBatch, forward_hidden, pad_batch
from .hawkes import PoissonModel
from .intensity import (
    LOGLIK_MODES,
    IntensityHead,
    LikelihoodBreakdown,
    NumericalError,
    QuadratureSpec,
    _gaps,
    batch_loglik,
)
from .sequences import EventSequence, SequenceDataset

logger = logging.getLogger(__name__)

VARIANTS = ("mhp", "noHP", "hawkes")


@dataclass
class TrainConfig:
    """Training settings; :meth:`from_dict` rejects unknown keys."""

    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    patience: int = 10
    quad_nodes: int = 16
    seed: int = 0
    loglik_mode: str = "marked"
    variant: str = "mhp"
    d_model: int = 32
    d_state: int = 16
    n_blocks: int = 2
    d_hidden: int = 64
    d_out: int = 32
    first_delta: str = "t1"
    val_fraction: float = 0.1
    truncate: int | None = 5
    tie_beta: bool = False
    objective: str = "full"
    max_iter: int = 500

    def __post_init__(self):
        if self.loglik_mode not in LOGLIK_MODES:
            raise ValueError(f"loglik_mode must be one of {LOGLIK_MODES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ValueError("batch_size and patience must be positive, epochs nonnegative")
        if self.objective not in ("full", "conditional"):
            raise ValueError("objective must be 'full' or 'conditional'")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def backbone_kwargs(self) -> dict:
        return dict(d_model=self.d_model, d_state=self.d_state, n_blocks=self.n_blocks,
                    d_hidden=self.d_hidden, d_out=self.d_out, first_delta=self.first_delta)


# -- flat parameter plumbing ---------------------------------------------------------
def flatten(model_params: Mapping, head_params: Mapping) -> dict:
    out = {f"model/{k}": v for k, v in model_params.items()}
    out.update({f"head/{k}": v for k, v in head_params.items()})
    return out


def unflatten(flat: Mapping) -> tuple[dict, dict]:
    model, head = {}, {}
    for k, v in flat.items():
        scope, name = k.split("/", 1)
        (model if scope == "model" else head)[name] = v
    return model, head


# -- next-event head for the noHP ablation ------------------------------------------------
@dataclass
class NextEventHead:
    """Predicts the next event's type (``R`` logits) and gap (one scalar) from ``h(t_j)``."""

    num_types: int
    d_out: int
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, num_types: int, d_out: int, seed=0, mean_gap: float = 1.0) -> "NextEventHead":
        rng = np.random.default_rng(seed)
        head = cls(num_types, d_out)
        head.params = {
            "W_type": rng.normal(0.0, 0.1 / np.sqrt(d_out), size=(d_out, num_types)),
            "b_type": np.zeros(num_types),
            "w_time": rng.normal(0.0, 0.1 / np.sqrt(d_out), size=(d_out,)),
            "b_time": np.array(float(mean_gap)),
        }
        return head


def next_event_outputs(H: Tensor, head_params: Mapping) -> tuple[Tensor, Tensor]:
    """Type logits ``(B, L, R)`` and predicted gaps ``(B, L)`` for every position."""
    hp = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in head_params.items()}
    logits = ad.matmul(H, hp["W_type"], rowwise=True) + hp["b_type"]
    gap = ad.matmul(H, hp["w_time"], rowwise=True) + hp["b_time"]
    return logits, gap


def batch_surrogate(H: Tensor, head_params: Mapping, batch: PaddedBatch, num_types: int):
    """Per-sequence (-cross-entropy, squared gap error) for next-event prediction."""
    B, L = batch.mask.shape
    if L < 2:
        z = Tensor(np.zeros(B))
        return z, z
    logits, gap = next_event_outputs(H[:, :-1, :], head_params)
    logp = ad.log_softmax(logits, axis=-1)
    target = np.eye(num_types)[batch.types[:, 1:]]
    m = batch.mask[:, 1:].astype(np.float64)
    loglik_type = ad.tsum(ad.tsum(logp * Tensor(target), axis=-1) * Tensor(m), axis=-1)
    err = gap - Tensor(_gaps(batch)[:, 1:])
    sq = ad.tsum(ad.square(err) * Tensor(m), axis=-1)
    return loglik_type, sq


# -- loss & gradient -------------------------------------------------------------------
def _sequence_terms(flat: Mapping, model: MHPModel, batch: PaddedBatch, variant: str,
                    quad: QuadratureSpec, mode: str, conditional: bool = False):
    mp, hp = unflatten(flat)
    H = forward_hidden(mp, model, batch.types, batch.deltas)
    if variant == "noHP":
        return batch_surrogate(H, hp, batch, model.num_types)
    return batch_loglik(H, hp, batch, model.num_types, quad, mode, conditional)


def loss_and_grad(
    model: MHPModel,
    head,
    seqs: Sequence[EventSequence],
    quad: QuadratureSpec = QuadratureSpec(),
    mode: str = "marked",
    params: Mapping | None = None,
    conditional: bool = False,
) -> tuple[float, dict]:
    """Negated mean per-sequence objective over ``seqs`` and its gradient.

    For an :class:`IntensityHead` the objective is the log-likelihood; for a
    :class:`NextEventHead` it is minus the next-event surrogate loss. The
    gradient dict uses the flat ``model/``/``head/`` names.
    """
    if not seqs:
        raise ValueError("batch must be nonempty")
    variant = "noHP" if isinstance(head, NextEventHead) else "mhp"
    flat = params if params is not None else flatten(model.params, head.params)
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in flat.items()}
    batch = pad_batch(seqs, model.first_delta)
    a, b = _sequence_terms(leaves, model, batch, variant, quad, mode, conditional)
    per_seq = a - b
    loss = -ad.tmean(per_seq)
    if not np.isfinite(loss.data):
        bad = int(np.argmax(~np.isfinite(per_seq.data)))
        raise NumericalError(f"non-finite loss on sequence {batch.ids[bad]!r}")
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(loss.data), grads


def evaluate_terms(model: MHPModel, head, seqs: Sequence[EventSequence], quad=QuadratureSpec(),
                   mode="marked", batch_size: int = 256, conditional: bool = False) -> list[LikelihoodBreakdown]:
    variant = "noHP" if isinstance(head, NextEventHead) else "mhp"
    flat = flatten(model.params, head.params)
    out: list[LikelihoodBreakdown] = []
    with ad.no_grad():
        for lo in range(0, len(seqs), batch_size):
            batch = pad_batch(seqs[lo : lo + batch_size], model.first_delta)
            a, b = _sequence_terms(flat, model, batch, variant, quad, mode, conditional)
            out.extend(LikelihoodBreakdown(float(x), float(y)) for x, y in zip(a.data, b.data))
    return out


def finite_difference_grad(f: Callable[[dict], float], params: Mapping, eps: float = 1e-5) -> dict:
    """Central differences of ``f`` with respect to every entry of every array in ``params``."""
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    out = {}
    for k, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(base)
            flat[i] = orig - eps
            fm = f(base)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
        out[k] = g
    return out


def max_relative_error(analytic: Mapping, numeric: Mapping, floor: float = 1e-6) -> dict:
    """Per-parameter max over entries of ``|a - n| / max(|a|, |n|, floor)``."""
    out = {}
    for k in analytic:
        a, n = np.asarray(analytic[k]), np.asarray(numeric[k])
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        out[k] = float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
    return out


# -- Adam --------------------------------------------------------------------------------
@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping, grads: Mapping) -> dict:
    """One bias-corrected Adam descent step; returns new parameter arrays."""
    state.step += 1
    t = state.step
    new = {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {np.shape(p)}")
        m = state.m.get(k, np.zeros_like(g))
        v = state.v.get(k, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        new[k] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new


# -- training loop -------------------------------------------------------------------------
@dataclass
class TrainResult:
    model: MHPModel
    head: object
    log: list
    best_epoch: int
    config: TrainConfig


def _train_val(dataset: SequenceDataset, cfg: TrainConfig):
    if dataset.split is not None:
        train = list(dataset.subset("train"))
        val = list(dataset.subset("val"))
    else:
        seqs = list(dataset)
        perm = np.random.default_rng(cfg.seed).permutation(len(seqs))
        n_val = int(round(cfg.val_fraction * len(seqs)))
        if len(seqs) - n_val < 1:
            n_val = 0
        val = [seqs[i] for i in sorted(perm[:n_val])]
        train = [seqs[i] for i in sorted(perm[n_val:])]
    if not train:
        raise ValueError("training split is empty")
    return train, val or train


def _per_event(terms: Sequence[LikelihoodBreakdown], seqs: Sequence[EventSequence]) -> float:
    return float(sum(t.total for t in terms) / sum(len(s) for s in seqs))


def train_model(dataset: SequenceDataset, config: TrainConfig | Mapping | None = None,
                init: tuple | None = None) -> TrainResult:
    """Minibatch Adam on the negated mean objective with best-on-validation retention."""
    cfg = config if isinstance(config, TrainConfig) else TrainConfig.from_dict(dict(config or {}))
    if cfg.variant == "hawkes":
        raise ValueError("use hawkes.fit_hawkes for the classical variant")
    train, val = _train_val(dataset, cfg)
    R = train[0].num_types
    quad = QuadratureSpec(cfg.quad_nodes)
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    if init is not None:
        model, head = copy.deepcopy(init[0]), copy.deepcopy(init[1])
    else:
        model = MHPModel.init(R, seed=seeds[0], **cfg.backbone_kwargs())
        if cfg.variant == "noHP":
            gaps = np.concatenate([np.diff(s.times) for s in train]) if any(len(s) > 1 for s in train) else np.ones(1)
            head = NextEventHead.init(R, cfg.d_out, seed=seeds[1], mean_gap=float(np.mean(gaps)) if gaps.size else 1.0)
        else:
            try:
                rate = PoissonModel.fit(train).rates
            except ValueError:
                rate = np.ones(R)
            head = IntensityHead.init(R, cfg.d_out, seed=seeds[1], base_rate=rate)
    rng = np.random.default_rng(seeds[2])
    opt = AdamState(lr=cfg.lr)
    cond = cfg.objective == "conditional"
    flat = flatten(model.params, head.params)

    def val_score(fl):
        mp, hp = unflatten(fl)
        m = copy.copy(model); m.params = mp
        h = copy.copy(head); h.params = hp
        return _per_event(evaluate_terms(m, h, val, quad, cfg.loglik_mode, conditional=cond), val)

    best = val_score(flat)
    best_flat = {k: v.copy() for k, v in flat.items()}
    best_epoch = 0
    log = [{"epoch": 0, "train_nll": float("nan"), "val_ll_per_event": best, "best_val_ll_per_event": best}]
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(train))
        total, count = 0.0, 0
        for lo in range(0, len(train), cfg.batch_size):
            chunk = [train[i] for i in perm[lo : lo + cfg.batch_size]]
            loss, grads = loss_and_grad(model, head, chunk, quad, cfg.loglik_mode, params=flat,
                                        conditional=cond)
            flat = adam_step(opt, flat, grads)
            total += loss * len(chunk)
            count += len(chunk)
        score = val_score(flat)
        if not np.isfinite(score):
            raise NumericalError(f"validation objective diverged at epoch {epoch}")
        if score > best:
            best, best_flat, best_epoch, stale = score, {k: v.copy() for k, v in flat.items()}, epoch, 0
        else:
            stale += 1
        log.append({"epoch": epoch, "train_nll": total / count, "val_ll_per_event": score,
                    "best_val_ll_per_event": best})
        logger.info("epoch %d train_nll %.6f val_ll/event %.6f", epoch, total / count, score)
        if stale >= cfg.patience:
            break
    mp, hp = unflatten(best_flat)
    model.params, head.params = mp, hp
    return TrainResult(model, head, log, best_epoch, cfg)


def train_mhp(dataset: SequenceDataset, config: TrainConfig | Mapping | None = None) -> TrainResult:
    cfg = config if isinstance(config, TrainConfig) else TrainConfig.from_dict(dict(config or {}))
    if cfg.variant != "mhp":
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "variant": "mhp"})
    return train_model(dataset, cfg)


def train_noHP(dataset: SequenceDataset, config: TrainConfig | Mapping | None = None) -> TrainResult:
    cfg = config if isinstance(config, TrainConfig) else TrainConfig.from_dict(dict(config or {}))
    if cfg.variant != "noHP":
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "variant": "noHP"})
    return train_model(dataset, cfg)


def predict_next(model: MHPModel, head: NextEventHead, seq: EventSequence) -> tuple[np.ndarray, np.ndarray]:
    """Per-position next-type probabilities ``(n, R)`` and predicted gaps ``(n,)``."""
    batch = pad_batch([seq], model.first_delta)
    with ad.no_grad():
        H = forward_hidden(model.params, model, batch.types, batch.deltas)
        logits, gap = next_event_outputs(H, head.params)
        probs = ad.softmax(logits, axis=-1)
    return probs.data[0], gap.data[0]
