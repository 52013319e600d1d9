"""Event embedding and the time-discretized selective state-space recurrence.

Each block applies pre-layer-norm, a selective scan whose step sizes are the
observed inter-event gaps, and a residual connection. A two-layer ReLU
network maps the final block output to per-event hidden representations.

The state matrix is diagonal per channel: ``A`` has shape ``(D, N)`` and is
stored as ``A_log`` with ``A = -exp(A_log)`` so every entry stays strictly
negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sequences import EventSequence


@dataclass
class MHPModel:
    """Learnable parameters of the backbone plus its shape configuration."""

    num_types: int
    d_model: int = 32
    d_state: int = 16
    n_blocks: int = 2
    d_hidden: int = 64
    d_out: int = 32
    first_delta: str = "t1"
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, num_types: int, seed=0, **config) -> "MHPModel":
        model = cls(num_types=num_types, **config)
        rng = np.random.default_rng(seed)
        D, N, R = model.d_model, model.d_state, num_types
        p = {"W_e": rng.normal(0.0, 1.0, size=(D, R))}
        for b in range(model.n_blocks):
            pre = f"blocks.{b}."
            p[pre + "ln_scale"] = np.ones(D)
            p[pre + "ln_offset"] = np.zeros(D)
            rates = np.geomspace(0.1, 4.0, N)
            p[pre + "A_log"] = np.tile(np.log(rates), (D, 1))
            p[pre + "W_B"] = rng.normal(0.0, 1.0 / np.sqrt(D), size=(D, N))
            p[pre + "W_C"] = rng.normal(0.0, 1.0 / np.sqrt(N), size=(D, N))
        p["W_1"] = rng.normal(0.0, np.sqrt(2.0 / D), size=(D, model.d_hidden))
        p["b_1"] = np.zeros(model.d_hidden)
        p["W_2"] = rng.normal(0.0, 1.0 / np.sqrt(model.d_hidden), size=(model.d_hidden, model.d_out))
        p["b_2"] = np.zeros(model.d_out)
        model.params = p
        model.validate()
        return model

    def validate(self) -> None:
        D, N = self.d_model, self.d_state
        expected = {"W_e": (D, self.num_types), "W_1": (D, self.d_hidden), "b_1": (self.d_hidden,),
                    "W_2": (self.d_hidden, self.d_out), "b_2": (self.d_out,)}
        for b in range(self.n_blocks):
            pre = f"blocks.{b}."
            expected.update({pre + "ln_scale": (D,), pre + "ln_offset": (D,), pre + "A_log": (D, N),
                             pre + "W_B": (D, N), pre + "W_C": (D, N)})
        if set(expected) != set(self.params):
            raise ValueError(f"parameter names mismatch: {sorted(set(expected) ^ set(self.params))}")
        for name, shape in expected.items():
            if np.shape(self.params[name]) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {np.shape(self.params[name])}")
        if self.first_delta not in ("t1", "zero"):
            raise ValueError("first_delta must be 't1' or 'zero'")

    def config(self) -> dict:
        return {"num_types": self.num_types, "d_model": self.d_model, "d_state": self.d_state,
                "n_blocks": self.n_blocks, "d_hidden": self.d_hidden, "d_out": self.d_out,
                "first_delta": self.first_delta}

    def A(self, block: int) -> np.ndarray:
        return -np.exp(self.params[f"blocks.{block}.A_log"])


@dataclass
class HiddenStates:
    """Per-event hidden representations; row ``j`` is ``h(t_j)``."""

    H: np.ndarray

    def __len__(self) -> int:
        return self.H.shape[0]


@dataclass
class PaddedBatch:
    times: np.ndarray   # (B, L), zero beyond each length
    types: np.ndarray   # (B, L) int
    deltas: np.ndarray  # (B, L), zero beyond each length
    mask: np.ndarray    # (B, L) bool
    ids: list


def pad_batch(seqs: Sequence[EventSequence], first_delta: str = "t1") -> PaddedBatch:
    L = max(len(s) for s in seqs)
    B = len(seqs)
    times = np.zeros((B, L))
    types = np.zeros((B, L), dtype=np.int64)
    deltas = np.zeros((B, L))
    mask = np.zeros((B, L), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s)
        times[i, :n] = s.times
        types[i, :n] = s.types
        deltas[i, :n] = s.deltas(first_delta)
        mask[i, :n] = True
    return PaddedBatch(times, types, deltas, mask, [s.id for s in seqs])


def _as_tensors(params: Mapping) -> dict:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


# -- single-step formulas -------------------------------------------------------
def discretize(A_row, delta: float, B_t) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold coefficients for a diagonal state matrix.

    ``A_bar = exp(delta * a)`` and ``B_bar = expm1(delta * a) / a * B_t``,
    elementwise. The gain tends to ``delta`` as ``delta * a -> 0``.
    """
    a = np.asarray(A_row, dtype=np.float64)
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if np.any(a == 0):
        raise ValueError("state matrix entries must be nonzero")
    A_bar = np.exp(delta * a)
    gain = ad.zoh_gain(a, np.full_like(a, delta)).data
    return A_bar, gain * np.asarray(B_t, dtype=np.float64)


# -- batched differentiable forward -----------------------------------------------
def embed_tokens(p: Mapping, types: np.ndarray, num_types: int) -> Tensor:
    """Rows of ``W_e^T`` selected by event type: (B, L) ints -> (B, L, D)."""
    onehot = np.eye(num_types)[types]
    return ad.matmul(Tensor(onehot), ad.swapaxes(p["W_e"], 0, 1), rowwise=True)


def scan(p: Mapping, prefix: str, X: Tensor, deltas: np.ndarray) -> Tensor:
    """Sequential selective scan over axis -2 of ``X`` (shape (..., L, D))."""
    A = -ad.exp(p[prefix + "A_log"])            # (D, N)
    Bt = ad.matmul(X, p[prefix + "W_B"], rowwise=True)    # (..., L, N)
    Ct = ad.matmul(X, p[prefix + "W_C"], rowwise=True)    # (..., L, N)
    L = X.shape[-2]
    z = None
    outs = []
    for i in range(L):
        d = deltas[..., i][..., None, None]     # (..., 1, 1)
        A_bar = ad.exp(A * Tensor(d))           # (..., D, N)
        gain = ad.zoh_gain(A, np.broadcast_to(d, d.shape[:-2] + A.shape))
        x_i = X[..., i, :]                      # (..., D)
        b_i = ad.expand_dims(Bt[..., i, :], -2)  # (..., 1, N)
        inject = gain * b_i * ad.expand_dims(x_i, -1)
        z = inject if z is None else A_bar * z + inject
        c_i = ad.expand_dims(Ct[..., i, :], -2)
        outs.append(ad.tsum(z * c_i, axis=-1))  # (..., D)
    return ad.stack(outs, axis=-2)


def forward_hidden(p: Mapping, model: MHPModel, types: np.ndarray, deltas: np.ndarray) -> Tensor:
    """Hidden representations for a padded batch: returns (B, L, d_out)."""
    p = _as_tensors(p)
    X = embed_tokens(p, types, model.num_types)
    for b in range(model.n_blocks):
        pre = f"blocks.{b}."
        U = ad.layer_norm(X, p[pre + "ln_scale"], p[pre + "ln_offset"])
        X = X + scan(p, pre, U, deltas)
    Z = ad.relu(ad.matmul(X, p["W_1"], rowwise=True) + p["b_1"])
    return ad.matmul(Z, p["W_2"], rowwise=True) + p["b_2"]


# -- per-sequence convenience wrappers ------------------------------------------------
def embed_events(model: MHPModel, seq: EventSequence) -> np.ndarray:
    """Token matrix ``X`` (n x D) whose row ``i`` is column ``r_i`` of ``W_e``."""
    if seq.num_types != model.num_types or np.any(seq.types >= model.num_types):
        raise ValueError("event type out of range for this model")
    with ad.no_grad():
        return embed_tokens(_as_tensors(model.params), seq.types[None, :], model.num_types).data[0]


def ssm_scan(model: MHPModel, X: np.ndarray, deltas: np.ndarray, block: int = 0) -> np.ndarray:
    """Run one block's selective scan on an ``n x D`` token matrix."""
    X = np.asarray(X, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.d_model or deltas.shape != (X.shape[0],):
        raise ValueError(f"shape mismatch: X {X.shape}, deltas {deltas.shape}")
    if np.any(deltas < 0):
        raise ValueError("deltas must be nonnegative")
    with ad.no_grad():
        return scan(_as_tensors(model.params), f"blocks.{block}.", Tensor(X), deltas).data


def hidden_representations(model: MHPModel, seq: EventSequence) -> HiddenStates:
    if seq.num_types != model.num_types:
        raise ValueError(
            f"sequence has {seq.num_types} types but the model expects {model.num_types}"
        )
    deltas = seq.deltas(model.first_delta)
    with ad.no_grad():
        H = forward_hidden(model.params, model, seq.types[None, :], deltas[None, :]).data[0]
    return HiddenStates(H)
