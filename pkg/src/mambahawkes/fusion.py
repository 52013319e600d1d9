"""Embedding-level fusion stack and prediction head.

Pipeline per video, all on precomputed ``d``-wide token matrices:

1. bipolar cross-attention between audio-visual tokens ``X_c`` (K x d) and
   textual tokens ``X_t`` (n_w x d), with a positive branch scaled by
   ``alpha`` and a negative branch scaled by ``gamma = -(1 - alpha)``;
2. FFN integration ``T~ = ReLU(X_t + (C_P | C_N) W1_t) W2_t`` and dually for
   ``C~``, followed by tanh-scored attentive pooling to ``T`` and ``C``;
3. the same encoder applied to the similarity-weighted average of the
   retrieved neighbours' tokens, giving ``T_r`` and ``C_r``, plus a label
   embedding ``L_r``;
4. six Hadamard interactions ``I``, ``Output = [C, T, C_r, T_r, I] W_output``
   (width 10d -> d), and ``Prediction = [Output, Score_SAS, Likelihood] W_pred``.

Within each branch the query and key projections are shared by both
attention directions and there are two value projections: ``W_C`` on the
textual tokens and ``W_T`` on the audio-visual tokens.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .archive import ArchiveError, load_archive, save_archive
from .autodiff import Tensor
from .intensity import NumericalError
from .metrics import MetricReport
from .training import AdamState, adam_step

logger = logging.getLogger(__name__)

MODES = ("full", "noSAS", "noMamba", "noHP")
LIKELIHOOD_FIELD = {"full": "likelihood_mhp", "noSAS": "likelihood_mhp",
                    "noMamba": "likelihood_hawkes", "noHP": "likelihood_nohp"}
KIND_BUNDLES = "bundles"
KIND_FUSION = "fusion"


# -- data -------------------------------------------------------------------------------
@dataclass
class Neighbor:
    X_c: np.ndarray
    X_t: np.ndarray
    similarity: float
    label: float


@dataclass
class EmbeddingBundle:
    """Everything the fusion head needs for one video."""

    id: str
    X_c: np.ndarray
    X_t: np.ndarray
    neighbors: list = field(default_factory=list)
    sas_users: np.ndarray | None = None
    sas_item: np.ndarray | None = None
    likelihood_mhp: float | None = None
    likelihood_hawkes: float | None = None
    likelihood_nohp: float | None = None
    target: float | None = None

    def __post_init__(self):
        self.X_c = np.asarray(self.X_c, dtype=np.float64)
        self.X_t = np.asarray(self.X_t, dtype=np.float64)
        if self.X_c.ndim != 2 or self.X_t.ndim != 2 or self.X_c.shape[0] == 0 or self.X_t.shape[0] == 0:
            raise ValueError(f"bundle {self.id!r}: token matrices must be nonempty 2-D arrays")
        d = self.d
        if self.X_t.shape[1] != d:
            raise ValueError(f"bundle {self.id!r}: X_t width {self.X_t.shape[1]} != X_c width {d}")
        nb_shapes = set()
        for nb in self.neighbors:
            nb.X_c = np.asarray(nb.X_c, dtype=np.float64)
            nb.X_t = np.asarray(nb.X_t, dtype=np.float64)
            if nb.X_c.shape[-1] != d or nb.X_t.shape[-1] != d:
                raise ValueError(f"bundle {self.id!r}: neighbour token width differs from d={d}")
            if not (np.isfinite(nb.similarity) and np.isfinite(nb.label)):
                raise ValueError(f"bundle {self.id!r}: neighbour similarity/label must be finite")
            nb_shapes.add((nb.X_c.shape, nb.X_t.shape))
        if len(nb_shapes) > 1:
            raise ValueError(f"bundle {self.id!r}: neighbours must share token-matrix shapes")
        if (self.sas_users is None) != (self.sas_item is None):
            raise ValueError(f"bundle {self.id!r}: SAS users and item vector come together")

    @property
    def d(self) -> int:
        return self.X_c.shape[1]

    def signature(self) -> tuple:
        nb = self.neighbors[0] if self.neighbors else None
        return (self.X_c.shape, self.X_t.shape, len(self.neighbors),
                None if nb is None else (nb.X_c.shape, nb.X_t.shape))

    def score_sas(self) -> float:
        if self.sas_users is None:
            raise ValueError(f"bundle {self.id!r} has no SAS inputs")
        return score_sas_aggregate(self.sas_users, self.sas_item)

    def likelihood(self, mode: str) -> float:
        value = getattr(self, LIKELIHOOD_FIELD[mode])
        if value is None:
            raise ValueError(f"bundle {self.id!r}: mode {mode!r} needs {LIKELIHOOD_FIELD[mode]}")
        return float(value)


# -- parameters -----------------------------------------------------------------------------
@dataclass
class FusionHead:
    """Learnable fusion weights plus the fixed balance ``alpha`` and input scaling.

    ``norm`` holds affine constants applied around the prediction formula:
    likelihood inputs and neighbour labels are standardized before entering
    the head and predictions are mapped back to target units. The identity
    default leaves the formula untouched.
    """

    d: int
    alpha: float = 0.2
    mode: str = "full"
    params: dict = field(default_factory=dict)
    norm: dict = field(default_factory=lambda: {"target_mean": 0.0, "target_scale": 1.0,
                                                "lik_mean": 0.0, "lik_scale": 1.0})

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def gamma(self) -> float:
        return -(1.0 - self.alpha)

    @property
    def n_side(self) -> int:
        return 1 if self.mode == "noSAS" else 2

    @classmethod
    def init(cls, d: int, seed=0, alpha: float = 0.2, mode: str = "full") -> "FusionHead":
        head = cls(d, alpha, mode)
        rng = np.random.default_rng(seed)

        def mat(r, c):
            return rng.normal(0.0, np.sqrt(1.0 / r), size=(r, c))

        p = {}
        for br in ("P", "N"):
            for name in ("W_Q", "W_K", "W_C", "W_T"):
                p[f"{name}_{br}"] = mat(d, d)
        for s in ("t", "c"):
            p[f"W1_{s}"] = mat(2 * d, d)
            p[f"W2_{s}"] = mat(d, d)
            p[f"Wp_{s}"] = mat(d, d)
            p[f"vp_{s}"] = rng.normal(0.0, np.sqrt(1.0 / d), size=d)
        p["w_label"] = rng.normal(0.0, 1.0, size=d)
        p["b_label"] = np.zeros(d)
        p["W_output"] = mat(10 * d, d)
        p["W_pred"] = np.zeros(d + head.n_side)
        head.params = p
        head.validate()
        return head

    def shapes(self) -> dict:
        d = self.d
        out = {f"{n}_{br}": (d, d) for br in ("P", "N") for n in ("W_Q", "W_K", "W_C", "W_T")}
        for s in ("t", "c"):
            out.update({f"W1_{s}": (2 * d, d), f"W2_{s}": (d, d), f"Wp_{s}": (d, d), f"vp_{s}": (d,)})
        out.update({"w_label": (d,), "b_label": (d,), "W_output": (10 * d, d), "W_pred": (d + self.n_side,)})
        return out

    def validate(self) -> None:
        expected = self.shapes()
        if set(expected) != set(self.params):
            raise ValueError(f"fusion parameter names mismatch: {sorted(set(expected) ^ set(self.params))}")
        for k, s in expected.items():
            if np.shape(self.params[k]) != s:
                raise ValueError(f"{k}: expected shape {s}, got {np.shape(self.params[k])}")


# -- differentiable building blocks (leading batch axes allowed) --------------------------------
def _attend(Xq: Tensor, Xk: Tensor, Wq, Wk, Wv, scale: float, d: int):
    Q = ad.matmul(Xq, Wq)
    K = ad.matmul(Xk, Wk)
    V = ad.matmul(Xk, Wv)
    logits = ad.matmul(Q, ad.swapaxes(K, -1, -2)) * (scale / np.sqrt(d))
    w = ad.softmax(logits, axis=-1)
    return w, ad.matmul(w, V)


def _bipolar(p: Mapping, X_c: Tensor, X_t: Tensor, alpha: float, d: int):
    gamma = -(1.0 - alpha)
    out = {}
    for br, scale in (("P", alpha), ("N", gamma)):
        # audio-visual queries over textual keys, and textual queries over audio-visual keys
        _, out["T_" + br] = _attend(X_c, X_t, p[f"W_Q_{br}"], p[f"W_K_{br}"], p[f"W_C_{br}"], scale, d)
        _, out["C_" + br] = _attend(X_t, X_c, p[f"W_Q_{br}"], p[f"W_K_{br}"], p[f"W_T_{br}"], scale, d)
    return out["T_P"], out["T_N"], out["C_P"], out["C_N"]


def _ffn(p: Mapping, X_t: Tensor, X_c: Tensor, branches):
    T_P, T_N, C_P, C_N = branches
    T_tilde = ad.matmul(ad.relu(X_t + ad.matmul(ad.concat([C_P, C_N], axis=-1), p["W1_t"])), p["W2_t"])
    C_tilde = ad.matmul(ad.relu(X_c + ad.matmul(ad.concat([T_P, T_N], axis=-1), p["W1_c"])), p["W2_c"])
    return T_tilde, C_tilde


def _pool(X: Tensor, W_p, v_p):
    s = ad.softmax(ad.matmul(ad.tanh(ad.matmul(X, W_p)), v_p), axis=-1)   # (..., m)
    return ad.tsum(ad.expand_dims(s, -1) * X, axis=-2)


def _encode(p: Mapping, X_c: Tensor, X_t: Tensor, alpha: float, d: int):
    T_tilde, C_tilde = _ffn(p, X_t, X_c, _bipolar(p, X_c, X_t, alpha, d))
    return _pool(T_tilde, p["Wp_t"], p["vp_t"]), _pool(C_tilde, p["Wp_c"], p["vp_c"])


def _interactions(T, C, T_r, C_r, L_r):
    return ad.concat([C * C_r, C * T_r, C * L_r, T * C_r, T * T_r, T * L_r], axis=-1)


def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


# -- batched forward ------------------------------------------------------------------------------
@dataclass
class BundleBatch:
    ids: list
    X_c: np.ndarray        # (B, K, d)
    X_t: np.ndarray        # (B, n_w, d)
    R_c: np.ndarray        # (B, K', d) similarity-weighted neighbour tokens
    R_t: np.ndarray        # (B, n', d)
    weights: np.ndarray    # (B, S)
    labels: np.ndarray     # (B, S), already scaled by the head's norm
    sas: np.ndarray        # (B,)
    lik: np.ndarray        # (B,), already scaled
    target: np.ndarray     # (B,), already scaled; NaN when absent


def make_batch(bundles: Sequence[EmbeddingBundle], head: FusionHead) -> BundleBatch:
    if not bundles:
        raise ValueError("empty bundle batch")
    sig = bundles[0].signature()
    if any(b.signature() != sig for b in bundles):
        raise ValueError("bundles in one batch must share token shapes; group them first")
    for b in bundles:
        if b.d != head.d:
            raise ValueError(f"bundle {b.id!r}: d={b.d} but the head expects d={head.d}")
        if not b.neighbors:
            raise ValueError(f"bundle {b.id!r}: retrieval needs at least one neighbour")
    nm = head.norm
    sims = np.array([[nb.similarity for nb in b.neighbors] for b in bundles])
    w = _softmax_np(sims, axis=-1)
    nb_c = np.stack([np.stack([nb.X_c for nb in b.neighbors]) for b in bundles])
    nb_t = np.stack([np.stack([nb.X_t for nb in b.neighbors]) for b in bundles])
    labels = np.array([[nb.label for nb in b.neighbors] for b in bundles])
    if head.mode == "noSAS":
        sas = np.zeros(len(bundles))
    else:
        sas = np.array([b.score_sas() for b in bundles])
    lik = np.array([b.likelihood(head.mode) for b in bundles])
    target = np.array([np.nan if b.target is None else b.target for b in bundles], dtype=np.float64)
    return BundleBatch(
        ids=[b.id for b in bundles],
        X_c=np.stack([b.X_c for b in bundles]),
        X_t=np.stack([b.X_t for b in bundles]),
        R_c=np.einsum("bs,bskd->bkd", w, nb_c),
        R_t=np.einsum("bs,bskd->bkd", w, nb_t),
        weights=w,
        labels=(labels - nm["target_mean"]) / nm["target_scale"],
        sas=sas,
        lik=(lik - nm["lik_mean"]) / nm["lik_scale"],
        target=(target - nm["target_mean"]) / nm["target_scale"],
    )


def forward(params: Mapping, head: FusionHead, batch: BundleBatch, trace: dict | None = None) -> Tensor:
    """Scaled predictions ``(B,)``; fills ``trace`` with intermediates when given."""
    p = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    d, alpha = head.d, head.alpha
    T, C = _encode(p, Tensor(batch.X_c), Tensor(batch.X_t), alpha, d)
    T_r, C_r = _encode(p, Tensor(batch.R_c), Tensor(batch.R_t), alpha, d)
    enc = ad.expand_dims(Tensor(batch.labels), -1) * p["w_label"] + p["b_label"]   # (B, S, d)
    L_r = ad.tsum(ad.expand_dims(Tensor(batch.weights), -1) * enc, axis=-2)
    I = _interactions(T, C, T_r, C_r, L_r)
    Z = ad.concat([C, T, C_r, T_r, I], axis=-1)
    if Z.shape[-1] != 10 * d:
        raise ValueError(f"concat width {Z.shape[-1]} != 10d = {10 * d}")
    out = ad.matmul(Z, p["W_output"])
    side = [Tensor(batch.lik[:, None])]
    if head.mode != "noSAS":
        side.insert(0, Tensor(batch.sas[:, None]))
    feats = ad.concat([out] + side, axis=-1)
    pred = ad.matmul(feats, p["W_pred"])
    if trace is not None:
        trace.update(T=T.data, C=C.data, T_r=T_r.data, C_r=C_r.data, L_r=L_r.data, I=I.data,
                     concat=Z.data, output=out.data, features=feats.data)
    return pred


def group_bundles(bundles: Sequence[EmbeddingBundle]) -> list[list[int]]:
    """Indices grouped by token-shape signature, in first-appearance order."""
    groups: dict = {}
    for i, b in enumerate(bundles):
        groups.setdefault(b.signature(), []).append(i)
    return list(groups.values())


# -- public per-bundle operations --------------------------------------------------------------
def _tensors(head: FusionHead) -> dict:
    return {k: Tensor(v) for k, v in head.params.items()}


def _check_width(head: FusionHead, *mats) -> None:
    for m in mats:
        if np.shape(m)[-1] != head.d:
            raise ValueError(f"token width {np.shape(m)[-1]} does not match d={head.d}")


def bipolar_attention(head: FusionHead, X_c, X_t):
    """``(T_P, T_N, C_P, C_N)``; ``T_*`` has one row per audio-visual token, ``C_*`` per textual token."""
    X_c, X_t = np.asarray(X_c, float), np.asarray(X_t, float)
    if X_c.shape[0] == 0 or X_t.shape[0] == 0:
        raise ValueError("token matrices must be nonempty")
    _check_width(head, X_c, X_t)
    with ad.no_grad():
        return tuple(t.data for t in _bipolar(_tensors(head), Tensor(X_c), Tensor(X_t), head.alpha, head.d))


def attention_weights(head: FusionHead, X_q, X_k, branch: str = "P", value: str = "C") -> np.ndarray:
    """Row-stochastic weight matrix of one attention direction (for inspection and tests)."""
    scale = head.alpha if branch == "P" else head.gamma
    p = _tensors(head)
    with ad.no_grad():
        w, _ = _attend(Tensor(np.asarray(X_q, float)), Tensor(np.asarray(X_k, float)),
                       p[f"W_Q_{branch}"], p[f"W_K_{branch}"], p[f"W_{value}_{branch}"], scale, head.d)
    return w.data


def ffn_integrate(head: FusionHead, X_t, X_c, branches):
    X_t, X_c = np.asarray(X_t, float), np.asarray(X_c, float)
    T_P, T_N, C_P, C_N = (np.asarray(b, float) for b in branches)
    if C_P.shape != X_t.shape or C_N.shape != X_t.shape or T_P.shape != X_c.shape or T_N.shape != X_c.shape:
        raise ValueError("branch shapes must be n_w x d for C_P/C_N and K x d for T_P/T_N")
    with ad.no_grad():
        T_tilde, C_tilde = _ffn(_tensors(head), Tensor(X_t), Tensor(X_c),
                                tuple(Tensor(b) for b in (T_P, T_N, C_P, C_N)))
    return T_tilde.data, C_tilde.data


def attentive_pool(head: FusionHead, X, stream: str = "t") -> np.ndarray:
    X = np.asarray(X, float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("attentive pooling needs at least one row")
    _check_width(head, X)
    p = _tensors(head)
    with ad.no_grad():
        return _pool(Tensor(X), p[f"Wp_{stream}"], p[f"vp_{stream}"]).data


def retrieval_weights(similarities) -> np.ndarray:
    s = np.asarray(similarities, dtype=np.float64)
    if s.size == 0:
        raise ValueError("retrieval needs at least one neighbour")
    if not np.all(np.isfinite(s)):
        raise ValueError("similarities must be finite")
    return _softmax_np(s)


def retrieval_aggregate(head: FusionHead, bundle: EmbeddingBundle):
    """``(T_r, C_r, L_r)`` from the similarity-weighted neighbours of ``bundle``."""
    if not bundle.neighbors:
        raise ValueError(f"bundle {bundle.id!r}: retrieval needs at least one neighbour")
    w = retrieval_weights([nb.similarity for nb in bundle.neighbors])
    R_c = np.einsum("s,skd->kd", w, np.stack([nb.X_c for nb in bundle.neighbors]))
    R_t = np.einsum("s,skd->kd", w, np.stack([nb.X_t for nb in bundle.neighbors]))
    labels = (np.array([nb.label for nb in bundle.neighbors]) - head.norm["target_mean"]) / head.norm["target_scale"]
    p = head.params
    L_r = w @ (labels[:, None] * p["w_label"] + p["b_label"])
    with ad.no_grad():
        T_r, C_r = _encode(_tensors(head), Tensor(R_c), Tensor(R_t), head.alpha, head.d)
    return T_r.data, C_r.data, L_r


def interaction_features(T, C, T_r, C_r, L_r) -> np.ndarray:
    vecs = [np.asarray(v, dtype=np.float64) for v in (T, C, T_r, C_r, L_r)]
    if any(v.ndim != 1 or v.shape != vecs[0].shape for v in vecs):
        raise ValueError("interaction inputs must be d-vectors of equal length")
    with ad.no_grad():
        return _interactions(*(Tensor(v) for v in vecs)).data


def score_sas_aggregate(U, item_scoring) -> float:
    """Sigmoid of the mean user-item dot product."""
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    item = np.asarray(item_scoring, dtype=np.float64)
    if U.shape[0] == 0 or U.size == 0:
        raise ValueError("SAS aggregation needs at least one user")
    if U.shape[1] != item.shape[-1]:
        raise ValueError("user and item embedding widths differ")
    m = float(np.mean(U @ item))
    return float(ad._sigmoid(np.array(m)))


def predict(head: FusionHead, bundle: EmbeddingBundle | Sequence[EmbeddingBundle], mode: str | None = None):
    """Prediction in target units; a scalar for one bundle, an array for a list."""
    if mode is not None and mode != head.mode:
        raise ValueError(f"head was built for mode {head.mode!r}, not {mode!r}")
    single = isinstance(bundle, EmbeddingBundle)
    bundles = [bundle] if single else list(bundle)
    out = np.empty(len(bundles))
    with ad.no_grad():
        for idx in group_bundles(bundles):
            batch = make_batch([bundles[i] for i in idx], head)
            out[idx] = forward(head.params, head, batch).data
    out = out * head.norm["target_scale"] + head.norm["target_mean"]
    return float(out[0]) if single else out


# -- training ---------------------------------------------------------------------------------
@dataclass
class FusionConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    patience: int = 10
    seed: int = 0
    alpha: float = 0.2
    mode: str = "full"
    standardize: bool = True
    val_fraction: float = 0.2
    weight_decay: float = 1e-3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ValueError("batch_size and patience must be positive, epochs nonnegative")

    @classmethod
    def from_dict(cls, d: Mapping) -> "FusionConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FusionResult:
    head: FusionHead
    log: list
    best_epoch: int
    val_report: MetricReport | None
    config: FusionConfig


def mse_loss_and_grad(head: FusionHead, bundles: Sequence[EmbeddingBundle], params: Mapping | None = None,
                      weight_decay: float = 0.0) -> tuple[float, dict]:
    """Mean squared error in scaled units over ``bundles`` and its gradient."""
    flat = params if params is not None else head.params
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in flat.items()}
    total = None
    n = len(bundles)
    for idx in group_bundles(bundles):
        batch = make_batch([bundles[i] for i in idx], head)
        if np.any(np.isnan(batch.target)):
            raise ValueError("training bundles need targets")
        err = forward(leaves, head, batch) - Tensor(batch.target)
        part = ad.tsum(ad.square(err)) * (1.0 / n)
        total = part if total is None else total + part
    if weight_decay:
        for k, t in leaves.items():
            total = total + ad.tsum(ad.square(t)) * (0.5 * weight_decay)
    if not np.isfinite(total.data):
        raise NumericalError("fusion loss is not finite")
    total.backward()
    return float(total.data), {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in leaves.items()}


def _fit_norm(bundles: Sequence[EmbeddingBundle], mode: str) -> dict:
    y = np.array([b.target for b in bundles], dtype=np.float64)
    lik = np.array([b.likelihood(mode) for b in bundles], dtype=np.float64)
    ys = y.std()
    ls = lik.std()
    return {"target_mean": float(y.mean()), "target_scale": float(ys) if ys > 0 else 1.0,
            "lik_mean": float(lik.mean()), "lik_scale": float(ls) if ls > 0 else 1.0}


def split_bundles(bundles: Sequence[EmbeddingBundle], val_fraction: float, seed) -> tuple[list, list]:
    perm = np.random.default_rng(seed).permutation(len(bundles))
    n_val = int(round(val_fraction * len(bundles)))
    if len(bundles) - n_val < 1:
        n_val = 0
    val = [bundles[i] for i in sorted(perm[:n_val])]
    train = [bundles[i] for i in sorted(perm[n_val:])]
    return train, val


def train_fusion(bundles: Sequence[EmbeddingBundle], config: FusionConfig | Mapping | None = None,
                 val_bundles: Sequence[EmbeddingBundle] | None = None) -> FusionResult:
    """Adam on the MSE; keeps the parameters with the best validation MSE."""
    cfg = config if isinstance(config, FusionConfig) else FusionConfig.from_dict(dict(config or {}))
    bundles = list(bundles)
    if not bundles:
        raise ValueError("no training bundles")
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    if val_bundles is None:
        train, val = split_bundles(bundles, cfg.val_fraction, seeds[0])
    else:
        train, val = bundles, list(val_bundles)
    if not train:
        raise ValueError("training split is empty")
    head = FusionHead.init(train[0].d, seed=seeds[1], alpha=cfg.alpha, mode=cfg.mode)
    if cfg.standardize:
        head.norm = _fit_norm(train, cfg.mode)
    monitor = val or train
    y_mon = np.array([b.target for b in monitor], dtype=np.float64)

    def monitor_mse(h):
        return float(np.mean((predict(h, monitor) - y_mon) ** 2))

    rng = np.random.default_rng(seeds[2])
    opt = AdamState(lr=cfg.lr)
    params = {k: v.copy() for k, v in head.params.items()}
    best = monitor_mse(head)
    best_params, best_epoch, stale = copy.deepcopy(params), 0, 0
    log = [{"epoch": 0, "train_mse": float("nan"), "val_mse": best, "best_val_mse": best}]
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(train))
        total = 0.0
        for lo in range(0, len(train), cfg.batch_size):
            chunk = [train[i] for i in perm[lo : lo + cfg.batch_size]]
            loss, grads = mse_loss_and_grad(head, chunk, params, cfg.weight_decay)
            params = adam_step(opt, params, grads)
            total += loss * len(chunk)
        head.params = params
        score = monitor_mse(head)
        if not np.isfinite(score):
            raise NumericalError(f"fusion validation loss diverged at epoch {epoch}")
        if score < best:
            best, best_params, best_epoch, stale = score, copy.deepcopy(params), epoch, 0
        else:
            stale += 1
        log.append({"epoch": epoch, "train_mse": total / len(train), "val_mse": score, "best_val_mse": best})
        logger.info("fusion epoch %d train_mse %.6f val_mse %.6f", epoch, total / len(train), score)
        if stale >= cfg.patience:
            break
    head.params = best_params
    report = MetricReport.compute(y_mon, predict(head, monitor)) if len(monitor) >= 2 and np.ptp(y_mon) > 0 else None
    return FusionResult(head, log, best_epoch, report, cfg)


# -- synthetic bundles ------------------------------------------------------------------------------
def make_synthetic_bundles(
    count: int,
    d: int = 8,
    seed=0,
    n_av: int = 4,
    n_text: int = 3,
    n_neighbors: int = 2,
    n_users: int = 4,
    slope: float = 1.0,
    intercept: float = 0.0,
    noise_var: float = 0.01,
    likelihoods: Sequence[float] | None = None,
    driver: str = "likelihood_mhp",
) -> list[EmbeddingBundle]:
    """Random token bundles whose target is ``slope * driver + intercept + N(0, noise_var)``.

    ``likelihoods`` may supply real sequence scores for ``likelihood_mhp``;
    otherwise all likelihood fields are drawn at random.
    """
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    if likelihoods is not None and len(likelihoods) != count:
        raise ValueError("need one likelihood per bundle")
    out = []
    for i in range(count):
        lik = float(likelihoods[i]) if likelihoods is not None else float(rng.normal(-8.0, 3.0))
        neighbors = [Neighbor(rng.normal(size=(n_av, d)), rng.normal(size=(n_text, d)),
                              float(rng.normal()), float(rng.normal(0.0, 2.0)))
                     for _ in range(n_neighbors)]
        b = EmbeddingBundle(
            id=f"video-{i:05d}",
            X_c=rng.normal(size=(n_av, d)),
            X_t=rng.normal(size=(n_text, d)),
            neighbors=neighbors,
            sas_users=rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_users, d)),
            sas_item=rng.normal(size=d),
            likelihood_mhp=lik,
            likelihood_hawkes=float(rng.normal(-8.0, 3.0)),
            likelihood_nohp=float(rng.normal(-3.0, 1.0)),
        )
        drive = b.score_sas() if driver == "score_sas" else getattr(b, driver)
        b.target = float(slope * drive + intercept + rng.normal(0.0, np.sqrt(noise_var)))
        out.append(b)
    return out


# -- persistence --------------------------------------------------------------------------------
_SCALARS = ("likelihood_mhp", "likelihood_hawkes", "likelihood_nohp", "target")


def save_bundles(path, bundles: Sequence[EmbeddingBundle]) -> str:
    tensors, records = {}, []
    for i, b in enumerate(bundles):
        pre = f"{i:06d}/"
        tensors[pre + "X_c"] = b.X_c
        tensors[pre + "X_t"] = b.X_t
        for s, nb in enumerate(b.neighbors):
            tensors[f"{pre}nb{s:04d}/X_c"] = nb.X_c
            tensors[f"{pre}nb{s:04d}/X_t"] = nb.X_t
        if b.sas_users is not None:
            tensors[pre + "sas_users"] = b.sas_users
            tensors[pre + "sas_item"] = b.sas_item
        rec = {"id": b.id, "similarity": [float(nb.similarity) for nb in b.neighbors],
               "label": [float(nb.label) for nb in b.neighbors]}
        rec.update({k: None if getattr(b, k) is None else float(getattr(b, k)) for k in _SCALARS})
        records.append(rec)
    return save_archive(path, KIND_BUNDLES, tensors, {"bundles": records})


def load_bundles(path) -> list[EmbeddingBundle]:
    _, meta, t = load_archive(path, expect_kind=KIND_BUNDLES)
    out = []
    try:
        for i, rec in enumerate(meta["bundles"]):
            pre = f"{i:06d}/"
            nbs = [Neighbor(t[f"{pre}nb{s:04d}/X_c"], t[f"{pre}nb{s:04d}/X_t"], sim, lab)
                   for s, (sim, lab) in enumerate(zip(rec["similarity"], rec["label"]))]
            out.append(EmbeddingBundle(
                id=rec["id"], X_c=t[pre + "X_c"], X_t=t[pre + "X_t"], neighbors=nbs,
                sas_users=t.get(pre + "sas_users"), sas_item=t.get(pre + "sas_item"),
                **{k: rec.get(k) for k in _SCALARS},
            ))
    except KeyError as exc:
        raise ArchiveError(f"{path}: bundle archive is missing {exc}") from None
    return out


def save_fusion(path, head: FusionHead, meta: Mapping | None = None) -> str:
    full = {"d": head.d, "alpha": head.alpha, "mode": head.mode, "norm": head.norm}
    full.update(meta or {})
    return save_archive(path, KIND_FUSION, head.params, full)


def load_fusion(path) -> tuple[FusionHead, dict]:
    _, meta, t = load_archive(path, expect_kind=KIND_FUSION)
    head = FusionHead(meta["d"], meta["alpha"], meta["mode"], dict(t), dict(meta["norm"]))
    head.validate()
    return head, meta
