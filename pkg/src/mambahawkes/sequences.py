"""Event sequences, synthetic generators, JSONL storage and dataset splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


class SequenceFormatError(ValueError):
    """Raised when a sequence record or file violates the data contract."""


@dataclass(frozen=True)
class EventSequence:
    """An ordered list of typed events ``(t_i, r_i)``.

    Times are strictly increasing float64 values and types are integers in
    ``[0, num_types)``. Instances are immutable so they can be shared across
    workers freely.
    """

    id: str
    times: np.ndarray
    types: np.ndarray
    num_types: int

    def __post_init__(self):
        times = np.array(self.times, dtype=np.float64).reshape(-1)
        types = np.array(self.types, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "types", types)
        validate_events(times, types, self.num_types)
        times.flags.writeable = False
        types.flags.writeable = False

    def __len__(self) -> int:
        return int(self.times.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventSequence):
            return NotImplemented
        return (
            self.id == other.id
            and self.num_types == other.num_types
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.types, other.types)
        )

    __hash__ = None

    @property
    def events(self) -> list[tuple[float, int]]:
        return [(float(t), int(r)) for t, r in zip(self.times, self.types)]

    def deltas(self, first: str = "t1") -> np.ndarray:
        """Inter-event gaps; ``first='t1'`` uses ``t_1`` for the first gap, ``'zero'`` uses 0."""
        d = np.diff(self.times, prepend=0.0)
        if first == "zero":
            d[0] = 0.0
        elif first != "t1":
            raise ValueError(f"unknown first-delta convention {first!r}")
        return d


def validate_events(times: np.ndarray, types: np.ndarray, num_types: int) -> None:
    if num_types < 1:
        raise SequenceFormatError("num_types must be a positive integer")
    if times.shape != types.shape:
        raise SequenceFormatError("times and types must have the same length")
    if times.size < 1:
        raise SequenceFormatError("a sequence needs at least one event")
    if not np.all(np.isfinite(times)):
        raise SequenceFormatError("times must be finite")
    if times[0] < 0:
        raise SequenceFormatError("times must be nonnegative")
    if np.any(np.diff(times) <= 0):
        raise SequenceFormatError("times not strictly increasing")
    if np.any(types < 0) or np.any(types >= num_types):
        raise SequenceFormatError(f"event type out of range [0, {num_types})")


@dataclass(frozen=True)
class HawkesGroundTruth:
    """Parameters of an exponential-kernel Hawkes process.

    ``alpha[q, r]`` is the jump that an event of type ``q`` adds to the
    intensity of type ``r``; it decays at rate ``beta[q, r]``.
    """

    mu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.array(self.mu, dtype=np.float64))
        R = mu.shape[0]
        alpha = np.array(self.alpha, dtype=np.float64).reshape(R, R)
        beta = np.array(self.beta, dtype=np.float64).reshape(R, R)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        if np.any(mu <= 0):
            raise ValueError("mu must be positive")
        if np.any(alpha < 0):
            raise ValueError("alpha must be nonnegative")
        if np.any(beta <= 0):
            raise ValueError("beta must be positive")
        if self.spectral_radius >= 1.0:
            raise ValueError(
                f"non-stationary ground truth: spectral radius {self.spectral_radius:.4g} >= 1"
            )

    @property
    def num_types(self) -> int:
        return int(self.mu.shape[0])

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.alpha / self.beta))))

    def stationary_rate(self) -> np.ndarray:
        """Long-run per-type event rates ``(I - G^T)^{-1} mu``."""
        G = self.alpha / self.beta
        return np.linalg.solve(np.eye(self.num_types) - G.T, self.mu)

    def compensator_increments(self, times: np.ndarray, types: np.ndarray) -> np.ndarray:
        """Integrated total intensity between consecutive events (first from 0)."""
        R = self.num_types
        out = np.empty(times.shape[0])
        state = np.zeros((R, R))  # sum of e^{-beta (t - t_i)} per (source, target)
        prev = 0.0
        total_mu = self.mu.sum()
        for i, (t, r) in enumerate(zip(times, types)):
            dt = t - prev
            decay = np.exp(-self.beta * dt)
            out[i] = total_mu * dt + np.sum(self.alpha / self.beta * state * (1.0 - decay))
            state = state * decay
            state[r, :] += 1.0
            prev = t
        return out


@dataclass
class SequenceDataset:
    """A collection of sequences sharing ``num_types`` with an optional split label per sequence."""

    sequences: list[EventSequence]
    split: list[str] | None = None
    num_types: int | None = field(default=None)

    def __post_init__(self):
        self.sequences = list(self.sequences)
        types = {s.num_types for s in self.sequences}
        if len(types) > 1:
            raise SequenceFormatError(f"sequences disagree on num_types: {sorted(types)}")
        if self.num_types is None:
            self.num_types = types.pop() if types else None
        elif types and types != {self.num_types}:
            raise SequenceFormatError("dataset num_types does not match its sequences")
        if self.split is not None:
            if len(self.split) != len(self.sequences):
                raise ValueError("split labels must match the number of sequences")
            bad = set(self.split) - set(SPLITS)
            if bad:
                raise ValueError(f"unknown split labels {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    def subset(self, name: str) -> "SequenceDataset":
        if self.split is None:
            raise ValueError("dataset has no split assignment")
        return SequenceDataset(
            [s for s, lab in zip(self.sequences, self.split) if lab == name],
            num_types=self.num_types,
        )

    @property
    def num_events(self) -> int:
        return sum(len(s) for s in self.sequences)


# -- generators --------------------------------------------------------------
def sample_poisson(rate: float, horizon: float, num_types: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Homogeneous Poisson realization on ``[0, horizon]`` as ``(times, types)`` arrays (may be empty)."""
    if not rate > 0:
        raise ValueError("rate must be positive")
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    if num_types < 1:
        raise ValueError("num_types must be positive")
    rng = np.random.default_rng(seed)
    n = rng.poisson(rate * horizon)
    times = np.sort(rng.uniform(0.0, horizon, size=n))
    types = rng.integers(0, num_types, size=n)
    return times, types


def simulate_poisson(rate: float, horizon: float, num_types: int = 1, seed=0, id: str = "poisson") -> EventSequence:
    """Homogeneous Poisson process of total ``rate`` with uniformly drawn types.

    Raises ``ValueError`` if the realization is empty, since a sequence needs
    at least one event.
    """
    times, types = sample_poisson(rate, horizon, num_types, seed)
    if times.size == 0:
        raise ValueError("empty realization: no events in the horizon")
    return EventSequence(id, times, types, num_types)


def sample_hawkes(
    truth: HawkesGroundTruth, horizon: float, seed, max_events: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Ogata thinning for the exponential Hawkes process, returning ``(times, types)``.

    The proposal rate is the total intensity at the current time, taken
    just after the most recent candidate (including the jump when it was
    accepted). Kernels only decay between events, so it bounds the
    intensity until the next acceptance.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    rng = np.random.default_rng(seed)
    mu, alpha, beta = truth.mu, truth.alpha, truth.beta
    R = truth.num_types
    state = np.zeros((R, R))  # per (source, target): sum of decayed unit kernels
    t = 0.0
    times: list[float] = []
    types: list[int] = []
    lam_bar = float(mu.sum())
    while True:
        t_new = t + rng.exponential(1.0 / lam_bar)
        if t_new > horizon:
            break
        state = state * np.exp(-beta * (t_new - t))
        t = t_new
        lam_r = mu + np.sum(alpha * state, axis=0)
        lam = float(lam_r.sum())
        if rng.uniform() * lam_bar <= lam:
            r = int(rng.choice(R, p=lam_r / lam)) if R > 1 else 0
            times.append(t)
            types.append(r)
            state[r, :] += 1.0
            lam_r = mu + np.sum(alpha * state, axis=0)
            lam = float(lam_r.sum())
            if max_events is not None and len(times) >= max_events:
                break
        lam_bar = lam
    return np.asarray(times, dtype=np.float64), np.asarray(types, dtype=np.int64)


def simulate_hawkes_thinning(
    truth: HawkesGroundTruth,
    horizon: float,
    seed=0,
    id: str = "hawkes",
    max_events: int | None = None,
) -> EventSequence:
    """Exponential Hawkes realization on ``[0, horizon]`` by Ogata thinning."""
    times, types = sample_hawkes(truth, horizon, seed, max_events=max_events)
    if times.size == 0:
        raise ValueError("empty realization: no events in the horizon")
    return EventSequence(id, times, types, truth.num_types)


def simulate_dataset(kind: str, count: int, seed: int, **kw) -> SequenceDataset:
    """Draw ``count`` sequences with per-sequence seeds spawned from ``seed``.

    Empty realizations are redrawn with the next child seed so the dataset
    always holds ``count`` sequences.
    """
    children = np.random.SeedSequence(seed)
    seqs: list[EventSequence] = []
    width = len(str(max(count - 1, 0)))
    while len(seqs) < count:
        child = children.spawn(1)[0]
        if kind == "poisson":
            times, types = sample_poisson(kw["rate"], kw["horizon"], kw.get("num_types", 1), child)
            R = kw.get("num_types", 1)
        elif kind == "hawkes":
            truth = kw["truth"]
            times, types = sample_hawkes(truth, kw["horizon"], child, max_events=kw.get("max_events"))
            R = truth.num_types
        else:
            raise ValueError(f"unknown generator {kind!r}")
        if times.size == 0:
            continue
        seqs.append(EventSequence(f"{kind}-{len(seqs):0{width}d}", times, types, R))
    return SequenceDataset(seqs)


# -- transforms ----------------------------------------------------------------
def truncate_prefix(seq: EventSequence, k: int) -> EventSequence:
    """Keep the first ``min(k, n)`` events."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= len(seq):
        return seq
    return EventSequence(seq.id, seq.times[:k], seq.types[:k], seq.num_types)


def truncate_dataset(dataset: SequenceDataset, k: int | None) -> SequenceDataset:
    if k is None:
        return dataset
    return SequenceDataset(
        [truncate_prefix(s, k) for s in dataset.sequences],
        split=dataset.split,
        num_types=dataset.num_types,
    )


def split_dataset(
    dataset: SequenceDataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0
) -> SequenceDataset:
    """Assign train/val/test labels by a seeded permutation."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or not math.isclose(fr.sum(), 1.0):
        raise ValueError("fractions must be three nonnegative numbers summing to 1")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fr[0] * n))
    n_val = int(round(fr[1] * n))
    labels = np.empty(n, dtype=object)
    labels[perm[:n_train]] = "train"
    labels[perm[n_train : n_train + n_val]] = "val"
    labels[perm[n_train + n_val :]] = "test"
    return SequenceDataset(dataset.sequences, split=list(labels), num_types=dataset.num_types)


# -- JSONL ---------------------------------------------------------------------
def _format_record(seq: EventSequence, split: str | None) -> str:
    events = ",".join(f"[{t:.17g},{int(r)}]" for t, r in zip(seq.times, seq.types))
    head = {"format_version": FORMAT_VERSION, "id": seq.id, "num_types": seq.num_types}
    if split is not None:
        head["split"] = split
    body = json.dumps(head)[:-1]
    return f'{body}, "events": [{events}]}}'


def save_jsonl(dataset: SequenceDataset | Iterable[EventSequence], path) -> None:
    if not isinstance(dataset, SequenceDataset):
        dataset = SequenceDataset(list(dataset))
    splits = dataset.split or [None] * len(dataset)
    with open(path, "w", encoding="utf-8") as fh:
        for seq, lab in zip(dataset.sequences, splits):
            fh.write(_format_record(seq, lab) + "\n")


def parse_record(line: str, lineno: int = 1) -> tuple[EventSequence, str | None]:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SequenceFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise SequenceFormatError(f"line {lineno}: record must be a JSON object")
    missing = [k for k in ("id", "num_types", "events") if k not in rec]
    if missing:
        raise SequenceFormatError(f"line {lineno}: missing field(s) {', '.join(missing)}")
    version = rec.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise SequenceFormatError(f"line {lineno}: unsupported format_version {version}")
    R = rec["num_types"]
    if not isinstance(R, int) or isinstance(R, bool):
        raise SequenceFormatError(f"line {lineno}: num_types must be an integer")
    events = rec["events"]
    if not isinstance(events, list) or not all(
        isinstance(e, list) and len(e) == 2 for e in events
    ):
        raise SequenceFormatError(f"line {lineno}: events must be a list of [t, r] pairs")
    try:
        times = np.array([float(e[0]) for e in events], dtype=np.float64)
        types_raw = [e[1] for e in events]
        if not all(isinstance(r, int) and not isinstance(r, bool) for r in types_raw):
            raise TypeError
        types = np.array(types_raw, dtype=np.int64)
    except (TypeError, ValueError):
        raise SequenceFormatError(f"line {lineno}: malformed event entries") from None
    try:
        seq = EventSequence(str(rec["id"]), times, types, R)
    except SequenceFormatError as exc:
        raise SequenceFormatError(f"line {lineno}: {exc}") from None
    return seq, rec.get("split")


def load_jsonl(path) -> SequenceDataset:
    seqs: list[EventSequence] = []
    splits: list[str | None] = []
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            seq, lab = parse_record(line, lineno)
            seqs.append(seq)
            splits.append(lab)
    have = [s is not None for s in splits]
    split = splits if seqs and all(have) else None
    if any(have) and not all(have):
        raise SequenceFormatError("split labels must be present on all records or none")
    try:
        return SequenceDataset(seqs, split=split)
    except (SequenceFormatError, ValueError) as exc:
        raise SequenceFormatError(f"{path}: {exc}") from None
