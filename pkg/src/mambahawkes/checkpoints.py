"""Checkpoint read/write for the MHP, its noHP variant and the classical Hawkes model."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .archive import ArchiveError, load_archive, save_archive
from .backbone import MHPModel
from .hawkes import HawkesModel
from .intensity import IntensityHead
from .training import NextEventHead

KIND_MHP = "mhp"
KIND_NOHP = "mhp-noHP"
KIND_HAWKES = "hawkes"


def save_mhp(path, model: MHPModel, head, meta: Mapping | None = None) -> str:
    kind = KIND_NOHP if isinstance(head, NextEventHead) else KIND_MHP
    tensors = {f"model/{k}": v for k, v in model.params.items()}
    tensors.update({f"head/{k}": v for k, v in head.params.items()})
    full_meta = {"model": model.config(), "head": {"num_types": head.num_types, "d_out": head.d_out}}
    full_meta.update(meta or {})
    return save_archive(path, kind, tensors, full_meta)


def load_mhp(path):
    """Return ``(model, head, meta)``; the head type follows the archive kind."""
    kind, meta, tensors = load_archive(path, expect_kind=(KIND_MHP, KIND_NOHP))
    model = MHPModel(**meta["model"])
    model.params = {k[6:]: v for k, v in tensors.items() if k.startswith("model/")}
    model.validate()
    head_cls = NextEventHead if kind == KIND_NOHP else IntensityHead
    head = head_cls(meta["head"]["num_types"], meta["head"]["d_out"])
    head.params = {k[5:]: v for k, v in tensors.items() if k.startswith("head/")}
    if isinstance(head, IntensityHead):
        head.validate()
    return model, head, meta


def save_hawkes(path, model: HawkesModel, meta: Mapping | None = None) -> str:
    return save_archive(path, KIND_HAWKES, {"mu": model.mu, "alpha": model.alpha, "beta": model.beta},
                        dict(meta or {}))


def load_hawkes(path) -> tuple[HawkesModel, dict]:
    _, meta, t = load_archive(path, expect_kind=KIND_HAWKES)
    try:
        return HawkesModel(t["mu"], t["alpha"], t["beta"]), meta
    except KeyError as exc:
        raise ArchiveError(f"{path}: missing Hawkes tensor {exc}") from None


def checkpoint_kind(path) -> str:
    kind, _, _ = load_archive(path)
    return kind


def params_equal(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    return set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)
