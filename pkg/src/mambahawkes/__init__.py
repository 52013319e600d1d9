"""Mamba Hawkes Process toolkit: point-process likelihoods, simulators, fusion head and metrics."""

__version__ = "0.1.0"

from .estimators import (
    ExponentialHawkes,
    FusionRegressor,
    MambaHawkesProcess,
    NextEventMamba,
    PoissonBaseline,
)
from .metrics import MetricReport, mae, nmse, plcc, src
from .sequences import EventSequence, HawkesGroundTruth, SequenceDataset, load_jsonl, save_jsonl

__all__ = [
    "EventSequence",
    "ExponentialHawkes",
    "FusionRegressor",
    "HawkesGroundTruth",
    "MambaHawkesProcess",
    "MetricReport",
    "NextEventMamba",
    "PoissonBaseline",
    "SequenceDataset",
    "load_jsonl",
    "mae",
    "nmse",
    "plcc",
    "save_jsonl",
    "src",
]
