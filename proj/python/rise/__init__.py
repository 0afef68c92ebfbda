"""RISE: joint imputation and neural posterior estimation under missing data."""

from ._core import (
    Model,
    c2st,
    load_model,
    make_mask,
    median_heuristic,
    mmd,
    run_benchmark,
    simulate,
    train,
)

__all__ = [
    "Model",
    "c2st",
    "load_model",
    "make_mask",
    "median_heuristic",
    "mmd",
    "run_benchmark",
    "simulate",
    "train",
]
