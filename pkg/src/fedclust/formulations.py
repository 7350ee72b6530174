"""Per-sample cluster scores ``log L_k(x, y)``.

Two formulations are supported:

``Conditional``
    ``L_k = P_k(y | x)``.
``CorrelationRatio``
    ``L_k = P_k(x, y) / (P_k(x) P_k(y))``. With a shared extractor the
    input density does not depend on ``k``, so it cancels between numerator
    and denominator of the responsibility ratio, leaving
    ``log P_k(y | x) - log P_k(y)``. ``P_k(y)`` is estimated from the batch
    (see ``docs/formulations.md``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MARGINAL_FLOOR = 1e-12


@dataclass
class Conditional:
    name: str = field(default="conditional", init=False)

    def scores(self, log_proba: np.ndarray, y: np.ndarray) -> np.ndarray:
        """(N, K, C) log-probabilities -> (N, K) log-scores."""
        n = log_proba.shape[0]
        return log_proba[np.arange(n), :, y]

    def update(self, proba: np.ndarray) -> "Conditional":
        return self


@dataclass
class CorrelationRatio:
    """Carries one label marginal per cluster, shape (K, C)."""

    marginals: np.ndarray | None = None
    clamp_count: int = 0
    name: str = field(default="fedrc", init=False)

    def scores(self, log_proba: np.ndarray, y: np.ndarray) -> np.ndarray:
        n, K, C = log_proba.shape
        marg = self.marginals
        if marg is None:
            marg = np.full((K, C), 1.0 / C)
        if marg.shape != (K, C):
            raise ValueError(f"marginal shape {marg.shape} != {(K, C)}")
        low = marg < MARGINAL_FLOOR
        if low.any():
            self.clamp_count += int(low.sum())
            marg = np.maximum(marg, MARGINAL_FLOOR)
        return log_proba[np.arange(n), :, y] - np.log(marg[:, y]).T

    def update(self, proba: np.ndarray) -> "CorrelationRatio":
        return CorrelationRatio(update_marginal(proba), self.clamp_count)


FORMULATIONS = {"conditional": Conditional, "fedrc": CorrelationRatio}


def make_formulation(name: str):
    try:
        return FORMULATIONS[name]()
    except KeyError:
        raise ValueError(f"unknown formulation {name!r}; expected one of {sorted(FORMULATIONS)}") from None


def score(kind, proba, y: int) -> float:
    """Log-score of one probability vector (single cluster) for label ``y``."""
    proba = np.asarray(proba, dtype=float)
    log_p = np.log(proba)[None, None, :]
    if isinstance(kind, CorrelationRatio) and kind.marginals is not None:
        marg = np.atleast_2d(kind.marginals)
        kind = CorrelationRatio(marg, kind.clamp_count)
    return float(kind.scores(log_p, np.array([y]))[0, 0])


def update_marginal(proba: np.ndarray) -> np.ndarray:
    """Batch-mean prediction per cluster, floored and renormalised.

    ``proba`` is (N, K, C) or (N, C); the result drops the sample axis.
    """
    proba = np.asarray(proba, dtype=float)
    if proba.shape[0] == 0:
        raise ValueError("empty batch")
    m = np.maximum(proba.mean(axis=0), MARGINAL_FLOOR)
    return m / m.sum(axis=-1, keepdims=True)
