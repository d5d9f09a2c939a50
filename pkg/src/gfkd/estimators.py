"""Gradient estimators for the expected generation objective.

Objects passed as ``obj`` follow a small protocol:

* ``obj.losses(features, adjacencies, labels) -> (total, per_graph)`` runs
  forward passes only;
* ``obj.value_and_grad(features, adjacencies, labels) -> (total, grad)``
  also returns the gradient on the feature parameters (``None`` when the
  objective has none).

Both must be deterministic for fixed inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gnn import NumericError
from .structure import StructureParams, antithetic_pair, sample_structure


@dataclass
class GradEstimate:
    theta_grad: list
    feature_grad: np.ndarray | None
    n_samples: int


def _grad_mask(params: StructureParams) -> np.ndarray:
    m = params.free_mask()
    return m | m.T


def estimate_feature_grad(obj, features, params: Sequence[StructureParams], labels,
                          n_samples: int = 1, rng: np.random.Generator | None = None):
    """Average of exact feature gradients over iid structure draws."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    acc = None
    for s in range(n_samples):
        adjs = [sample_structure(p, rng) for p in params]
        total, grad = obj.value_and_grad(features, adjs, labels)
        if not np.isfinite(total):
            raise NumericError(f"non-finite objective on structure sample {s}")
        if grad is None:
            return None
        acc = grad if acc is None else acc + grad
    return acc / n_samples


def _costs_by_structure(obj, features, stack: np.ndarray, label) -> np.ndarray:
    """Per-graph loss for every adjacency in ``stack`` (one single-graph batch each).

    Identical structures are evaluated once: the objective is deterministic,
    so this is exact, and tiny instances only have a handful of distinct
    adjacencies across many draws.
    """
    flat = stack.reshape(len(stack), -1)
    uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
    n = stack.shape[-1]
    vals = np.empty(len(uniq))
    for k, row in enumerate(uniq):
        _, per = obj.losses(features, [row.reshape(n, n)], [label])
        vals[k] = per[0]
        if not np.isfinite(vals[k]):
            raise NumericError(f"non-finite objective for structure {row.tolist()}")
    return vals[inverse.reshape(-1)]


def structure_grad_samples(obj, features, params: StructureParams, label,
                           rng: np.random.Generator, n_draws: int) -> np.ndarray:
    """``n_draws`` independent single-pair estimates, stacked as (n_draws, n, n)."""
    pair = antithetic_pair(params, rng, size=n_draws)
    c_plus = _costs_by_structure(obj, features, pair.a_plus, label)
    c_minus = _costs_by_structure(obj, features, pair.a_minus, label)
    return (c_plus - c_minus)[:, None, None] * (pair.u - 0.5) * _grad_mask(params)


def estimate_structure_grad(obj, features, params: StructureParams, label,
                            rng: np.random.Generator, n_samples: int = 1) -> np.ndarray:
    """Antithetic estimate of d E[loss] / d theta for one graph, forward passes only."""
    return structure_grad_samples(obj, features, params, label, rng, n_samples).mean(axis=0)


def batch_structure_grads(obj, features, params: Sequence[StructureParams], labels,
                          rng: np.random.Generator, coefficient: str = "per-graph") -> list:
    """One antithetic pair per graph, both branches evaluated as whole batches.

    With ``coefficient="per-graph"`` graph i's estimate is scaled by its own
    entry of the per-graph losses; ``"batch"`` uses the total loss for every
    graph. Both are unbiased.
    """
    if len(params) == 0:
        return []
    pairs = [antithetic_pair(p, rng) for p in params]
    total_p, per_p = obj.losses(features, [s.a_plus for s in pairs], labels)
    total_m, per_m = obj.losses(features, [s.a_minus for s in pairs], labels)
    if not (np.isfinite(total_p) and np.isfinite(total_m)):
        raise NumericError("non-finite objective in antithetic branch")
    if coefficient == "per-graph":
        coef = np.asarray(per_p) - np.asarray(per_m)
    elif coefficient == "batch":
        coef = np.full(len(params), total_p - total_m)
    else:
        raise ValueError(f"unknown coefficient mode {coefficient!r}")
    return [c * (s.u - 0.5) * _grad_mask(p) for c, s, p in zip(coef, pairs, params)]
