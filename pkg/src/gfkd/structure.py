"""Independent-Bernoulli distributions over adjacency matrices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

THETA_CLAMP = 30.0


def param_count(n: int, directed: bool) -> int:
    return n * n if directed else n * (n + 1) // 2


def edge_prob(theta, a):
    """Probability of observing edge value ``a`` under logit ``theta``."""
    a = np.asarray(a)
    return a * expit(theta) + (1 - a) * expit(-np.asarray(theta))


@dataclass
class StructureParams:
    """Logits for one graph's adjacency.

    ``theta`` is always stored as a full n x n matrix; when undirected it is
    kept symmetric and only the upper triangle is free. With
    ``learn_diagonal=False`` the diagonal is pinned to "no self-loop".
    """

    theta: np.ndarray
    directed: bool = False
    learn_diagonal: bool = True

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        n = self.theta.shape[0]
        if self.theta.shape != (n, n) or n < 1:
            raise ValueError(f"theta must be square, got {self.theta.shape}")
        if not self.directed:
            self.theta = np.triu(self.theta) + np.triu(self.theta, 1).T

    @classmethod
    def init(cls, n: int, directed: bool = False, p0: float = 0.5, learn_diagonal: bool = True):
        return cls(np.full((n, n), np.log(p0 / (1 - p0))), directed, learn_diagonal)

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    def free_mask(self) -> np.ndarray:
        """Boolean mask of the free entries in the stored matrix."""
        n = self.n
        mask = np.ones((n, n), bool) if self.directed else np.triu(np.ones((n, n), bool))
        if not self.learn_diagonal:
            mask &= ~np.eye(n, dtype=bool)
        return mask

    @property
    def num_free(self) -> int:
        return int(self.free_mask().sum())

    def probabilities(self) -> np.ndarray:
        p = expit(self.theta)
        if not self.learn_diagonal:
            np.fill_diagonal(p, 0.0)
        return p

    def materialize(self, upper: np.ndarray) -> np.ndarray:
        """Fill a full matrix (or stack of matrices) from values on free entries.

        Entries outside the free mask come out 0; undirected results are
        mirrored.
        """
        mask = self.free_mask()
        out = np.where(mask, upper, 0)
        if not self.directed:
            out = out + np.swapaxes(np.where(np.triu(mask, 1), upper, 0), -1, -2)
        return out

    def update(self, grad: np.ndarray, lr: float) -> None:
        """Gradient step on the free entries followed by clamping."""
        step = self.materialize(grad)
        self.theta = np.clip(self.theta - lr * step, -THETA_CLAMP, THETA_CLAMP)

    def log_prob(self, a: np.ndarray) -> float:
        mask = self.free_mask()
        t = self.theta[mask]
        x = np.asarray(a)[mask]
        return float(np.sum(np.where(x == 1, log_expit(t), log_expit(-t))))

    def theta_upper(self) -> list:
        """Row-major upper triangle (including the diagonal), for serialization."""
        return self.theta[np.triu_indices(self.n)].tolist()

    @classmethod
    def from_theta_upper(cls, values, n: int, learn_diagonal: bool = True) -> "StructureParams":
        t = np.zeros((n, n))
        t[np.triu_indices(n)] = values
        return cls(t, directed=False, learn_diagonal=learn_diagonal)


@dataclass
class AntitheticSample:
    u: np.ndarray
    a_plus: np.ndarray
    a_minus: np.ndarray


def _shape(params: StructureParams, size) -> tuple:
    lead = () if size == () or size is None else tuple(np.atleast_1d(size).tolist())
    return lead + (params.n, params.n)


def _mirror(params: StructureParams, u: np.ndarray) -> np.ndarray:
    if params.directed:
        return u
    upper = np.triu(u)
    return upper + np.swapaxes(np.triu(u, 1), -1, -2)


def _pin_diagonal(params: StructureParams, a: np.ndarray) -> np.ndarray:
    if not params.learn_diagonal:
        idx = np.arange(params.n)
        a[..., idx, idx] = 0
    return a


def sample_structure(params: StructureParams, rng: np.random.Generator, size=()) -> np.ndarray:
    """Draw adjacency matrices with P(a_ij = 1) = sigmoid(theta_ij)."""
    u = _mirror(params, rng.random(_shape(params, size)))
    return _pin_diagonal(params, (u < expit(params.theta)).astype(np.int8))


def antithetic_pair(params: StructureParams, rng: np.random.Generator, size=()) -> AntitheticSample:
    """Coupled draws ``a_plus = 1[u > sigmoid(-theta)]``, ``a_minus = 1[u < sigmoid(theta)]``.

    ``size`` prepends independent leading dimensions (one pair per index).
    """
    u = _mirror(params, rng.random(_shape(params, size)))
    a_plus = _pin_diagonal(params, (u > expit(-params.theta)).astype(np.int8))
    a_minus = _pin_diagonal(params, (u < expit(params.theta)).astype(np.int8))
    return AntitheticSample(u=u, a_plus=a_plus, a_minus=a_minus)
