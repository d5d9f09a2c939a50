"""Fake-graph generation by inverting a trained teacher.

Node features and Bernoulli structure logits are optimized jointly so the
teacher assigns high probability to randomly drawn target labels, with
priors taken from the teacher's BN statistics and, for one-hot data, an
entropy penalty pushing soft features toward one-hot rows.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .data import DatasetMeta, Graph, degree_features
from .estimators import batch_structure_grads, estimate_feature_grad
from .gnn import GnnModel, GraphBatch, NumericError, backward, cross_entropy_per_graph, model_forward
from .structure import StructureParams, sample_structure

logger = logging.getLogger(__name__)

# dataset feature mode -> how generation parameterizes node features
FEATURE_PARAMETERIZATION = {
    "raw": "free",
    "one-hot-label": "one-hot",
    "degree-one-hot": "degree",
    "degree-scalar": "degree",
    "constant": "constant",
}


class ConfigError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class GenerationConfig:
    lambda_bn: float = 1.0
    lambda_entropy: float = 1.0
    lr_struct: float = 1.0
    lr_feat: float = 0.01
    iterations: int = 2500
    n_samples: int = 1
    node_range: tuple | None = None  # inclusive; None -> 0.75x..1.25x the dataset average
    graphs_per_batch: int = 32
    lr_decay_period: int = 1000
    lr_decay_factor: float = 10.0
    feature_optimizer: str = "sgd"  # or "adam"
    structure_optimizer: str = "sgd"
    coefficient: str = "per-graph"
    learn_structure: bool = True
    learn_diagonal: bool = True
    theta_init_prob: float = 0.5
    feature_init_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.node_range is not None:
            lo, hi = self.node_range
            if not 1 <= lo <= hi:
                raise ConfigError(f"empty node range {self.node_range}")
            self.node_range = (int(lo), int(hi))
        for name in ("feature_optimizer", "structure_optimizer"):
            if getattr(self, name) not in ("sgd", "adam"):
                raise ConfigError(f"unknown {name} {getattr(self, name)!r}")
        if self.lambda_bn < 0 or self.lambda_entropy < 0:
            raise ConfigError("regularizer weights must be >= 0")

    def learning_rates(self, iteration: int) -> tuple[float, float]:
        f = self.lr_decay_factor ** (iteration // self.lr_decay_period)
        return self.lr_struct / f, self.lr_feat / f

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class FakeGraphSet:
    graphs: list
    labels: list
    thetas: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    log: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.graphs) != len(self.labels):
            raise ValueError("one sampled label per graph required")

    def __len__(self):
        return len(self.graphs)

    def extras(self) -> list[dict]:
        rows = []
        for k, y in enumerate(self.labels):
            row = {"sampled_label": int(y)}
            if k < len(self.thetas) and self.thetas[k] is not None:
                row["theta_upper"] = self.thetas[k].theta_upper()
            rows.append(row)
        return rows


def bn_regularizer(trace, teacher: GnnModel) -> float:
    """Squared gap between batch and running BN statistics, summed over layers and channels."""
    total = 0.0
    for lt, bn in zip(trace.layers, teacher.bn_layers):
        total += float(np.sum((lt.batch_mean - bn.running_mean) ** 2)
                       + np.sum((lt.batch_var - bn.running_var) ** 2))
    return total


def bn_regularizer_stat_grads(trace, teacher: GnnModel, weight: float = 1.0) -> list:
    return [(2 * weight * (lt.batch_mean - bn.running_mean), 2 * weight * (lt.batch_var - bn.running_var))
            for lt, bn in zip(trace.layers, teacher.bn_layers)]


def onehot_entropy(omega: np.ndarray) -> float:
    """Mean row entropy (nats) of softmax(omega)."""
    logp = log_softmax(omega, axis=1)
    return float(np.mean(-np.sum(np.exp(logp) * logp, axis=1)))


def onehot_entropy_grad(omega: np.ndarray) -> np.ndarray:
    logp = log_softmax(omega, axis=1)
    p = np.exp(logp)
    ent = -np.sum(p * logp, axis=1, keepdims=True)
    return -p * (logp + ent) / omega.shape[0]


def node_range_for(meta: DatasetMeta, config: GenerationConfig) -> tuple[int, int]:
    if config.node_range is not None:
        return config.node_range
    lo = max(1, int(round(0.75 * meta.avg_node_count)))
    return lo, max(lo, int(round(1.25 * meta.avg_node_count)))


class GenerationObjective:
    """Cross-entropy of the teacher on target labels plus weighted priors.

    The teacher normalizes with its running statistics; the BN term compares
    the batch statistics of the fake graphs with those running statistics.
    """

    def __init__(self, teacher: GnnModel, feature_mode: str, max_degree: int = 0,
                 lambda_bn: float = 1.0, lambda_entropy: float = 1.0):
        if feature_mode not in FEATURE_PARAMETERIZATION:
            raise ConfigError(f"unknown feature mode {feature_mode!r}")
        self.teacher = teacher
        self.feature_mode = feature_mode
        self.param_mode = FEATURE_PARAMETERIZATION[feature_mode]
        self.max_degree = max_degree
        self.lambda_bn = lambda_bn
        self.lambda_entropy = lambda_entropy if self.param_mode == "one-hot" else 0.0
        self.last_terms: dict = {}
        if lambda_bn > 0 and not teacher.use_bn:
            raise ConfigError("BN regularizer needs a teacher with BN statistics")
        expected = {"degree": max_degree + 1 if feature_mode == "degree-one-hot" else 1, "constant": 1}
        if self.param_mode in expected and teacher.input_dim != expected[self.param_mode]:
            raise ConfigError(f"feature mode {feature_mode!r} gives width {expected[self.param_mode]}, "
                              f"teacher expects {teacher.input_dim}")

    @property
    def has_feature_params(self) -> bool:
        return self.param_mode in ("free", "one-hot")

    def effective_features(self, values, adjacencies) -> np.ndarray:
        if self.param_mode == "free":
            return values
        if self.param_mode == "one-hot":
            return softmax(values, axis=1)
        return np.concatenate([degree_features(a, self.feature_mode, self.max_degree)[0]
                               for a in adjacencies])

    def _forward(self, values, adjacencies, labels):
        batch = GraphBatch(self.effective_features(values, adjacencies), adjacencies)
        trace = model_forward(self.teacher, batch, "eval")
        ce = cross_entropy_per_graph(trace.logits, labels)
        bn = bn_regularizer(trace, self.teacher) if self.lambda_bn > 0 else 0.0
        ent = onehot_entropy(values) if self.lambda_entropy > 0 else 0.0
        self.last_terms = {
            "objective": float(ce.mean() + self.lambda_bn * bn + self.lambda_entropy * ent),
            "ce_term": float(ce.mean()), "bn_term": bn, "entropy_term": ent,
        }
        return trace, ce, bn, ent

    def terms(self, values, adjacencies, labels) -> dict:
        self._forward(values, adjacencies, labels)
        return dict(self.last_terms)

    def losses(self, values, adjacencies, labels) -> tuple[float, np.ndarray]:
        """Forward-only. per_graph[i] is graph i's share of the cross-entropy
        plus the structure-dependent BN term of the whole batch."""
        _, ce, bn, ent = self._forward(values, adjacencies, labels)
        shared = self.lambda_bn * bn
        total = float(ce.mean() + shared + self.lambda_entropy * ent)
        return total, ce / len(ce) + shared

    def value_and_grad(self, values, adjacencies, labels):
        trace, ce, bn, ent = self._forward(values, adjacencies, labels)
        total = float(ce.mean() + self.lambda_bn * bn + self.lambda_entropy * ent)
        if not self.has_feature_params:
            return total, None
        p = np.exp(log_softmax(trace.logits, axis=1))
        p[np.arange(len(ce)), labels] -= 1.0
        stat_grads = bn_regularizer_stat_grads(trace, self.teacher, self.lambda_bn) if self.lambda_bn > 0 else None
        _, dx = backward(self.teacher, trace, p / len(ce), stat_grads)
        if self.param_mode == "free":
            return total, dx
        s = trace.batch.features
        grad = s * (dx - np.sum(dx * s, axis=1, keepdims=True))
        if self.lambda_entropy > 0:
            grad = grad + self.lambda_entropy * onehot_entropy_grad(values)
        return total, grad


def build_objective(teacher: GnnModel, config: GenerationConfig, feature_mode: str,
                    max_degree: int = 0) -> GenerationObjective:
    return GenerationObjective(teacher, feature_mode, max_degree, config.lambda_bn, config.lambda_entropy)


def balanced_labels(start: int, count: int, num_classes: int) -> np.ndarray:
    return (start + np.arange(count)) % num_classes


def _materialize_features(obj: GenerationObjective, values, adjs) -> list:
    counts = [a.shape[0] for a in adjs]
    if obj.has_feature_params:
        if obj.param_mode == "one-hot":
            hard = np.zeros_like(values)
            hard[np.arange(len(values)), values.argmax(axis=1)] = 1.0
            values = hard
        return np.split(values, np.cumsum(counts)[:-1])
    return [degree_features(a, obj.feature_mode, obj.max_degree)[0] for a in adjs]


class _Adam:
    """Bias-corrected Adam direction for one parameter array."""

    def __init__(self):
        self.t = 0
        self.m = self.v = None

    def direction(self, g):
        if self.m is None:
            self.m, self.v = np.zeros_like(g), np.zeros_like(g)
        self.t += 1
        self.m = 0.9 * self.m + 0.1 * g
        self.v = 0.999 * self.v + 0.001 * g * g
        return (self.m / (1 - 0.9 ** self.t)) / (np.sqrt(self.v / (1 - 0.999 ** self.t)) + 1e-8)


def _step(opt: _Adam, g: np.ndarray, use_adam: bool) -> np.ndarray:
    return opt.direction(g) if use_adam else g


def run_generation(teacher: GnnModel, config: GenerationConfig, meta: DatasetMeta, num_graphs: int,
                   rng: np.random.Generator | None = None) -> FakeGraphSet:
    """Generate ``num_graphs`` fake graphs in batches of ``config.graphs_per_batch``.

    With ``config.learn_structure=False`` one random structure per graph is
    drawn at initialization and kept fixed (the DeepInvG baseline).
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    obj = build_objective(teacher, config, meta.feature_mode, meta.max_degree)
    lo, hi = node_range_for(meta, config)
    adam_h = config.feature_optimizer == "adam"
    adam_t = config.structure_optimizer == "adam"
    graphs, labels, thetas, log = [], [], [], []
    batch_id = 0
    while len(graphs) < num_graphs:
        b = min(config.graphs_per_batch, num_graphs - len(graphs))
        y = balanced_labels(len(graphs), b, meta.num_classes)
        sizes = rng.integers(lo, hi + 1, size=b)
        params = [StructureParams.init(int(n), meta.directed, config.theta_init_prob, config.learn_diagonal)
                  for n in sizes]
        values = None
        if obj.has_feature_params:
            values = rng.normal(0.0, config.feature_init_std, (int(sizes.sum()), teacher.input_dim))
        fixed = None if config.learn_structure else [sample_structure(p, rng) for p in params]
        opt_h, opt_t = _Adam(), [_Adam() for _ in params]

        for it in range(config.iterations):
            lr_s, lr_f = config.learning_rates(it)
            g_h = g_t = None
            if obj.has_feature_params:
                if fixed is None:
                    g_h = estimate_feature_grad(obj, values, params, y, config.n_samples, rng)
                else:
                    _, g_h = obj.value_and_grad(values, fixed, y)
                if not np.all(np.isfinite(g_h)):
                    raise GenerationError(f"batch {batch_id}, iteration {it}: non-finite feature gradient")
            if fixed is None:
                g_t = batch_structure_grads(obj, values, params, y, rng, config.coefficient)
            elif not obj.has_feature_params:
                obj.losses(values, fixed, y)
            terms = obj.last_terms
            if not np.isfinite(terms["objective"]):
                raise GenerationError(f"batch {batch_id}, iteration {it}: non-finite objective {terms}")
            log.append({"batch": batch_id, "iteration": it, **terms})
            if g_h is not None:
                values = values - lr_f * _step(opt_h, g_h, adam_h)
            if g_t is not None:
                for p, g, o in zip(params, g_t, opt_t):
                    p.update(_step(o, g, adam_t), lr_s)

        adjs = fixed if fixed is not None else [sample_structure(p, rng) for p in params]
        for f, a, lab, p in zip(_materialize_features(obj, values, adjs), adjs, y, params):
            graphs.append(Graph(features=f, adjacency=a, label=int(lab), directed=meta.directed))
            labels.append(int(lab))
            thetas.append(p if fixed is None else None)
        logger.info("batch %d done: first objective %.4f, last %.4f", batch_id,
                    log[-config.iterations]["objective"], log[-1]["objective"])
        batch_id += 1
    provenance = {"config_digest": config.digest(), "method": "gfkd" if config.learn_structure else "deepinvg"}
    return FakeGraphSet(graphs, labels, thetas, provenance, log)


def randg_baseline(meta: DatasetMeta, count: int, node_range: tuple[int, int],
                   rng: np.random.Generator, learn_diagonal: bool = True) -> FakeGraphSet:
    """Uniformly random fake graphs: Bernoulli(0.5) edges, random node features."""
    lo, hi = node_range
    graphs, labels = [], []
    y = balanced_labels(0, count, meta.num_classes)
    for k in range(count):
        n = int(rng.integers(lo, hi + 1))
        a = sample_structure(StructureParams.init(n, meta.directed, 0.5, learn_diagonal), rng)
        mode = FEATURE_PARAMETERIZATION[meta.feature_mode]
        if mode == "free":
            f = rng.random((n, meta.feature_dim))
        elif mode == "one-hot":
            f = np.zeros((n, meta.feature_dim))
            f[np.arange(n), rng.integers(0, meta.feature_dim, size=n)] = 1.0
        else:
            f = degree_features(a, meta.feature_mode, meta.max_degree)[0]
        graphs.append(Graph(features=f, adjacency=a, label=int(y[k]), directed=meta.directed))
        labels.append(int(y[k]))
    return FakeGraphSet(graphs, labels, [None] * count, {"method": "randg"}, [])
