"""Exact reference computations on tiny instances.

Everything here enumerates all 2^k assignments of the k free adjacency
entries, so the expectations involved carry no sampling noise.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from .estimators import structure_grad_samples
from .structure import StructureParams

MAX_FREE = 20


class CapacityError(ValueError):
    pass


@dataclass
class EnumerationReport:
    exact_expected_loss: float
    exact_theta_grad: np.ndarray
    mc_mean: np.ndarray
    mc_std_err: np.ndarray
    n_draws: int
    max_z_score: float
    n_coordinates: int

    def passed(self, threshold: float = 3.0) -> bool:
        return bool(self.max_z_score < threshold)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("exact_theta_grad", "mc_mean", "mc_std_err"):
            d[k] = np.asarray(d[k]).tolist()
        # 3-sigma per coordinate; family-wise false-alarm rate assuming independence
        d["bonferroni_false_alarm_bound"] = float(self.n_coordinates * 0.0027)
        return d


def enumerate_structures(params: StructureParams):
    """Yield (adjacency, probability) over every assignment of the free entries."""
    mask = params.free_mask()
    k = int(mask.sum())
    if k > MAX_FREE:
        raise CapacityError(f"{k} free entries exceeds the enumeration limit of {MAX_FREE}")
    rows, cols = np.nonzero(mask)
    p_on = expit(params.theta[rows, cols])
    for bits in itertools.product((0, 1), repeat=k):
        bits = np.array(bits, dtype=np.int8)
        a = np.zeros((params.n, params.n), dtype=np.int8)
        a[rows, cols] = bits
        if not params.directed:
            a[cols, rows] = bits
        yield a, float(np.prod(np.where(bits == 1, p_on, 1.0 - p_on))), bits


def total_probability(params: StructureParams) -> float:
    return sum(p for _, p, _ in enumerate_structures(params))


def _loss(obj, features, a, label) -> float:
    total, _ = obj.losses(features, [a], [label])
    return total


def exact_expected_loss(obj, features, params: StructureParams, label) -> float:
    return float(sum(p * _loss(obj, features, a, label) for a, p, _ in enumerate_structures(params)))


def exact_structure_grad(obj, features, params: StructureParams, label) -> np.ndarray:
    """Closed-form derivative of the enumerated expectation in every free logit.

    Uses dP(a)/dtheta_e = P(a) (a_e - sigmoid(theta_e)). The result is
    materialized (mirrored when undirected).
    """
    mask = params.free_mask()
    rows, cols = np.nonzero(mask)
    p_on = expit(params.theta[rows, cols])
    g = np.zeros(len(rows))
    for a, p, bits in enumerate_structures(params):
        g += p * (bits - p_on) * _loss(obj, features, a, label)
    out = np.zeros((params.n, params.n))
    out[rows, cols] = g
    if not params.directed:
        out[cols, rows] = g
    return out


def exact_feature_grad(obj, features, params: StructureParams, label) -> np.ndarray:
    """Probability-weighted sum of per-structure feature gradients."""
    acc = np.zeros_like(features)
    for a, p, _ in enumerate_structures(params):
        _, g = obj.value_and_grad(features, [a], [label])
        acc += p * g
    return acc


def finite_diff_theta_grad(obj, features, params: StructureParams, label, step: float = 1e-6) -> np.ndarray:
    rows, cols = np.nonzero(params.free_mask())
    out = np.zeros((params.n, params.n))
    for i, j in zip(rows, cols):
        vals = []
        for sgn in (1, -1):
            t = params.theta.copy()
            t[i, j] += sgn * step
            if not params.directed:
                t[j, i] = t[i, j]
            vals.append(exact_expected_loss(obj, features, StructureParams(t, params.directed, params.learn_diagonal), label))
        out[i, j] = (vals[0] - vals[1]) / (2 * step)
        if not params.directed:
            out[j, i] = out[i, j]
    return out


def finite_diff_feature_grad(obj, features, params: StructureParams, label, step: float = 1e-5) -> np.ndarray:
    """Central differences of the exact expected loss in every feature entry."""
    if not step > 0:
        raise ValueError("step must be positive")
    features = np.asarray(features, dtype=np.float64)
    out = np.zeros_like(features)
    for idx in np.ndindex(*features.shape):
        up, dn = features.copy(), features.copy()
        up[idx] += step
        dn[idx] -= step
        out[idx] = (exact_expected_loss(obj, up, params, label) - exact_expected_loss(obj, dn, params, label)) / (2 * step)
    return out


def estimator_bias_test(obj, features, params: StructureParams, label, n_draws: int = 200_000,
                        seed: int = 0, estimator=structure_grad_samples) -> EnumerationReport:
    """z-scores of the Monte Carlo mean of single-pair estimates against the exact gradient.

    ``estimator`` must return per-draw estimates stacked along axis 0; it is
    a parameter so fault-injected variants can be checked.
    """
    if n_draws < 10_000:
        raise ValueError("n_draws must be >= 10^4")
    exact = exact_structure_grad(obj, features, params, label)
    draws = estimator(obj, features, params, label, np.random.default_rng(seed), n_draws)
    mean = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / np.sqrt(n_draws)
    rows, cols = np.nonzero(params.free_mask())
    z = np.zeros(len(rows))
    for k, (i, j) in enumerate(zip(rows, cols)):
        diff = mean[i, j] - exact[i, j]
        if se[i, j] > 0:
            z[k] = abs(diff) / se[i, j]
        else:
            z[k] = 0.0 if abs(diff) <= 1e-12 * max(1.0, abs(exact[i, j])) else np.inf
    return EnumerationReport(
        exact_expected_loss=exact_expected_loss(obj, features, params, label),
        exact_theta_grad=exact,
        mc_mean=mean,
        mc_std_err=se,
        n_draws=n_draws,
        max_z_score=float(z.max()) if len(z) else 0.0,
        n_coordinates=len(z),
    )


def report_json(reports: dict) -> str:
    return json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2)


@dataclass
class Instance:
    name: str
    objective: object
    features: np.ndarray
    params: StructureParams
    label: int


def tiny_teacher(input_dim: int, rng: np.random.Generator, hidden: int = 4, num_classes: int = 2):
    """A 2-layer GCN with randomized BN parameters and running statistics."""
    from .gnn import build_model

    m = build_model("GCN", 2, hidden, input_dim, num_classes, rng)
    for bn in m.bn_layers:
        bn.gamma[:] = rng.uniform(0.5, 1.5, hidden)
        bn.beta[:] = rng.normal(0, 0.5, hidden)
        bn.running_mean[:] = rng.normal(0, 0.5, hidden)
        bn.running_var[:] = rng.uniform(0.5, 2.0, hidden)
    m.classifier_weight *= 3.0
    return m


def default_instances(count: int = 10, seed: int = 1234) -> list[Instance]:
    """Undirected n in {2, 3}, theta ~ U[-2, 2], free and one-hot feature modes.

    Diagonals are off except for one n=2 variant with learnable self-loops.
    """
    from .generator import GenerationObjective

    out = []
    for k in range(count):
        rng = np.random.default_rng(seed + k)
        n = 2 + k % 2
        mode = "raw" if (k // 2) % 2 == 0 else "one-hot-label"
        diag = k == count - 2
        d = 3
        teacher = tiny_teacher(d, rng)
        obj = GenerationObjective(teacher, mode, lambda_bn=0.1, lambda_entropy=0.5)
        theta = rng.uniform(-2, 2, (n, n))
        params = StructureParams(theta, directed=False, learn_diagonal=diag)
        feats = rng.normal(0, 1, (n, d))
        out.append(Instance(f"n{n}-{mode}{'-diag' if diag else ''}-{k}", obj, feats, params, int(rng.integers(2))))
    return out


def gradient_check(seed: int = 0, arch: str = "GCN", mode: str = "train", step: float = 1e-5) -> float:
    """Max relative error between ``gnn.backward`` and central differences.

    The loss is cross-entropy plus a random linear functional of every
    layer's batch statistics, so the statistic path is checked too.
    Relative error is per array, ``|fd - an| / max(|fd|, |an|, 1e-3)``.
    """
    from .gnn import GraphBatch, backward, build_model, cross_entropy_grad, model_forward

    rng = np.random.default_rng(seed)
    hidden, layers = 5, 3
    model = build_model(arch, layers, hidden, 4, 3, rng)
    for bn in model.bn_layers:
        bn.gamma[:] = rng.uniform(0.5, 1.5, hidden)
        bn.beta[:] = rng.normal(0, 0.3, hidden)
        bn.running_mean[:] = rng.normal(0, 1, hidden)
        bn.running_var[:] = rng.uniform(0.5, 2.0, hidden)
    adjs = []
    for n in (3, 4, 2):
        a = np.triu((rng.random((n, n)) < 0.5).astype(np.int8), 1)
        adjs.append(a + a.T)
    x = rng.normal(size=(9, 4))
    labels = [0, 2, 1]
    coeffs = [(rng.normal(size=hidden), rng.normal(size=hidden)) for _ in range(layers)]

    def loss(xx):
        tr = model_forward(model.copy(), GraphBatch(xx, adjs), mode)
        ce, _ = cross_entropy_grad(tr.logits, labels)
        return ce + sum(float(cm @ lt.batch_mean + cv @ lt.batch_var) for (cm, cv), lt in zip(coeffs, tr.layers))

    trace = model_forward(model.copy(), GraphBatch(x, adjs), mode)
    _, dlogits = cross_entropy_grad(trace.logits, labels)
    grads, dx = backward(model, trace, dlogits, coeffs)

    def rel(fd, an):
        return float(np.linalg.norm(fd - an) / max(np.linalg.norm(fd), np.linalg.norm(an), 1e-3))

    worst = 0.0
    for name, p in model.parameters().items():
        fd = np.zeros_like(p)
        for idx in np.ndindex(*p.shape):
            old = p[idx]
            p[idx] = old + step
            up = loss(x)
            p[idx] = old - step
            dn = loss(x)
            p[idx] = old
            fd[idx] = (up - dn) / (2 * step)
        worst = max(worst, rel(fd, grads[name]))
    fd = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        up, dn = x.copy(), x.copy()
        up[idx] += step
        dn[idx] -= step
        fd[idx] = (loss(up) - loss(dn)) / (2 * step)
    return max(worst, rel(fd, dx))


def sign_flipped(estimator=structure_grad_samples):
    """Fault-injection hook: the same estimator with its sign reversed."""

    def flipped(*args, **kwargs):
        return -estimator(*args, **kwargs)

    return flipped


def run_verification(n_draws: int = 200_000, seed: int = 0, instances: int = 10,
                     estimator=structure_grad_samples, grad_tol: float = 1e-5,
                     z_threshold: float = 3.0) -> dict:
    """Full oracle suite. ``result["passed"]`` is the overall verdict."""
    bias = {}
    for inst in default_instances(instances):
        rep = estimator_bias_test(inst.objective, inst.features, inst.params, inst.label,
                                  n_draws=n_draws, seed=seed, estimator=estimator)
        bias[inst.name] = rep
    checks = {f"{arch}-{mode}": gradient_check(seed, arch, mode)
              for arch in ("GCN", "GIN") for mode in ("train", "eval")}
    result = {
        "bias_tests": {k: {**r.to_dict(), "passed": r.passed(z_threshold)} for k, r in bias.items()},
        "gradient_checks": {k: {"max_rel_error": v, "passed": v <= grad_tol} for k, v in checks.items()},
        "z_threshold": z_threshold,
        "grad_tol": grad_tol,
        "n_draws": n_draws,
    }
    result["passed"] = all(v["passed"] for v in result["bias_tests"].values()) and \
        all(v["passed"] for v in result["gradient_checks"].values())
    return result
