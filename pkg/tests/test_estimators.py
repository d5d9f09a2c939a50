import numpy as np
import pytest

from gfkd.estimators import (batch_structure_grads, estimate_feature_grad, estimate_structure_grad,
                             structure_grad_samples)
from gfkd.gnn import backward_call_count
from gfkd.oracle import default_instances, exact_structure_grad
from gfkd.structure import StructureParams, sample_structure


class EdgeCount:
    """Loss = sum of w * a over the upper triangle, plus a feature term."""

    def __init__(self, w):
        self.w = np.asarray(w)

    def losses(self, features, adjs, labels):
        per = np.array([float(np.sum(np.triu(a) * self.w[:len(a), :len(a)])) for a in adjs])
        return float(per.sum() + np.sum(features ** 2)), per

    def value_and_grad(self, features, adjs, labels):
        total, _ = self.losses(features, adjs, labels)
        return total, 2 * features


def test_linear_loss_exact_gradient():
    # d/dtheta E[w a] = w sigmoid'(theta)
    w = np.array([[1.0, -2.0], [0.0, 3.0]])
    p = StructureParams(np.array([[0.5, -0.3], [-0.3, 1.0]]))
    est = estimate_structure_grad(EdgeCount(w), np.zeros((2, 1)), p, 0, np.random.default_rng(0), 200_000)
    s = 1 / (1 + np.exp(-p.theta))
    want = w * s * (1 - s)
    want[1, 0] = want[0, 1]
    assert np.allclose(est, want, atol=0.01)


def test_unbiased_against_enumeration():
    inst = default_instances(3)[1]
    exact = exact_structure_grad(inst.objective, inst.features, inst.params, inst.label)
    draws = structure_grad_samples(inst.objective, inst.features, inst.params, inst.label,
                                   np.random.default_rng(1), 50_000)
    se = draws.std(axis=0) / np.sqrt(len(draws)) + 1e-12
    assert np.max(np.abs(draws.mean(axis=0) - exact) / se) < 4


def test_antithetic_variance_below_one_sided():
    """Pairing reduces variance relative to the single-branch estimator on the same u."""
    inst = default_instances(2)[1]
    obj, x, p, y = inst.objective, inst.features, inst.params, inst.label
    rng = np.random.default_rng(0)
    draws = structure_grad_samples(obj, x, p, y, rng, 20_000)
    rng = np.random.default_rng(0)
    mask = p.free_mask() | p.free_mask().T
    one_sided = []
    probs = 1 / (1 + np.exp(-p.theta))
    for _ in range(4000):
        u = rng.random((p.n, p.n))
        u = np.triu(u) + np.triu(u, 1).T
        a = (u < probs).astype(np.int8)
        _, per = obj.losses(x, [a], [y])
        one_sided.append(per[0] * (1 - 2 * u) * mask)
    one_sided = np.array(one_sided)
    free = p.free_mask()
    assert np.all(draws.var(axis=0)[free] <= one_sided.var(axis=0)[free])


def test_zero_when_theta_saturated():
    obj = EdgeCount(np.ones((3, 3)))
    p = StructureParams(np.full((3, 3), 30.0))
    g = estimate_structure_grad(obj, np.zeros((3, 1)), p, 0, np.random.default_rng(0), 100)
    assert np.all(g == 0)


def test_no_backward_during_structure_estimation():
    inst = default_instances(1)[0]
    before = backward_call_count()
    structure_grad_samples(inst.objective, inst.features, inst.params, inst.label, np.random.default_rng(0), 100)
    batch_structure_grads(inst.objective, inst.features, [inst.params], [inst.label], np.random.default_rng(0))
    assert backward_call_count() == before
    estimate_feature_grad(inst.objective, inst.features, [inst.params], [inst.label], 1, np.random.default_rng(0))
    assert backward_call_count() == before + 1


@pytest.mark.parametrize("coefficient", ["per-graph", "batch"])
def test_batch_grads_shapes_and_determinism(coefficient):
    obj = EdgeCount(np.ones((4, 4)))
    params = [StructureParams.init(3), StructureParams.init(4)]
    a = batch_structure_grads(obj, np.zeros((7, 1)), params, [0, 1], np.random.default_rng(3), coefficient)
    b = batch_structure_grads(obj, np.zeros((7, 1)), params, [0, 1], np.random.default_rng(3), coefficient)
    assert [g.shape for g in a] == [(3, 3), (4, 4)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        batch_structure_grads(obj, np.zeros((7, 1)), params, [0, 1], np.random.default_rng(3), "bogus")


def test_feature_grad_average():
    obj = EdgeCount(np.ones((2, 2)))
    x = np.ones((2, 1))
    g = estimate_feature_grad(obj, x, [StructureParams.init(2)], [0], 3, np.random.default_rng(0))
    assert np.allclose(g, 2 * x)
    with pytest.raises(ValueError):
        estimate_feature_grad(obj, x, [StructureParams.init(2)], [0], 0)
