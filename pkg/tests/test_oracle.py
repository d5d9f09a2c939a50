import numpy as np
import pytest

from gfkd.oracle import (CapacityError, default_instances, enumerate_structures, estimator_bias_test,
                         exact_expected_loss, exact_feature_grad, exact_structure_grad, finite_diff_feature_grad,
                         finite_diff_theta_grad, sign_flipped, total_probability)
from gfkd.structure import StructureParams


@pytest.fixture(scope="module")
def instances():
    return default_instances(10)


def test_instances_cover_required_shapes(instances):
    assert {i.params.n for i in instances} == {2, 3}
    assert {i.objective.feature_mode for i in instances} == {"raw", "one-hot-label"}
    assert all(not i.params.directed for i in instances)
    assert all(np.all(np.abs(i.params.theta) <= 2) for i in instances)


def test_probabilities_sum_to_one(instances):
    for inst in instances:
        assert total_probability(inst.params) == pytest.approx(1.0, abs=1e-12)


def test_capacity_limit():
    with pytest.raises(CapacityError):
        list(enumerate_structures(StructureParams.init(6)))


@pytest.mark.parametrize("k", [0, 3, 8])
def test_closed_form_matches_finite_differences(instances, k):
    inst = instances[k]
    exact = exact_structure_grad(inst.objective, inst.features, inst.params, inst.label)
    fd = finite_diff_theta_grad(inst.objective, inst.features, inst.params, inst.label)
    assert np.allclose(exact, fd, atol=1e-7)


def test_feature_grad_matches_finite_differences(instances):
    inst = instances[2]
    exact = exact_feature_grad(inst.objective, inst.features, inst.params, inst.label)
    fd = finite_diff_feature_grad(inst.objective, inst.features, inst.params, inst.label)
    assert np.allclose(exact, fd, atol=1e-6)


def test_expected_loss_is_probability_weighted(instances):
    inst = instances[0]
    val = exact_expected_loss(inst.objective, inst.features, inst.params, inst.label)
    losses = [inst.objective.losses(inst.features, [a], [inst.label])[0]
              for a, _, _ in enumerate_structures(inst.params)]
    assert min(losses) <= val <= max(losses)


def test_bias_test_passes_and_flags_fault(instances):
    inst = instances[1]
    ok = estimator_bias_test(inst.objective, inst.features, inst.params, inst.label, n_draws=20_000)
    assert ok.passed()
    bad = estimator_bias_test(inst.objective, inst.features, inst.params, inst.label, n_draws=20_000,
                              estimator=sign_flipped())
    assert not bad.passed()
    d = ok.to_dict()
    assert d["n_coordinates"] == 3 and len(d["exact_theta_grad"]) == 3


def test_bias_test_rejects_few_draws(instances):
    inst = instances[0]
    with pytest.raises(ValueError):
        estimator_bias_test(inst.objective, inst.features, inst.params, inst.label, n_draws=100)
