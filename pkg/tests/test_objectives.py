import numpy as np
import pytest

from app.autodiff.tensor import ComputationGraph, Tensor
from app.errors import ConfigurationError, ShapeError
from app.models.losses import LossWeights
from app.nn.layers import LayerTrace
from app.services.check_service import check_loss_laws, objective_gradient_error
from app.training.objectives import (adapt_feature, combined_loss, cross_entropy, feat_loss_layer, feat_loss_total,
                                     feat_weight_multiplier, interpolation_matrix, kd_loss, mutual_loss)


def trace(seed: int, layers: int = 3, tokens: int = 4, d: int = 3, classes: int = 5) -> LayerTrace:
    gen = np.random.default_rng(seed)
    features = [Tensor(gen.normal(size=(2, tokens, d)), requires_grad=True) for _ in range(layers)]
    return LayerTrace(features, Tensor(gen.normal(size=(2, classes)), requires_grad=True))


def test_loss_law_oracle():
    result = check_loss_laws(seed=5)
    assert result.passed, result


def test_feature_loss_bounds():
    f = Tensor(np.ones((1, 4, 2)))
    assert feat_loss_layer(f, f)[0].item() == pytest.approx(0.0, abs=1e-12)
    assert feat_loss_layer(f, Tensor(-f.data))[0].item() == pytest.approx(4.0)


def test_zero_feature_is_counted_not_nan():
    loss, zero = feat_loss_layer(Tensor(np.zeros((1, 4, 2))), Tensor(np.ones((1, 4, 2))))
    assert np.isfinite(loss.item())
    assert zero == 1


def test_interpolation_matrix_keeps_end_points():
    m = interpolation_matrix(5, 3)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
    np.testing.assert_allclose(m[0], [1, 0, 0])
    np.testing.assert_allclose(m[-1], [0, 0, 1])
    np.testing.assert_allclose(m[2], [0, 1, 0])


def test_avg_pool_adapt():
    f = Tensor(np.arange(16, dtype=float).reshape(1, 16, 1))
    pooled = adapt_feature(f, 4, "avg-pool-2d").data[0, :, 0]
    np.testing.assert_allclose(pooled, [2.5, 4.5, 10.5, 12.5])
    with pytest.raises(ConfigurationError):
        adapt_feature(Tensor(np.ones((1, 9, 1))), 4, "avg-pool-2d")


def test_feature_width_mismatch():
    with pytest.raises(ShapeError):
        feat_loss_layer(Tensor(np.ones((1, 4, 2))), Tensor(np.ones((1, 4, 3))))


def test_dropping_a_layer_removes_exactly_its_term():
    agent, vit = trace(0), trace(1)
    full, per_layer, _ = feat_loss_total(agent, vit, LossWeights())
    partial, kept, _ = feat_loss_total(agent, vit, LossWeights(supervised_layers=[1, 3]))
    assert set(kept) == {1, 3}
    assert partial.item() == pytest.approx(full.item() - per_layer[2], abs=1e-12)


def test_supervised_layer_beyond_depth():
    with pytest.raises(ConfigurationError):
        feat_loss_total(trace(0), trace(1), LossWeights(supervised_layers=[4]))


def test_cross_entropy_of_uniform_logits():
    logits = Tensor(np.zeros((3, 4)))
    assert cross_entropy(logits, np.array([0, 1, 3])).item() == pytest.approx(np.log(4))
    with pytest.raises(ShapeError):
        cross_entropy(logits, np.array([0, 1, 4]))


def test_kd_with_identical_logits_is_plain_cross_entropy():
    logits = Tensor(np.random.default_rng(2).normal(size=(4, 5)))
    labels = np.array([0, 1, 2, 3])
    assert kd_loss(logits, logits, labels, 4.0).item() == pytest.approx(cross_entropy(logits, labels).item())


def test_mutual_loss_sends_gradient_only_through_students():
    lv = Tensor(np.random.default_rng(3).normal(size=(2, 5)), requires_grad=True)
    la = Tensor(np.random.default_rng(4).normal(size=(2, 5)), requires_grad=True)
    labels = np.array([1, 4])
    with ComputationGraph() as graph:
        loss = mutual_loss(lv, la, labels, 2.0)
    graph.backward(loss)
    expected = {}
    for student, teacher in ((lv, la), (la, lv)):
        student_leaf = Tensor(student.data.copy(), requires_grad=True)
        with ComputationGraph() as g:
            term = kd_loss(student_leaf, teacher.detach(), labels, 2.0)
        g.backward(term)
        expected[id(student)] = student_leaf.grad
    np.testing.assert_allclose(lv.grad, expected[id(lv)], atol=1e-12)
    np.testing.assert_allclose(la.grad, expected[id(la)], atol=1e-12)


def test_decay_endpoints():
    assert feat_weight_multiplier(0.0) == 1.0
    assert feat_weight_multiplier(1.0) == 0.0
    assert feat_weight_multiplier(0.5, "none") == 1.0
    with pytest.raises(ConfigurationError):
        feat_weight_multiplier(1.5)


def test_combined_loss_terms():
    vit, agent = trace(0), trace(1)
    labels = np.array([0, 2])
    weights = LossWeights(alpha=2.0, beta=3.0)
    loss, breakdown = combined_loss(vit, agent, labels, weights, progress=0.25)
    assert breakdown.effective_alpha == pytest.approx(1.5)
    assert loss.item() == pytest.approx(1.5 * breakdown.feat_total + 3.0 * breakdown.mutual)
    assert sorted(breakdown.feat_per_layer) == [1, 2, 3]


def test_both_terms_off_falls_back_to_cross_entropy():
    vit, agent = trace(0), trace(1)
    labels = np.array([0, 2])
    loss, breakdown = combined_loss(vit, agent, labels, LossWeights(alpha=0.0, beta=0.0), progress=0.0)
    assert loss.item() == pytest.approx(breakdown.ce_vit + breakdown.ce_agent)
    assert breakdown.feat_total == 0.0 and breakdown.mutual == 0.0


def test_single_network_uses_cross_entropy():
    vit = trace(0)
    loss, breakdown = combined_loss(vit, None, np.array([1, 1]), LossWeights(), progress=0.0)
    assert loss.item() == pytest.approx(breakdown.ce_vit)


@pytest.mark.parametrize("seed", range(10))
def test_combined_objective_gradients(seed):
    assert objective_gradient_error(seed) < 1e-7


@pytest.mark.parametrize("weights", [LossWeights(beta=0.0), LossWeights(alpha=0.0)], ids=["feat-only", "mutual-only"])
def test_objective_gradients_of_each_term(weights):
    assert objective_gradient_error(3, weights) < 1e-7


def test_frozen_peer_logits_match_live_targets():
    gen = np.random.default_rng(4)
    base_vit, base_agent = gen.normal(size=(3, 3)), gen.normal(size=(3, 3))
    labels = np.array([1, 0, 2])

    def run(peers):
        vit, agent = Tensor(base_vit.copy(), requires_grad=True), Tensor(base_agent.copy(), requires_grad=True)
        with ComputationGraph() as graph:
            loss = mutual_loss(vit, agent, labels, temperature=2.0, peer_logits=peers)
        graph.backward(loss)
        return loss.item(), vit.grad, agent.grad

    live, frozen = run(None), run((base_vit, base_agent))
    assert frozen[0] == pytest.approx(live[0], rel=1e-12)
    np.testing.assert_allclose(frozen[1], live[1], rtol=1e-12)
    np.testing.assert_allclose(frozen[2], live[2], rtol=1e-12)


def test_peer_logits_must_match_shapes():
    a = Tensor(np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        mutual_loss(a, a, np.array([0, 1]), 2.0, peer_logits=(np.zeros((2, 3)), np.zeros((2, 4))))
