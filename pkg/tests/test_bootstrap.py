import numpy as np
import pytest

from app.autodiff import ops
from app.autodiff.rng import Rng
from app.autodiff.tensor import ComputationGraph, Tensor
from app.errors import GraphContractError, ShapeError
from app.models.losses import LossWeights
from app.models.run import OptimizerConfig
from app.nn.agent import build_agent
from app.nn.shared import ParameterPartition, SharedParameterStore, trainable_partition
from app.nn.vit import build_vit
from app.services.check_service import check_align, toy_reference, toy_trajectory
from app.training.bootstrap import (GradientPair, align, bootstrap_step, compute_gradient_pair,
                                    shared_effective_gradient)
from app.training.objectives import combined_loss
from app.training.optim import Optimizer


def test_align_hand_case():
    np.testing.assert_array_equal(align(np.array([-1.0, 1.0]), np.array([1.0, 0.0])), [0.0, 1.0])


def test_align_keeps_agreeing_gradients():
    g = np.array([1.0, 2.0])
    assert align(g, np.array([3.0, -1.0])) is g


def test_align_properties_over_random_pairs():
    result = check_align(seed=9, pairs=1000)
    assert result.passed, result


def test_align_shape_mismatch():
    with pytest.raises(ShapeError):
        align(np.ones(2), np.ones(3))


def test_shared_update_rules():
    g_v, g_a = np.array([0.2]), np.array([-0.1])
    np.testing.assert_allclose(shared_effective_gradient(g_v, g_a, "aligned"), [0.1])
    np.testing.assert_allclose(shared_effective_gradient(g_v, g_a, "mean"), [0.05])
    np.testing.assert_allclose(shared_effective_gradient(g_v, g_a, "vit-only"), [0.2])


def test_single_sgd_step_of_the_toy():
    s, pv, pa = toy_trajectory(1)[0]
    assert abs(s - 0.99) <= 1e-12
    assert abs(pv - (-0.82)) <= 1e-12
    assert abs(pa - (-1.09)) <= 1e-12


def test_five_step_toy_trajectory_matches_closed_form():
    np.testing.assert_allclose(toy_trajectory(5), toy_reference(5), rtol=0, atol=1e-12)


def test_gradient_pair_splits_shared_gradient_per_network():
    shared = np.array([2.0])
    s_v, s_a = Tensor(shared, requires_grad=True), Tensor(shared, requires_grad=True)
    partition = ParameterPartition({"s": {"vit": s_v, "agent": s_a}}, {}, {})
    with ComputationGraph() as graph:
        loss = ops.reduce_sum(ops.scale(s_v, 3.0) + ops.square(s_a))
    pair = compute_gradient_pair(partition, loss, graph)
    np.testing.assert_allclose(pair.shared_vit["s"], [3.0])
    np.testing.assert_allclose(pair.shared_agent["s"], [4.0])
    assert s_v.grad is None and s_a.grad is None


def test_incomplete_gradient_pair_is_rejected():
    p = Tensor(np.zeros(2), requires_grad=True)
    partition = ParameterPartition({}, {"w": p}, {})
    with pytest.raises(GraphContractError):
        bootstrap_step(GradientPair(), partition, Optimizer(OptimizerConfig()), 0.1)


def test_shared_step_moves_both_views_together(micro_arch):
    store = SharedParameterStore(micro_arch, Rng(0).split("shared"), np.float64)
    vit = build_vit(micro_arch, Rng(0).split("vit"), np.float64, store)
    agent = build_agent(micro_arch, Rng(0).split("agent"), np.float64, store)
    partition = trainable_partition(vit, agent, store)
    before = {k: v.copy() for k, v in store.arrays.items()}
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 8, 8)))
    labels = np.array([0, 2])
    with ComputationGraph() as graph:
        loss, _ = combined_loss(vit.forward_traced(x), agent.forward_traced(x), labels, LossWeights(), 0.0)
    pair = compute_gradient_pair(partition, loss, graph)
    stats = bootstrap_step(pair, partition, Optimizer(OptimizerConfig(lr=1e-2)), 1e-2)
    assert 0.0 <= stats["conflict_fraction"] <= 1.0
    name = "blocks.0.attn.w_v"
    assert not np.array_equal(store.arrays[name], before[name])
    assert np.shares_memory(store.view("vit", name).data, store.view("agent", name).data)
