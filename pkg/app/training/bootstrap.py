"""Bootstrapped updates of a ViT/agent pair.

Private tensors follow their own network's gradient. Each shared tensor gets
g_eff = ½(∇_V + align(∇_A | ∇_V)), where align removes the part of the agent
gradient that conflicts with the ViT gradient.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from app.autodiff.tensor import ComputationGraph, Tensor
from app.errors import GraphContractError, ShapeError
from app.nn.shared import ParameterPartition
from app.training.optim import Optimizer

logger = logging.getLogger(__name__)


def align(g_src: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Project ``g_src`` off ``g_ref`` when the two conflict (negative dot product).

    Agreeing or orthogonal pairs return ``g_src`` itself; a zero reference
    returns ``g_src`` too.
    """
    if g_src.shape != g_ref.shape:
        raise ShapeError(f"align: gradient shapes {g_src.shape} and {g_ref.shape} differ")
    src = g_src.reshape(-1)
    ref = g_ref.reshape(-1)
    dot = float(np.dot(src, ref))
    if dot >= 0:
        return g_src
    ref_sq = float(np.dot(ref, ref))
    if ref_sq == 0.0:
        return g_src
    return g_src - (dot / ref_sq) * g_ref


@dataclass
class GradientPair:
    """∇_S^V, ∇_S^A per shared tensor and ∇_P^V, ∇_P^A per private tensor."""

    shared_vit: Dict[str, np.ndarray] = field(default_factory=dict)
    shared_agent: Dict[str, np.ndarray] = field(default_factory=dict)
    private_vit: Dict[str, np.ndarray] = field(default_factory=dict)
    private_agent: Dict[str, np.ndarray] = field(default_factory=dict)

    def check_complete(self, partition: ParameterPartition) -> None:
        for name, views in partition.shared.items():
            for network, grads in (("vit", self.shared_vit), ("agent", self.shared_agent)):
                if network in views and name not in grads:
                    raise GraphContractError(f"shared '{name}' is missing its {network} gradient")
        for network, grads in (("vit", self.private_vit), ("agent", self.private_agent)):
            missing = set(partition.private(network)) - set(grads)
            if missing:
                raise GraphContractError(f"{len(missing)} {network} tensors have no gradient, "
                                         f"first: {sorted(missing)[0]}")


def _collect(tensors: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in tensors.items()}


def _clear(partition: ParameterPartition) -> None:
    for network in ("vit", "agent"):
        for t in partition.leaves(network):
            t.grad = None


def compute_gradient_pair(partition: ParameterPartition, loss: Tensor, graph: ComputationGraph) -> GradientPair:
    """Two backward sweeps over one recorded objective.

    The first holds every agent leaf constant and yields the ViT halves; the
    second holds every ViT leaf constant and yields the agent halves.
    """
    pair = GradientPair()
    _clear(partition)
    if partition.vit or partition.shared_views("vit"):
        graph.backward(loss, constants=partition.leaves("agent"))
        pair.private_vit = _collect(partition.vit)
        pair.shared_vit = _collect(partition.shared_views("vit"))
    _clear(partition)
    if partition.agent or partition.shared_views("agent"):
        graph.backward(loss, constants=partition.leaves("vit"))
        pair.private_agent = _collect(partition.agent)
        pair.shared_agent = _collect(partition.shared_views("agent"))
    _clear(partition)
    return pair


def shared_effective_gradient(g_vit: np.ndarray, g_agent: np.ndarray, rule: str = "aligned") -> np.ndarray:
    if rule == "aligned":
        return 0.5 * (g_vit + align(g_agent, g_vit))
    if rule == "mean":
        return 0.5 * (g_vit + g_agent)
    if rule == "vit-only":
        return g_vit
    raise GraphContractError(f"unknown shared update rule '{rule}'")


def bootstrap_step(pair: GradientPair, partition: ParameterPartition, optimizer: Optimizer, lr: float) -> Dict[str, float]:
    """Apply one update to every tensor of the partition.

    Returns per-step diagnostics: the share of shared tensors whose agent
    gradient conflicted with the ViT gradient.
    """
    pair.check_complete(partition)
    optimizer.begin_step()
    for network, grads in (("vit", pair.private_vit), ("agent", pair.private_agent)):
        for name, tensor in partition.private(network).items():
            optimizer.update(f"{network}.{name}", tensor.data, grads[name], lr)

    conflicts = 0
    for name, views in partition.shared.items():
        param = next(iter(views.values())).data
        if "vit" in views and "agent" in views:
            g_vit, g_agent = pair.shared_vit[name], pair.shared_agent[name]
            if float(np.dot(g_agent.reshape(-1), g_vit.reshape(-1))) < 0:
                conflicts += 1
            g_eff = shared_effective_gradient(g_vit, g_agent, optimizer.cfg.shared_update)
        else:
            g_eff = pair.shared_vit[name] if "vit" in views else pair.shared_agent[name]
        optimizer.update(f"shared.{name}", param, g_eff, lr)
    return {"conflict_fraction": conflicts / len(partition.shared) if partition.shared else 0.0}
