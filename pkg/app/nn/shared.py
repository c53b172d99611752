import logging
from typing import Dict, List, Optional

import numpy as np

from app.autodiff.init import trunc_normal
from app.autodiff.rng import Rng
from app.autodiff.tensor import Tensor
from app.errors import ConfigurationError, ShapeError
from app.models.arch import ArchConfig

logger = logging.getLogger(__name__)

NETWORKS = ("vit", "agent")


def _slot_shapes(cfg: ArchConfig) -> Dict[str, tuple]:
    d, hidden = cfg.hidden, cfg.mlp_hidden
    shapes = {
        "attn.w_v": (d, d),
        "attn.w_o": (d, d),
        "attn.b_o": (d,),
        "ffn.fc1.weight": (d, hidden),
        "ffn.fc1.bias": (hidden,),
        "ffn.fc2.weight": (hidden, d),
        "ffn.fc2.bias": (d,),
    }
    if cfg.qkv_bias:
        shapes["attn.b_v"] = (d,)
    return shapes


class SharedParameterStore:
    """Θ_S: value/output projections and FFN weights of every encoder layer.

    Each canonical tensor (``blocks.{ℓ}.<slot>``) has one ndarray. The ViT and
    the agent each get their own leaf :class:`Tensor` wrapping that same
    array, so a backward sweep leaves each network's share of the gradient on
    its own view while an in-place update is seen by both forward passes.
    """

    def __init__(self, cfg: ArchConfig, rng: Rng, dtype=np.float32):
        self.cfg = cfg
        self.arrays: Dict[str, np.ndarray] = {}
        for layer in range(cfg.layers):
            for slot, shape in _slot_shapes(cfg).items():
                name = f"blocks.{layer}.{slot}"
                if len(shape) == 1:
                    self.arrays[name] = np.zeros(shape, dtype=dtype)
                else:
                    self.arrays[name] = trunc_normal(rng.split(name), shape, dtype=dtype).data
        self._views: Dict[str, Dict[str, Tensor]] = {net: {} for net in NETWORKS}
        self._canonical: Dict[int, str] = {}
        logger.debug(f"Shared store: {len(self.arrays)} tensors, {self.parameter_count()} values")

    @property
    def names(self) -> List[str]:
        return list(self.arrays)

    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def view(self, network: str, name: str) -> Tensor:
        """Leaf tensor of ``network`` aliasing the canonical array ``name``."""
        if network not in self._views:
            raise ConfigurationError(f"unknown network '{network}', expected one of {NETWORKS}")
        if name not in self.arrays:
            raise ConfigurationError(f"'{name}' is not a shared tensor")
        views = self._views[network]
        if name not in views:
            t = Tensor(self.arrays[name], requires_grad=True, name=f"shared.{name}")
            views[name] = t
            self._canonical[id(t)] = name
        return views[name]

    def layer_tensors(self, network: str, layer: int) -> Dict[str, Tensor]:
        """Views of one layer keyed by slot (``attn.w_v``, ``ffn.fc1.weight``, …)."""
        if not 0 <= layer < self.cfg.layers:
            raise ShapeError(f"layer {layer} outside the {self.cfg.layers} shared layers")
        prefix = f"blocks.{layer}."
        return {name[len(prefix):]: self.view(network, name)
                for name in self.arrays if name.startswith(prefix)}

    def views(self, network: str) -> Dict[str, Tensor]:
        return dict(self._views[network])

    def canonical_name(self, tensor: Tensor) -> Optional[str]:
        return self._canonical.get(id(tensor))

    def check_compatible(self, cfg: ArchConfig) -> None:
        expected = _slot_shapes(cfg)
        if cfg.layers != self.cfg.layers:
            raise ShapeError(f"store holds {self.cfg.layers} layers, model needs {cfg.layers}")
        for layer in range(cfg.layers):
            for slot, shape in expected.items():
                name = f"blocks.{layer}.{slot}"
                if name not in self.arrays or self.arrays[name].shape != shape:
                    got = self.arrays[name].shape if name in self.arrays else None
                    raise ShapeError(f"shared '{name}' has shape {got}, model needs {shape}")


class ParameterPartition:
    """Θ_S, Θ_V and Θ_A of a ViT/agent pair.

    ``shared`` maps each canonical name to its two views, one per network;
    ``vit`` and ``agent`` hold the private tensors under module names.
    """

    def __init__(self, shared: Dict[str, Dict[str, Tensor]], vit: Dict[str, Tensor], agent: Dict[str, Tensor]):
        self.shared = shared
        self.vit = vit
        self.agent = agent

    def private(self, network: str) -> Dict[str, Tensor]:
        return self.vit if network == "vit" else self.agent

    def shared_views(self, network: str) -> Dict[str, Tensor]:
        return {name: pair[network] for name, pair in self.shared.items() if network in pair}

    def leaves(self, network: str) -> List[Tensor]:
        """Every tensor the forward pass of ``network`` reads as a trainable leaf."""
        return list(self.private(network).values()) + list(self.shared_views(network).values())

    def counts(self) -> Dict[str, int]:
        shared = sum(next(iter(pair.values())).size for pair in self.shared.values())
        return {"shared": int(shared),
                "vit": int(sum(t.size for t in self.vit.values())),
                "agent": int(sum(t.size for t in self.agent.values()))}


def trainable_partition(vit, agent, store: Optional[SharedParameterStore] = None) -> ParameterPartition:
    """Split the trainable tensors of ``vit`` and ``agent`` into Θ_S, Θ_V, Θ_A.

    Either network may be None (single-network schemes).
    """
    shared: Dict[str, Dict[str, Tensor]] = {}
    private: Dict[str, Dict[str, Tensor]] = {"vit": {}, "agent": {}}
    seen: Dict[int, str] = {}
    for network, model in (("vit", vit), ("agent", agent)):
        if model is None:
            continue
        for name, tensor in model.named_parameters():
            canonical = store.canonical_name(tensor) if store is not None else None
            if canonical is not None:
                shared.setdefault(canonical, {})[network] = tensor
                continue
            if id(tensor) in seen:
                raise ConfigurationError(f"tensor '{name}' of the {network} is also '{seen[id(tensor)]}'")
            seen[id(tensor)] = f"{network}.{name}"
            private[network][name] = tensor
    return ParameterPartition(shared, private["vit"], private["agent"])
