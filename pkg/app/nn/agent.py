import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.autodiff import ops
from app.autodiff.rng import Rng
from app.autodiff.tensor import Tensor
from app.errors import ShapeError
from app.models.arch import ArchConfig
from app.nn.layers import (Conv2d, FeedForward, GeneralizedConv, LayerNorm, LayerTrace, Linear, Module, ModuleList,
                           map_to_tokens, tokens_to_map)
from app.nn.shared import SharedParameterStore
from app.nn.vit import split_slots

logger = logging.getLogger(__name__)


class AgentBlock(Module):
    """x + CONV(LN(x)), then x + FFN(LN(x)) on a flattened h×w map."""

    def __init__(self, cfg: ArchConfig, side: int, rng: Rng, dtype=np.float32,
                 shared: Optional[Dict[str, Tensor]] = None):
        super().__init__()
        attn_t, ffn_t = split_slots(shared or {})
        self.norm1 = LayerNorm(cfg.hidden, dtype)
        self.conv = GeneralizedConv(cfg.hidden, cfg.heads, (side, side), rng.split("conv"), dtype, attn_t or None)
        self.norm2 = LayerNorm(cfg.hidden, dtype)
        self.ffn = FeedForward(cfg.hidden, cfg.mlp_hidden, rng.split("ffn"), dtype, ffn_t)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.conv(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class AgentCNN(Module):
    """Agent CNN: input projection, m CONV blocks, final norm, global average pooling, FC head.

    The base variant projects patch×patch cells with stride patch and keeps
    the map size. The res-like variant uses a 7×7/S2 conv, 2×2/S2 max
    pooling and a 3×3/S2 conv, then halves the map before every stage after
    the first.
    """

    def __init__(self, cfg: ArchConfig, rng: Rng, dtype=np.float32, store: Optional[SharedParameterStore] = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden
        self.sides = cfg.agent_grid_sizes()
        if cfg.agent_variant == "base":
            self.input_proj = Conv2d(cfg.channels, d, cfg.patch, stride=cfg.patch, rng=rng.split("input_proj"),
                                     dtype=dtype)
        else:
            self.stem = Conv2d(cfg.channels, cfg.stem_channels, 7, stride=2, padding=3, rng=rng.split("stem"),
                               dtype=dtype)
            self.input_proj = Conv2d(cfg.stem_channels, d, 3, stride=2, padding=1, rng=rng.split("input_proj"),
                                     dtype=dtype)
        if store is not None:
            store.check_compatible(cfg)

        self.downsample_before: List[int] = [i for i in range(1, cfg.layers) if self.sides[i] != self.sides[i - 1]]
        self.downsamplers = ModuleList()
        if cfg.downsample == "strided-conv":
            for i in self.downsample_before:
                self.downsamplers.append(Conv2d(d, d, 2, stride=2, rng=rng.split(f"downsample.{i}"), dtype=dtype))

        self.blocks = ModuleList(
            AgentBlock(cfg, self.sides[i], rng.split(f"blocks.{i}"), dtype,
                       store.layer_tensors("agent", i) if store is not None else None)
            for i in range(cfg.layers)
        )
        self.norm = LayerNorm(d, dtype)
        self.head = Linear(d, cfg.classes, rng.split("head"), dtype)

    def _project(self, images: Tensor) -> Tensor:
        if self.cfg.agent_variant == "base":
            return self.input_proj(images)
        x = ops.max_pool2d(ops.gelu(self.stem(images)), 2)
        return self.input_proj(x)

    def _downsample(self, x: Tensor, layer: int) -> Tensor:
        side = self.sides[layer - 1]
        fmap = tokens_to_map(x, (side, side))
        if self.cfg.downsample == "avg-pool":
            fmap = ops.avg_pool2d(fmap, 2)
        else:
            fmap = self.downsamplers[self.downsample_before.index(layer)](fmap)
        return map_to_tokens(fmap)

    def forward_traced(self, images: Tensor) -> LayerTrace:
        cfg = self.cfg
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeError(f"agent expects images [B,{expected[0]},{expected[1]},{expected[2]}], got {images.shape}")
        x = map_to_tokens(self._project(images))
        features = []
        for i, block in enumerate(self.blocks):
            if i in self.downsample_before:
                x = self._downsample(x, i)
            x = block(x)
            features.append(x)
        pooled = ops.reduce_mean(self.norm(x), axis=1)
        return LayerTrace(features, self.head(pooled))

    def __call__(self, images: Tensor) -> Tensor:
        return self.forward_traced(images).logits

    def feature_shapes(self) -> List[Tuple[int, int]]:
        return [(s * s, self.cfg.hidden) for s in self.sides]


def build_agent(cfg: ArchConfig, rng: Rng, dtype=np.float32,
                store: Optional[SharedParameterStore] = None) -> AgentCNN:
    model = AgentCNN(cfg, rng, dtype, store)
    logger.debug(f"Built {cfg.agent_variant} agent, map sides {model.sides}, shared={store is not None}")
    return model
