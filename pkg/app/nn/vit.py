import logging
from typing import Dict, Optional, Tuple

import numpy as np

from app.autodiff import ops
from app.autodiff.init import trunc_normal
from app.autodiff.rng import Rng
from app.autodiff.tensor import Tensor
from app.errors import ShapeError
from app.models.arch import ArchConfig
from app.nn.layers import Attention, Conv2d, FeedForward, LayerNorm, LayerTrace, Linear, Module, ModuleList, map_to_tokens
from app.nn.shared import SharedParameterStore

logger = logging.getLogger(__name__)


def split_slots(tensors: Dict[str, Tensor]) -> Tuple[Dict[str, Tensor], Dict[str, Tensor]]:
    """Split ``attn.*`` / ``ffn.*`` shared views into per-layer constructor arguments."""
    attn = {k[len("attn."):]: v for k, v in tensors.items() if k.startswith("attn.")}
    ffn = {k[len("ffn."):]: v for k, v in tensors.items() if k.startswith("ffn.")}
    return attn, ffn


class EncoderBlock(Module):
    """Pre-norm transformer block: x + MHSA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, cfg: ArchConfig, rng: Rng, dtype=np.float32,
                 shared: Optional[Dict[str, Tensor]] = None):
        super().__init__()
        attn_t, ffn_t = split_slots(shared or {})
        self.norm1 = LayerNorm(cfg.hidden, dtype)
        self.attn = Attention(cfg.hidden, cfg.heads, rng.split("attn"), dtype, cfg.qkv_bias, attn_t)
        self.norm2 = LayerNorm(cfg.hidden, dtype)
        self.ffn = FeedForward(cfg.hidden, cfg.mlp_hidden, rng.split("ffn"), dtype, ffn_t)

    def __call__(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        y, attn = self.attn(self.norm1(x))
        x = x + y
        x = x + self.ffn(self.norm2(x))
        return x, attn


class VisionTransformer(Module):
    """Patch embedding, CLS token, learned positions over n+1 tokens, m blocks, final norm, CLS head."""

    def __init__(self, cfg: ArchConfig, rng: Rng, dtype=np.float32, store: Optional[SharedParameterStore] = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden
        self.patch_embed = Conv2d(cfg.channels, d, cfg.patch, stride=cfg.patch, rng=rng.split("patch_embed"),
                                  dtype=dtype)
        self.cls_token = trunc_normal(rng.split("cls"), (1, 1, d), dtype=dtype)
        self.pos_embed = trunc_normal(rng.split("pos"), (1, cfg.tokens + 1, d), dtype=dtype)
        if store is not None:
            store.check_compatible(cfg)
        self.blocks = ModuleList(
            EncoderBlock(cfg, rng.split(f"blocks.{i}"), dtype,
                         store.layer_tensors("vit", i) if store is not None else None)
            for i in range(cfg.layers)
        )
        self.norm = LayerNorm(d, dtype)
        self.head = Linear(d, cfg.classes, rng.split("head"), dtype)

    def forward_traced(self, images: Tensor, keep_attention: bool = False) -> LayerTrace:
        cfg = self.cfg
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeError(f"ViT expects images [B,{expected[0]},{expected[1]},{expected[2]}], got {images.shape}")
        b = images.shape[0]
        tokens = map_to_tokens(self.patch_embed(images))
        cls = ops.broadcast_to(self.cls_token, (b, 1, cfg.hidden))
        x = ops.concat([cls, tokens], axis=1) + self.pos_embed
        features, attention = [], []
        for block in self.blocks:
            x, attn = block(x)
            features.append(ops.slice_axis(x, 1, cfg.tokens + 1, axis=1))
            if keep_attention:
                attention.append(attn)
        x = self.norm(x)
        logits = self.head(ops.index(x, (slice(None), 0)))
        return LayerTrace(features, logits, attention)

    def __call__(self, images: Tensor) -> Tensor:
        return self.forward_traced(images).logits


def build_vit(cfg: ArchConfig, rng: Rng, dtype=np.float32,
              store: Optional[SharedParameterStore] = None) -> VisionTransformer:
    model = VisionTransformer(cfg, rng, dtype, store)
    logger.debug(f"Built ViT m={cfg.layers} d={cfg.hidden} H={cfg.heads} shared={store is not None}")
    return model
