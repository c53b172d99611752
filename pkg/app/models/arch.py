from typing import List, Literal, Optional

from pydantic import BaseModel, Field, model_validator

from app.errors import ConfigurationError


class ArchConfig(BaseModel):
    """Architecture of a ViT and the agent CNN built from it."""

    layers: int = Field(4, ge=1, description="Encoder layers m")
    hidden: int = Field(72, ge=1, description="Hidden size d")
    heads: int = Field(9, ge=1, description="Attention heads H (also CONV heads of the agent)")
    patch: int = Field(4, ge=1, description="ViT patch size and base-agent input-projection stride")
    image_size: int = Field(32, ge=1, description="Square input side")
    channels: int = Field(3, ge=1)
    classes: int = Field(10, ge=2)
    mlp_ratio: float = Field(4.0, gt=0, description="FFN hidden = hidden * mlp_ratio")
    agent_variant: Literal["base", "res-like"] = "base"
    stage_depths: Optional[List[int]] = Field(
        None, description="Res-like agent: blocks per stage; down-sampling between stages"
    )
    downsample: Literal["avg-pool", "strided-conv"] = "avg-pool"
    stem_channels: int = Field(64, ge=1, description="Res-like stem: channels of the 7x7 conv")
    qkv_bias: bool = True

    @model_validator(mode="after")
    def _check(self) -> "ArchConfig":
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} must be divisible by {self.heads} heads")
        if self.image_size % self.patch:
            raise ValueError(f"image size {self.image_size} must be divisible by patch {self.patch}")
        if (self.hidden * self.mlp_ratio) != int(self.hidden * self.mlp_ratio):
            raise ValueError(f"hidden {self.hidden} x mlp_ratio {self.mlp_ratio} is not an integer")
        if self.stage_depths is not None:
            if any(d < 1 for d in self.stage_depths) or sum(self.stage_depths) != self.layers:
                raise ValueError(f"stage depths {self.stage_depths} must be positive and sum to {self.layers}")
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(self.hidden * self.mlp_ratio)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    def resolved_stage_depths(self) -> List[int]:
        """Blocks per res-like stage: explicit, or m/6, m/6, 4m/6 (1/1/4 for m=6, 2/2/8 for m=12)."""
        if self.stage_depths is not None:
            return list(self.stage_depths)
        if self.layers % 6 == 0:
            unit = self.layers // 6
            return [unit, unit, 4 * unit]
        raise ConfigurationError(
            f"res-like agent with {self.layers} layers needs explicit stage_depths"
        )

    def agent_grid_sizes(self) -> List[int]:
        """Spatial side of the agent feature map after every encoder block."""
        if self.agent_variant == "base":
            return [self.grid] * self.layers
        side = self.image_size
        for _ in range(3):
            if side % 2:
                raise ConfigurationError(f"res-like stem cannot halve odd side {side} of image {self.image_size}")
            side //= 2
        sizes: List[int] = []
        for stage, depth in enumerate(self.resolved_stage_depths()):
            if stage > 0:
                if side % 2:
                    raise ConfigurationError(f"res-like down-sampling cannot halve odd side {side}")
                side //= 2
            sizes.extend([side] * depth)
        return sizes


PRESETS = {
    "vit-s": dict(layers=6, hidden=288, heads=9, patch=16, image_size=224, agent_variant="res-like"),
    "vit-b": dict(layers=12, hidden=384, heads=6, patch=16, image_size=224, agent_variant="res-like"),
    "tiny-desk": dict(layers=4, hidden=72, heads=9, patch=4, image_size=32, agent_variant="base"),
}


def arch_preset(name: str, **overrides) -> ArchConfig:
    """Named architecture, optionally with field overrides."""
    if name not in PRESETS:
        raise ConfigurationError(f"unknown architecture preset '{name}', choose from {sorted(PRESETS)}")
    return ArchConfig(**{**PRESETS[name], **overrides})
