from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, model_validator


class LossWeights(BaseModel):
    """Weights and switches of the combined objective L = α·L_feat + β·L_mutual."""

    alpha: float = Field(1.0, ge=0, description="Feature supervision weight")
    beta: float = Field(10.0, ge=0, description="Mutual distillation weight")
    temperature: float = Field(4.0, gt=0, description="Distillation temperature T")
    decay: Literal["linear", "none"] = "linear"
    supervised_layers: Optional[List[int]] = Field(
        None, description="1-based layers Λ with feature supervision; None means all"
    )
    adapt: Literal["seq-interp-1d", "avg-pool-2d"] = "seq-interp-1d"
    use_feat: bool = True
    use_mutual: bool = True
    kd_hard_weight: float = Field(1.0, ge=0, description="Cross-entropy weight inside L_KD")
    kd_soft_weight: float = Field(1.0, ge=0, description="T²·KL weight inside L_KD")
    detach_agent_features: bool = False

    @model_validator(mode="after")
    def _check(self) -> "LossWeights":
        if self.supervised_layers is not None and any(layer < 1 for layer in self.supervised_layers):
            raise ValueError(f"supervised layers are 1-based, got {self.supervised_layers}")
        return self

    def layers_for(self, depth: int) -> List[int]:
        if self.supervised_layers is None:
            return list(range(1, depth + 1))
        return sorted(set(self.supervised_layers))


class LossBreakdown(BaseModel):
    """Values of every loss term of one step."""

    feat_per_layer: Dict[int, float] = Field(default_factory=dict)
    feat_total: float = 0.0
    mutual: float = 0.0
    ce_vit: float = 0.0
    ce_agent: float = 0.0
    total: float = 0.0
    feat_weight_multiplier: float = Field(1.0, ge=0, le=1)
    effective_alpha: float = 0.0
    zero_norm_features: int = 0

    def describe(self) -> str:
        layers = ", ".join(f"l{k}={v:.6g}" for k, v in sorted(self.feat_per_layer.items()))
        return (f"total={self.total:.6g} feat={self.feat_total:.6g} [{layers}] mutual={self.mutual:.6g} "
                f"ce_vit={self.ce_vit:.6g} ce_agent={self.ce_agent:.6g} "
                f"alpha_eff={self.effective_alpha:.6g} multiplier={self.feat_weight_multiplier:.6g}")
