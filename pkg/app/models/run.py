from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, field_validator

from app.models.arch import ArchConfig
from app.models.losses import LossWeights

Scheme = Literal["scratch-vit", "scratch-agent", "joint", "shared"]


class OptimizerConfig(BaseModel):
    lr: float = Field(1e-3, gt=0, description="Peak learning rate λ_max")
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.05, ge=0)
    mode: Literal["adamw", "sgd"] = "adamw"
    shared_update: Literal["aligned", "mean", "vit-only"] = "aligned"
    schedule: Literal["cosine", "constant"] = "cosine"


class AugmentConfig(BaseModel):
    crop: bool = True
    flip: bool = True
    scale_min: float = Field(0.7, gt=0, le=1)
    scale_max: float = Field(1.0, gt=0, le=1)
    flip_prob: float = Field(0.5, ge=0, le=1)
    normalize: bool = True


class RunConfig(BaseModel):
    """Everything a training run depends on."""

    scheme: Scheme = "shared"
    arch: ArchConfig = Field(default_factory=ArchConfig)
    weights: LossWeights = Field(default_factory=LossWeights)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    dataset: Literal["cifar10", "cifar100"] = "cifar10"
    data_dir: Optional[str] = None
    output_dir: Optional[str] = None
    run_name: Optional[str] = None
    fraction: float = Field(1.0, gt=0, le=1, description="Stratified share of the training split")
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(64, ge=1)
    seed: int = 0
    val_limit: Optional[int] = Field(None, ge=1, description="Evaluate on the first N validation images only")
    train_limit: Optional[int] = Field(None, ge=1, description="Cap on training images after subsampling")
    log_every: int = Field(10, ge=1, description="Steps between per-step metric rows")
    dtype: Literal["float32", "float64"] = "float32"
    toggles: List[str] = Field(default_factory=list, description="Ablation toggles applied to this run")

    @field_validator("fraction")
    @classmethod
    def _fraction(cls, v: float) -> float:
        if not 0 < v <= 1:
            raise ValueError(f"fraction must lie in (0, 1], got {v}")
        return v

    def resolved_name(self) -> str:
        if self.run_name:
            return self.run_name
        tag = f"{self.scheme}-{self.dataset}-f{self.fraction:g}-s{self.seed}"
        return tag + ("-" + "-".join(self.toggles) if self.toggles else "")

    @property
    def uses_vit(self) -> bool:
        return self.scheme != "scratch-agent"

    @property
    def uses_agent(self) -> bool:
        return self.scheme != "scratch-vit"


class TrainRecord(BaseModel):
    """One row of metrics.csv.

    ``kind`` is ``step`` for periodic training rows and ``epoch`` for the end
    of epoch row carrying validation accuracy; ``init`` is the validation row
    taken before the first update.
    """

    kind: Literal["init", "step", "epoch"]
    epoch: int = Field(..., ge=0)
    step: int = Field(..., ge=0)
    lr: float = 0.0
    feat_weight_multiplier: float = 1.0
    feat_total: float = 0.0
    mutual: float = 0.0
    ce_vit: float = 0.0
    ce_agent: float = 0.0
    total: float = 0.0
    train_acc_vit: Optional[float] = None
    train_acc_agent: Optional[float] = None
    val_acc_vit: Optional[float] = None
    val_acc_agent: Optional[float] = None
    feat_per_layer: Dict[int, float] = Field(default_factory=dict)


class RunSummary(BaseModel):
    run_name: str
    scheme: Scheme
    status: Literal["completed", "aborted"] = "completed"
    epochs: int
    steps: int
    seed: int
    toggles: List[str] = Field(default_factory=list)
    final_val_acc_vit: Optional[float] = None
    final_val_acc_agent: Optional[float] = None
    best_val_acc_vit: Optional[float] = None
    best_val_acc_agent: Optional[float] = None
    best_epoch: Optional[int] = None
    params_vit: int = 0
    params_agent: int = 0
    params_shared: int = 0
    wall_clock_seconds: float = 0.0

    @property
    def params_total(self) -> int:
        return self.params_vit + self.params_agent + self.params_shared


class SweepRow(BaseModel):
    coordinate: str
    alpha: float
    beta: float
    temperature: float
    run_name: str
    final_val_acc_vit: Optional[float] = None
    final_val_acc_agent: Optional[float] = None
    best_val_acc_vit: Optional[float] = None
    best_val_acc_agent: Optional[float] = None
