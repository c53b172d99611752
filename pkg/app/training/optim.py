import logging
import math
from typing import Dict

import numpy as np

from app.errors import CheckpointError, GraphContractError, ShapeError
from app.models.run import OptimizerConfig

logger = logging.getLogger(__name__)


def cosine_lr(step: int, total_steps: int, lr_max: float) -> float:
    """λ_max·½(1 + cos(π·step/total)); the step is clamped to [0, total]."""
    if total_steps <= 0:
        return lr_max
    step = min(max(step, 0), total_steps)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int, lr: float,
                 cfg: OptimizerConfig) -> None:
    """One decoupled-weight-decay Adam step, in place on ``param``, ``m`` and ``v``.

    param ← param − lr·(m̂/(√v̂ + eps) + wd·param)
    """
    g = np.asarray(grad, dtype=np.float64)
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * g
    v *= cfg.beta2
    v += (1.0 - cfg.beta2) * g * g
    m_hat = m / (1.0 - cfg.beta1 ** step)
    v_hat = v / (1.0 - cfg.beta2 ** step)
    update = m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * param
    param -= (lr * update).astype(param.dtype, copy=False)


class Optimizer:
    """AdamW (or plain SGD) over named arrays, updated in place.

    Names follow the checkpoint convention (``vit.<name>``, ``agent.<name>``,
    ``shared.<name>``). One :meth:`begin_step` call advances the shared step
    counter before the updates of a training step.
    """

    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self.step = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def begin_step(self) -> int:
        self.step += 1
        return self.step

    def update(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        if grad.shape != param.shape:
            raise ShapeError(f"gradient {grad.shape} does not match parameter '{name}' {param.shape}")
        if self.step < 1:
            raise GraphContractError("optimizer update before begin_step")
        if self.cfg.mode == "sgd":
            param -= (lr * grad).astype(param.dtype, copy=False)
            return
        if name not in self.m:
            self.m[name] = np.zeros(param.shape, dtype=np.float64)
            self.v[name] = np.zeros(param.shape, dtype=np.float64)
        adamw_update(param, grad, self.m[name], self.v[name], self.step, lr, self.cfg)

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"{name}.m"] = self.m[name]
            out[f"{name}.v"] = self.v[name]
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray], step: int) -> None:
        self.m, self.v = {}, {}
        for key, value in state.items():
            name, _, moment = key.rpartition(".")
            if moment not in ("m", "v") or not name:
                raise CheckpointError(f"unexpected optimizer entry '{key}'")
            (self.m if moment == "m" else self.v)[name] = np.array(value, dtype=np.float64)
        if set(self.m) != set(self.v):
            raise CheckpointError("optimizer state has unpaired moments")
        self.step = int(step)
        logger.debug(f"Restored optimizer state for {len(self.m)} tensors at step {self.step}")
