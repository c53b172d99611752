import logging
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd

from app.config.settings import Settings
from app.errors import ConfigurationError
from app.models.run import RunConfig, SweepRow
from app.services.trainer_service import TrainingData, train

logger = logging.getLogger(__name__)


def sweep_points(cfg: RunConfig, alphas: Sequence[float] = (), betas: Sequence[float] = (),
                 temperatures: Sequence[float] = ()) -> List[tuple]:
    """(coordinate, α, β, T) per run: the α×β grid at the configured T, then the T line at the configured α, β."""
    w = cfg.weights
    points = []
    if alphas or betas:
        for alpha in alphas or [w.alpha]:
            for beta in betas or [w.beta]:
                points.append((f"alpha={alpha:g},beta={beta:g}", float(alpha), float(beta), w.temperature))
    for t in temperatures:
        points.append((f"T={t:g}", w.alpha, w.beta, float(t)))
    if not points:
        raise ConfigurationError("sweep needs at least one alpha, beta or temperature value")
    return points


def sweep(cfg: RunConfig, settings: Settings, alphas: Sequence[float] = (), betas: Sequence[float] = (),
          temperatures: Sequence[float] = (), name: str = "sweep", data: Optional[TrainingData] = None) -> Path:
    """One training run per grid point; writes ``<output_dir>/<name>/sweep.csv``."""
    out_dir = Path(cfg.output_dir or settings.output_dir) / name
    rows: List[SweepRow] = []
    points = sweep_points(cfg, alphas, betas, temperatures)
    for coordinate, alpha, beta, temperature in points:
        weights = cfg.weights.model_copy(update={"alpha": alpha, "beta": beta, "temperature": temperature})
        run_cfg = cfg.model_copy(update={"weights": weights, "output_dir": str(out_dir),
                                         "run_name": coordinate.replace(",", "_")})
        logger.info(f"Sweep point {len(rows) + 1}/{len(points)}: {coordinate}")
        summary = train(RunConfig.model_validate(run_cfg.model_dump()), settings, data=data)
        rows.append(SweepRow(coordinate=coordinate, alpha=alpha, beta=beta, temperature=temperature,
                             run_name=summary.run_name, final_val_acc_vit=summary.final_val_acc_vit,
                             final_val_acc_agent=summary.final_val_acc_agent,
                             best_val_acc_vit=summary.best_val_acc_vit,
                             best_val_acc_agent=summary.best_val_acc_agent))
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "sweep.csv"
    pd.DataFrame([r.model_dump() for r in rows]).to_csv(path, index=False)
    logger.info(f"Sweep table with {len(rows)} rows written to {path}")
    return path
