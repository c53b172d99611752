import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from app.autodiff.rng import Rng
from app.autodiff.tensor import Tensor, no_grad
from app.config.settings import Settings
from app.errors import ConfigurationError, UsageError
from app.models.arch import PRESETS, arch_preset
from app.models.run import RunConfig
from app.nn.agent import build_agent
from app.nn.checkpoint import load_checkpoint, restore_parameters
from app.nn.inductive_bias import build_selection_matrices, export_triplets, generalized_biases, per_head
from app.nn.layers import parameter_count
from app.nn.vit import build_vit

logger = logging.getLogger(__name__)

# Published sizes (10 classes, 224 input) used as reference by the ``params`` verb.
REFERENCE_COUNTS = {
    ("vit-s", "vit"): 6.28e6,
    ("vit-b", "vit"): 21.67e6,
    ("vit-s", "agent"): 8.66e6,
}


def inspect_phi(out: Union[str, Path], feature_shape: Tuple[int, int], heads: Optional[int] = None,
                kernel: Optional[int] = None) -> Path:
    """Dump selection matrices: the H-head generalized set, or the full k×k set."""
    if (heads is None) == (kernel is None):
        raise UsageError("give exactly one of --heads or --kernel")
    if heads is not None:
        biases = generalized_biases(heads, feature_shape)
        header = f"generalized convolution, {heads} heads"
    else:
        biases = build_selection_matrices(feature_shape, (kernel, kernel))
        header = f"convolution, kernel {kernel}x{kernel}"
    path = export_triplets(biases, out, header=header)
    logger.info(f"Wrote {len(biases)} selection matrices for a {feature_shape[0]}x{feature_shape[1]} map to {path}")
    return path


def inspect_attention(checkpoint_path: Union[str, Path], out_dir: Union[str, Path], settings: Settings,
                      image_index: int = 0, images: Optional[np.ndarray] = None) -> List[Path]:
    """Run the checkpoint's ViT on one validation image; one triplet file per layer and head.

    ``images`` replaces the standardized validation split when given.
    """
    from app.services.trainer_service import Trainer, TrainingData

    checkpoint = load_checkpoint(checkpoint_path)
    cfg = RunConfig.model_validate(checkpoint.config)
    if not cfg.uses_vit:
        raise ConfigurationError(f"checkpoint {checkpoint_path} holds no ViT (scheme {cfg.scheme})")
    trainer = Trainer(cfg, settings)
    restore_parameters(checkpoint, trainer.partition)
    if images is None:
        images = TrainingData.from_cifar(cfg, settings).val_x
    if not 0 <= image_index < len(images):
        raise UsageError(f"image index {image_index} outside the {len(images)} available images")

    with no_grad():
        trace = trainer.vit.forward_traced(Tensor(images[image_index:image_index + 1]), keep_attention=True)
    out_dir = Path(out_dir)
    written = []
    for layer, attn in enumerate(trace.attention, start=1):
        for head, matrix in enumerate(per_head(attn), start=1):
            path = out_dir / f"attention_l{layer}_h{head}.txt"
            written.append(export_triplets(matrix[0], path, header=f"layer {layer} head {head} image {image_index}"))
    logger.info(f"Exported {len(written)} attention matrices to {out_dir}")
    return written


def parameter_report(presets: Optional[List[str]] = None, classes: int = 10) -> List[Dict[str, object]]:
    """Trainable parameters of the ViT and unshared agent of each preset."""
    rows = []
    for name in presets or sorted(PRESETS):
        arch = arch_preset(name, classes=classes)
        rng = Rng(0)
        for network, model in (("vit", build_vit(arch, rng.split("vit"))),
                               ("agent", build_agent(arch, rng.split("agent")))):
            count = parameter_count(model)
            reference = REFERENCE_COUNTS.get((name, network)) if classes == 10 else None
            rows.append({
                "preset": name,
                "network": f"{network} ({arch.agent_variant})" if network == "agent" else network,
                "params": count,
                "reference": reference,
                "deviation": None if reference is None else (count - reference) / reference,
            })
            logger.debug(f"{name}/{network}: {count} parameters")
    return rows


def format_parameter_report(rows: List[Dict[str, object]]) -> str:
    lines = [f"{'preset':<10} {'network':<18} {'params':>12} {'reference':>10} {'dev':>8}"]
    for row in rows:
        ref = "-" if row["reference"] is None else f"{row['reference'] / 1e6:.2f}M"
        dev = "-" if row["deviation"] is None else f"{row['deviation'] * 100:+.2f}%"
        lines.append(f"{row['preset']:<10} {row['network']:<18} {row['params']:>12,} {ref:>10} {dev:>8}")
    return "\n".join(lines)
