"""Training objectives: adaptive feature supervision, mutual distillation and their scheduled sum."""
import logging
import math
from typing import Dict, Optional, Tuple

import numpy as np

from app.autodiff import ops
from app.autodiff.tensor import Tensor
from app.errors import ConfigurationError, ShapeError
from app.models.losses import LossBreakdown, LossWeights
from app.nn.layers import LayerTrace, map_to_tokens, tokens_to_map

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12


def interpolation_matrix(target_len: int, source_len: int, dtype=np.float64) -> np.ndarray:
    """target_len×source_len linear interpolation weights, end points aligned."""
    m = np.zeros((target_len, source_len), dtype=dtype)
    if source_len == 1 or target_len == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(target_len) * (source_len - 1) / (target_len - 1)
    lo = np.minimum(np.floor(pos).astype(int), source_len - 2)
    frac = pos - lo
    rows = np.arange(target_len)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def _square_side(n: int, what: str) -> int:
    side = math.isqrt(n)
    if side * side != n:
        raise ConfigurationError(f"avg-pool-2d needs a square token count, {what} has {n}")
    return side


def adapt_feature(feature: Tensor, target_len: int, mode: str = "seq-interp-1d") -> Tensor:
    """Resample a (B×)n'×d feature to ``target_len`` tokens."""
    source_len = feature.shape[-2]
    if source_len == target_len:
        return feature
    if mode == "seq-interp-1d":
        weights = Tensor(interpolation_matrix(target_len, source_len, feature.dtype))
        return ops.matmul(weights, feature)
    if mode == "avg-pool-2d":
        src, dst = _square_side(source_len, "source"), _square_side(target_len, "target")
        if src % dst:
            raise ConfigurationError(f"avg-pool-2d cannot pool a {src}x{src} map to {dst}x{dst}")
        batched = feature if feature.ndim == 3 else ops.reshape(feature, (1,) + feature.shape)
        pooled = map_to_tokens(ops.avg_pool2d(tokens_to_map(batched, (src, src)), src // dst))
        return pooled if feature.ndim == 3 else ops.reshape(pooled, pooled.shape[1:])
    raise ConfigurationError(f"unknown adapt mode '{mode}'")


def _normalize(feature: Tensor) -> Tuple[Tensor, int]:
    axes = tuple(range(1, feature.ndim))
    sq = ops.reduce_sum(ops.square(feature), axis=axes, keepdims=True)
    zero = int(np.count_nonzero(sq.data.reshape(-1) <= NORM_EPS * NORM_EPS))
    return ops.div(feature, ops.sqrt(sq + NORM_EPS * NORM_EPS)), zero


def feat_loss_layer(feature_agent: Tensor, feature_vit: Tensor, mode: str = "seq-interp-1d",
                    detach_agent: bool = False) -> Tuple[Tensor, int]:
    """‖F̃_A/‖F̃_A‖ − F_V/‖F_V‖‖² per sample, averaged over the batch.

    Inputs are B×n×d (or n×d for a single sample). The norm runs over all
    entries of a sample. Returns the loss and the number of zero-norm features.
    """
    if feature_agent.shape[-1] != feature_vit.shape[-1]:
        raise ShapeError(f"feature widths differ: agent {feature_agent.shape}, ViT {feature_vit.shape}")
    if detach_agent:
        feature_agent = feature_agent.detach()
    a = adapt_feature(feature_agent, feature_vit.shape[-2], mode)
    if a.ndim == 2:
        a = ops.reshape(a, (1,) + a.shape)
        feature_vit = ops.reshape(feature_vit, (1,) + feature_vit.shape)
    a_hat, zero_a = _normalize(a)
    v_hat, zero_v = _normalize(feature_vit)
    per_sample = ops.reduce_sum(ops.square(a_hat - v_hat), axis=(1, 2))
    return ops.reduce_mean(per_sample), zero_a + zero_v


def feat_loss_total(trace_agent: LayerTrace, trace_vit: LayerTrace,
                    weights: LossWeights) -> Tuple[Tensor, Dict[int, float], int]:
    """Σ_{ℓ∈Λ} L_feat^(ℓ); returns the sum, the per-layer values and the zero-norm count."""
    depth = len(trace_vit)
    if len(trace_agent) != depth:
        raise ShapeError(f"traces have {len(trace_agent)} agent and {depth} ViT layers")
    layers = weights.layers_for(depth)
    if any(layer > depth for layer in layers):
        raise ConfigurationError(f"supervised layers {layers} exceed the {depth} encoder layers")
    total: Optional[Tensor] = None
    per_layer: Dict[int, float] = {}
    zero = 0
    for layer in layers:
        term, z = feat_loss_layer(trace_agent.features[layer - 1], trace_vit.features[layer - 1],
                                  weights.adapt, weights.detach_agent_features)
        per_layer[layer] = term.item()
        zero += z
        total = term if total is None else total + term
    if total is None:
        total = Tensor(np.zeros((), dtype=trace_vit.logits.dtype))
    return total, per_layer, zero


def _check_labels(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    classes = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeError(f"class index outside [0, {classes}) in labels")
    return labels


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean −log softmax(logits)[y] over the batch."""
    labels = _check_labels(logits, labels)
    picked = ops.log_softmax(logits, axis=-1) * Tensor(ops.one_hot(labels, logits.shape[-1], logits.dtype))
    return ops.neg(ops.reduce_mean(ops.reduce_sum(picked, axis=-1)))


def kd_loss(student_logits: Tensor, teacher_logits: Tensor, labels: np.ndarray, temperature: float,
            hard_weight: float = 1.0, soft_weight: float = 1.0) -> Tensor:
    """hard·CE(p_s, y) + soft·T²·KL(softmax(t/T) ‖ softmax(s/T)); the teacher side is a constant."""
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    teacher = teacher_logits.data / temperature
    log_pt = teacher - teacher.max(axis=-1, keepdims=True)
    log_pt = log_pt - np.log(np.exp(log_pt).sum(axis=-1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = ops.log_softmax(ops.scale(student_logits, 1.0 / temperature), axis=-1)
    kl = ops.reduce_sum(Tensor(pt) * (Tensor(log_pt) - log_ps), axis=-1)
    soft = ops.scale(ops.reduce_mean(kl), temperature * temperature)
    hard = cross_entropy(student_logits, labels)
    return ops.scale(hard, hard_weight) + ops.scale(soft, soft_weight)


def mutual_loss(logits_vit: Tensor, logits_agent: Tensor, labels: np.ndarray, temperature: float,
                hard_weight: float = 1.0, soft_weight: float = 1.0,
                peer_logits: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tensor:
    """L_KD(p_V, p̄_A) + L_KD(p_A, p̄_V) with each teacher side detached.

    ``peer_logits`` (vit, agent) replaces the detached live logits as the
    distillation targets, e.g. to hold them at a fixed point.
    """
    if peer_logits is None:
        target_vit, target_agent = logits_vit.detach(), logits_agent.detach()
    else:
        target_vit, target_agent = Tensor(np.asarray(peer_logits[0])), Tensor(np.asarray(peer_logits[1]))
        if target_vit.shape != logits_vit.shape or target_agent.shape != logits_agent.shape:
            raise ShapeError(f"peer logits {target_vit.shape}/{target_agent.shape} do not match "
                             f"{logits_vit.shape}/{logits_agent.shape}")
    return (kd_loss(logits_vit, target_agent, labels, temperature, hard_weight, soft_weight)
            + kd_loss(logits_agent, target_vit, labels, temperature, hard_weight, soft_weight))


def feat_weight_multiplier(progress: float, decay: str = "linear") -> float:
    if not 0.0 <= progress <= 1.0:
        raise ConfigurationError(f"training progress must lie in [0, 1], got {progress}")
    return 1.0 - progress if decay == "linear" else 1.0


def supervision_active(weights: LossWeights) -> bool:
    """False when both loss terms are off; training then falls back to plain cross-entropy."""
    return (weights.use_feat and weights.alpha > 0) or (weights.use_mutual and weights.beta > 0)


def combined_loss(trace_vit: Optional[LayerTrace], trace_agent: Optional[LayerTrace], labels: np.ndarray,
                  weights: LossWeights, progress: float,
                  peer_logits: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tuple[Tensor, LossBreakdown]:
    """L = α(t)·L_feat + β·L_mutual.

    With one network, or with both loss terms off, the loss is the sum of the
    plain cross-entropies of the networks present. ``peer_logits`` is passed
    on to :func:`mutual_loss`.
    """
    multiplier = feat_weight_multiplier(progress, weights.decay)
    breakdown = LossBreakdown(feat_weight_multiplier=multiplier)
    if trace_vit is not None:
        breakdown.ce_vit = cross_entropy(trace_vit.logits.detach(), labels).item()
    if trace_agent is not None:
        breakdown.ce_agent = cross_entropy(trace_agent.logits.detach(), labels).item()

    if trace_vit is None or trace_agent is None or not supervision_active(weights):
        total = None
        for trace in (trace_vit, trace_agent):
            if trace is not None:
                ce = cross_entropy(trace.logits, labels)
                total = ce if total is None else total + ce
        breakdown.total = total.item()
        return total, breakdown

    total: Optional[Tensor] = None
    if weights.use_feat:
        feat, per_layer, zero = feat_loss_total(trace_agent, trace_vit, weights)
        breakdown.feat_per_layer = per_layer
        breakdown.feat_total = feat.item()
        breakdown.zero_norm_features = zero
        breakdown.effective_alpha = weights.alpha * multiplier
        if zero:
            logger.warning(f"{zero} zero-norm features in the feature loss")
        total = ops.scale(feat, breakdown.effective_alpha)
    if weights.use_mutual:
        mutual = mutual_loss(trace_vit.logits, trace_agent.logits, labels, weights.temperature,
                             weights.kd_hard_weight, weights.kd_soft_weight, peer_logits)
        breakdown.mutual = mutual.item()
        term = ops.scale(mutual, weights.beta)
        total = term if total is None else total + term
    breakdown.total = total.item()
    return total, breakdown
