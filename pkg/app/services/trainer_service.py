import logging
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.autodiff.rng import Rng
from app.autodiff.tensor import ComputationGraph, Tensor, no_grad
from app.config.run_config import dump_run_config
from app.config.settings import Settings
from app.errors import ConfigurationError, NumericError
from app.models.losses import LossBreakdown
from app.models.run import RunConfig, RunSummary, TrainRecord
from app.nn.agent import build_agent
from app.nn.checkpoint import load_checkpoint, restore_parameters, save_checkpoint
from app.nn.shared import SharedParameterStore, trainable_partition
from app.nn.vit import build_vit
from app.services.dataset_service import (BatchLoader, channel_statistics, load_cifar, standardize, subsample)
from app.services.metrics_service import (MetricsWriter, final_and_best, read_metrics, truncate_metrics,
                                          write_summary)
from app.training.bootstrap import bootstrap_step, compute_gradient_pair
from app.training.objectives import combined_loss
from app.training.optim import Optimizer, cosine_lr

logger = logging.getLogger(__name__)


class TrainingData:
    """Standardized train/validation arrays of one run."""

    def __init__(self, train_x: np.ndarray, train_y: np.ndarray, val_x: np.ndarray, val_y: np.ndarray,
                 classes: int):
        self.train_x, self.train_y = train_x, train_y
        self.val_x, self.val_y = val_x, val_y
        self.classes = classes

    @classmethod
    def from_cifar(cls, cfg: RunConfig, settings: Settings) -> "TrainingData":
        data_dir = cfg.data_dir or settings.data_dir
        train = subsample(load_cifar(data_dir, cfg.dataset, "train"), cfg.fraction, cfg.seed)
        if cfg.train_limit is not None:
            train = train.take(np.arange(min(cfg.train_limit, len(train))))
        val = load_cifar(data_dir, cfg.dataset, "test")
        if cfg.val_limit is not None:
            val = val.take(np.arange(min(cfg.val_limit, len(val))))
        mean, std = channel_statistics(train.images)
        if not cfg.augment.normalize:
            mean, std = np.zeros(3), np.ones(3)
        return cls(standardize(train.images, mean, std, cfg.dtype), train.labels,
                   standardize(val.images, mean, std, cfg.dtype), val.labels, train.classes)


class Trainer:
    """Runs one training scheme end to end and writes its run directory."""

    def __init__(self, cfg: RunConfig, settings: Settings, data: Optional[TrainingData] = None):
        self.cfg = cfg
        self.settings = settings
        self.dtype = np.dtype(cfg.dtype)
        self.run_dir = Path(cfg.output_dir or settings.output_dir) / cfg.resolved_name()
        self.data = data
        self._build()

    # -- construction ----------------------------------------------------
    def _build(self) -> None:
        cfg = self.cfg
        rng = Rng(cfg.seed)
        self.store = None
        if cfg.scheme == "shared":
            self.store = SharedParameterStore(cfg.arch, rng.split("shared"), self.dtype)
        self.vit = build_vit(cfg.arch, rng.split("vit"), self.dtype, self.store) if cfg.uses_vit else None
        self.agent = build_agent(cfg.arch, rng.split("agent"), self.dtype, self.store) if cfg.uses_agent else None
        self.partition = trainable_partition(self.vit, self.agent, self.store)
        self.optimizer = Optimizer(cfg.optimizer)
        counts = self.partition.counts()
        logger.info(f"Scheme {cfg.scheme}: ViT-private {counts['vit']}, agent-private {counts['agent']}, "
                    f"shared {counts['shared']} parameters")

    def _check_data(self) -> None:
        arch = self.cfg.arch
        shape = self.data.train_x.shape[1:]
        if shape != (arch.channels, arch.image_size, arch.image_size):
            raise ConfigurationError(f"data images are {shape}, architecture expects "
                                     f"{(arch.channels, arch.image_size, arch.image_size)}")
        if self.data.classes != arch.classes:
            raise ConfigurationError(f"dataset has {self.data.classes} classes, architecture {arch.classes}")

    def networks(self) -> Dict[str, object]:
        return {name: model for name, model in (("vit", self.vit), ("agent", self.agent)) if model is not None}

    # -- evaluation --------------------------------------------------------
    def evaluate(self, batch_size: Optional[int] = None) -> Dict[str, float]:
        """Top-1 validation accuracy per network."""
        batch_size = batch_size or self.cfg.batch_size
        correct = {name: 0 for name in self.networks()}
        total = len(self.data.val_y)
        with no_grad():
            for start in range(0, total, batch_size):
                images = Tensor(self.data.val_x[start:start + batch_size])
                labels = self.data.val_y[start:start + batch_size]
                for name, model in self.networks().items():
                    correct[name] += int((model(images).data.argmax(axis=-1) == labels).sum())
        return {name: correct[name] / max(total, 1) for name in correct}

    # -- one optimisation step ----------------------------------------------
    def train_step(self, images: np.ndarray, labels: np.ndarray, progress: float,
                   lr: float) -> Tuple[LossBreakdown, Dict[str, int]]:
        try:
            with ComputationGraph() as graph:
                x = Tensor(images)
                trace_vit = self.vit.forward_traced(x) if self.vit is not None else None
                trace_agent = self.agent.forward_traced(x) if self.agent is not None else None
                loss, breakdown = combined_loss(trace_vit, trace_agent, labels, self.cfg.weights, progress)
        except NumericError:
            self._dump_nan(LossBreakdown(total=float("nan")), lr, progress)
            raise
        if not np.isfinite(breakdown.total):
            self._dump_nan(breakdown, lr, progress)
            raise NumericError(f"non-finite loss at optimizer step {self.optimizer.step + 1}: {breakdown.describe()}")
        pair = compute_gradient_pair(self.partition, loss, graph)
        stats = bootstrap_step(pair, self.partition, self.optimizer, lr)
        logger.debug(f"step {self.optimizer.step}: {breakdown.describe()} conflicts={stats['conflict_fraction']:.3f}")
        hits = {}
        for name, trace in (("vit", trace_vit), ("agent", trace_agent)):
            if trace is not None:
                hits[name] = int((trace.logits.data.argmax(axis=-1) == labels).sum())
        return breakdown, hits

    def _dump_nan(self, breakdown: LossBreakdown, lr: float, progress: float) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path = self.run_dir / "nan_dump.txt"
        path.write_text(f"step = {self.optimizer.step + 1}\nlr = {lr!r}\nprogress = {progress!r}\n"
                        f"{breakdown.model_dump_json(indent=2)}\n", encoding="utf-8")
        logger.error(f"NaN loss, breakdown written to {path}: {breakdown.describe()}")

    # -- checkpoints ----------------------------------------------------------------
    def save(self, name: str, epoch: int) -> Path:
        return save_checkpoint(self.run_dir / name, self.partition, self.optimizer.state_dict(),
                               config=self.cfg.model_dump(), rng_state=Rng(self.cfg.seed).state(),
                               step=self.optimizer.step, epoch=epoch)

    def resume(self) -> int:
        """Restore parameters and optimizer state from checkpoint_last.bin; returns the finished epoch.

        Metrics rows written after the checkpoint are dropped.
        """
        checkpoint = load_checkpoint(self.run_dir / "checkpoint_last.bin")
        restore_parameters(checkpoint, self.partition)
        self.optimizer.load_state_dict(checkpoint.group("optim"), checkpoint.step)
        truncate_metrics(self.run_dir, checkpoint.epoch, checkpoint.step)
        logger.info(f"Resumed {self.run_dir.name} after epoch {checkpoint.epoch} (step {checkpoint.step})")
        return checkpoint.epoch

    # -- main loop ----------------------------------------------------------------------
    def run(self, resume: bool = False) -> RunSummary:
        cfg = self.cfg
        if self.data is None:
            self.data = TrainingData.from_cifar(cfg, self.settings)
        self._check_data()
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "config.txt").write_text(dump_run_config(cfg), encoding="utf-8")

        loader = BatchLoader(self.data.train_x, self.data.train_y, cfg.batch_size, cfg.seed,
                             cfg.augment if (cfg.augment.crop or cfg.augment.flip) else None,
                             prefetch=self.settings.prefetch_batches, workers=self.settings.num_workers)
        total_steps = cfg.epochs * len(loader)
        start_epoch = self.resume() if resume else 0
        started = time.perf_counter()
        counts = self.partition.counts()
        summary = RunSummary(run_name=self.run_dir.name, scheme=cfg.scheme, epochs=cfg.epochs, steps=0,
                             seed=cfg.seed, toggles=cfg.toggles, params_vit=counts["vit"],
                             params_agent=counts["agent"], params_shared=counts["shared"])
        best_score = -1.0
        if resume:
            best_score, summary.best_epoch = self._best_so_far()
        logger.info(f"Run {self.run_dir.name} started: {cfg.epochs} epochs x {len(loader)} steps, "
                    f"{len(self.data.train_y)} training images")

        with MetricsWriter(self.run_dir, cfg.arch.layers, append=resume) as writer:
            if not resume:
                acc = self.evaluate()
                writer.write(TrainRecord(kind="init", epoch=0, step=0, lr=cfg.optimizer.lr,
                                         val_acc_vit=acc.get("vit"), val_acc_agent=acc.get("agent")),
                             time.perf_counter() - started)
            try:
                for epoch in range(start_epoch + 1, cfg.epochs + 1):
                    best_score = self._run_epoch(epoch, loader, total_steps, writer, started, best_score, summary)
            except NumericError:
                summary.status = "aborted"
                summary.steps = self.optimizer.step
                write_summary(self.run_dir / "summary.txt", summary)
                raise

        records = read_metrics(self.run_dir / "metrics.csv")
        for key, value in final_and_best(records).items():
            setattr(summary, key, value)
        summary.steps = self.optimizer.step
        summary.wall_clock_seconds = round(time.perf_counter() - started, 3)
        write_summary(self.run_dir / "summary.txt", summary)
        logger.info(f"Run {self.run_dir.name} finished: ViT {summary.final_val_acc_vit}, "
                    f"agent {summary.final_val_acc_agent} (best epoch {summary.best_epoch})")
        return summary

    def _best_so_far(self) -> Tuple[float, Optional[int]]:
        """Best validation score and its epoch among the epochs already in metrics.csv."""
        best_score, best_epoch = -1.0, None
        path = self.run_dir / "metrics.csv"
        if not path.exists():
            return best_score, best_epoch
        for record in read_metrics(path):
            if record.kind != "epoch":
                continue
            score = record.val_acc_vit if record.val_acc_vit is not None else record.val_acc_agent
            if score is not None and score > best_score:
                best_score, best_epoch = score, record.epoch
        return best_score, best_epoch

    def _run_epoch(self, epoch: int, loader: BatchLoader, total_steps: int, writer: MetricsWriter,
                   started: float, best_score: float, summary: RunSummary) -> float:
        cfg = self.cfg
        progress = (epoch - 1) / max(1, cfg.epochs - 1)
        sums: Dict[str, float] = {}
        per_layer: Dict[int, float] = {}
        hits = {name: 0 for name in self.networks()}
        seen = steps = 0
        multiplier = 1.0
        for images, labels in loader.epoch(epoch):
            lr = cosine_lr(self.optimizer.step, total_steps, cfg.optimizer.lr) \
                if cfg.optimizer.schedule == "cosine" else cfg.optimizer.lr
            breakdown, step_hits = self.train_step(images, labels, progress, lr)
            steps += 1
            seen += len(labels)
            multiplier = breakdown.feat_weight_multiplier
            for key in ("feat_total", "mutual", "ce_vit", "ce_agent", "total"):
                sums[key] = sums.get(key, 0.0) + getattr(breakdown, key)
            for layer, value in breakdown.feat_per_layer.items():
                per_layer[layer] = per_layer.get(layer, 0.0) + value
            for name, h in step_hits.items():
                hits[name] += h
            if self.optimizer.step % cfg.log_every == 0:
                writer.write(TrainRecord(kind="step", epoch=epoch, step=self.optimizer.step, lr=lr,
                                         feat_weight_multiplier=multiplier, feat_total=breakdown.feat_total,
                                         mutual=breakdown.mutual, ce_vit=breakdown.ce_vit,
                                         ce_agent=breakdown.ce_agent, total=breakdown.total,
                                         feat_per_layer=breakdown.feat_per_layer),
                             time.perf_counter() - started)

        acc = self.evaluate()
        means = {k: v / max(steps, 1) for k, v in sums.items()}
        record = TrainRecord(
            kind="epoch", epoch=epoch, step=self.optimizer.step, lr=lr if steps else 0.0,
            feat_weight_multiplier=multiplier, feat_per_layer={k: v / max(steps, 1) for k, v in per_layer.items()},
            train_acc_vit=hits["vit"] / max(seen, 1) if "vit" in hits else None,
            train_acc_agent=hits["agent"] / max(seen, 1) if "agent" in hits else None,
            val_acc_vit=acc.get("vit"), val_acc_agent=acc.get("agent"), **means,
        )
        writer.write(record, time.perf_counter() - started)
        logger.info(f"epoch {epoch}/{cfg.epochs}: total={record.total:.4f} feat={record.feat_total:.4f} "
                    f"mutual={record.mutual:.4f} lr={record.lr:.2e} multiplier={multiplier:.3f} "
                    f"val ViT={acc.get('vit')} agent={acc.get('agent')}")

        self.save("checkpoint_last.bin", epoch)
        score = acc.get("vit", acc.get("agent", 0.0))
        if score > best_score:
            best_score = score
            summary.best_epoch = epoch
            self.save("checkpoint_best.bin", epoch)
        return best_score


def train(cfg: RunConfig, settings: Settings, resume: bool = False, data: Optional[TrainingData] = None) -> RunSummary:
    return Trainer(cfg, settings, data).run(resume=resume)


ABLATION_TOGGLES = ("no-mutual", "no-feat", "no-decay", "adapt", "drop-layer", "agent")


def parse_toggle(toggle: str) -> Tuple[str, Optional[str]]:
    name, _, value = toggle.partition("=")
    name = name.strip().lower()
    if name not in ABLATION_TOGGLES:
        raise ConfigurationError(f"unknown ablation toggle '{toggle}', expected one of {ABLATION_TOGGLES}")
    if name in ("adapt", "drop-layer", "agent") and not value:
        raise ConfigurationError(f"toggle '{name}' needs a value, e.g. {name}=...")
    return name, value.strip() or None


def apply_toggles(cfg: RunConfig, toggles: List[str]) -> RunConfig:
    """RunConfig with the objective/architecture ablations applied and recorded."""
    if cfg.scheme not in ("joint", "shared"):
        raise ConfigurationError(f"ablations need scheme joint or shared, not {cfg.scheme}")
    parsed: Dict[str, Optional[str]] = {}
    for toggle in toggles:
        name, value = parse_toggle(toggle)
        if name in parsed and parsed[name] != value:
            raise ConfigurationError(f"toggle '{name}' given twice with different values")
        parsed[name] = value
    weights = cfg.weights.model_copy()
    arch = cfg.arch.model_copy()
    if "no-feat" in parsed and ("adapt" in parsed or "drop-layer" in parsed):
        raise ConfigurationError("adapt/drop-layer toggles contradict no-feat")
    if "no-mutual" in parsed:
        weights.use_mutual = False
    if "no-feat" in parsed:
        weights.use_feat = False
    if "no-mutual" in parsed and "no-feat" in parsed:
        logger.warning("no-feat and no-mutual together: both networks train with plain cross-entropy")
    if "no-decay" in parsed:
        weights.decay = "none"
    if "adapt" in parsed:
        mode = parsed["adapt"].lower()
        weights.adapt = {"ap-2d": "avg-pool-2d", "avg-pool-2d": "avg-pool-2d",
                         "seq-interp-1d": "seq-interp-1d", "interp-1d": "seq-interp-1d"}.get(mode)
        if weights.adapt is None:
            raise ConfigurationError(f"unknown adapt mode '{parsed['adapt']}'")
    if "drop-layer" in parsed:
        try:
            layer = int(parsed["drop-layer"])
        except ValueError:
            raise ConfigurationError(f"drop-layer needs a layer number, got '{parsed['drop-layer']}'")
        if not 1 <= layer <= cfg.arch.layers:
            raise ConfigurationError(f"drop-layer {layer} outside 1..{cfg.arch.layers}")
        weights.supervised_layers = [x for x in weights.layers_for(cfg.arch.layers) if x != layer]
    if "agent" in parsed:
        if parsed["agent"] not in ("base", "res-like"):
            raise ConfigurationError(f"agent must be base or res-like, got '{parsed['agent']}'")
        arch = arch.model_copy(update={"agent_variant": parsed["agent"]})
    out = cfg.model_copy(update={"weights": weights, "arch": arch, "toggles": list(cfg.toggles) + list(toggles)})
    return RunConfig.model_validate(out.model_dump())


def expand_toggles(cfg: RunConfig, toggles: List[str]) -> List[List[str]]:
    """``drop-layer=all`` becomes one toggle set per encoder layer."""
    if not any(t.replace(" ", "").lower() == "drop-layer=all" for t in toggles):
        return [list(toggles)]
    rest = [t for t in toggles if t.replace(" ", "").lower() != "drop-layer=all"]
    return [rest + [f"drop-layer={layer}"] for layer in range(1, cfg.arch.layers + 1)]


def ablate(cfg: RunConfig, toggles: List[str], settings: Settings,
           data: Optional[TrainingData] = None) -> List[RunSummary]:
    summaries = []
    for toggle_set in expand_toggles(cfg, toggles):
        run_cfg = apply_toggles(cfg, toggle_set)
        if cfg.run_name:
            run_cfg = run_cfg.model_copy(update={"run_name": f"{cfg.run_name}-{'-'.join(toggle_set)}"})
        logger.info(f"Ablation {toggle_set}")
        summaries.append(train(run_cfg, settings, data=data))
    return summaries
