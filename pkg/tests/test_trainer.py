import csv
import os
from pathlib import Path

import numpy as np
import pytest

from app.errors import ConfigurationError, NumericError
from app.models.losses import LossWeights
from app.models.run import TrainRecord
from app.nn.checkpoint import load_checkpoint
from app.services.metrics_service import MetricsWriter, read_metrics, read_summary
from app.services.sweep_service import sweep, sweep_points
from app.services.trainer_service import (Trainer, TrainingData, ablate, apply_toggles, expand_toggles, train)


def test_zero_epochs_writes_only_the_initial_row(make_config, settings, micro_data):
    summary = train(make_config(scheme="scratch-vit", epochs=0), settings, data=micro_data)
    records = read_metrics(f"{settings.output_dir}/{summary.run_name}/metrics.csv")
    assert [r.kind for r in records] == ["init"]
    assert records[0].val_acc_agent is None
    assert summary.steps == 0


def test_joint_run_writes_every_artifact(make_config, settings, micro_data):
    cfg = make_config(scheme="joint", run_name="joint")
    summary = train(cfg, settings, data=micro_data)
    run_dir = settings.output_dir + "/joint"
    epochs = [r for r in read_metrics(run_dir + "/metrics.csv") if r.kind == "epoch"]
    assert [r.epoch for r in epochs] == [1, 2]
    assert all(r.val_acc_vit is not None and r.val_acc_agent is not None for r in epochs)
    assert epochs[0].feat_weight_multiplier == 1.0
    assert epochs[1].feat_weight_multiplier == 0.0
    assert sorted(epochs[0].feat_per_layer) == [1, 2]
    assert read_summary(run_dir + "/summary.txt").final_val_acc_vit == summary.final_val_acc_vit
    assert summary.steps == 2 * 3
    ckpt = load_checkpoint(run_dir + "/checkpoint_last.bin")
    assert ckpt.epoch == 2 and ckpt.step == 6
    assert os.path.exists(run_dir + "/config.txt")
    assert os.path.exists(run_dir + "/checkpoint_best.bin")


def test_identical_configs_give_identical_metrics(make_config, settings, micro_data):
    first = train(make_config(scheme="shared", run_name="a"), settings, data=micro_data)
    second = train(make_config(scheme="shared", run_name="b"), settings, data=micro_data)
    a = open(f"{settings.output_dir}/{first.run_name}/metrics.csv", "rb").read()
    b = open(f"{settings.output_dir}/{second.run_name}/metrics.csv", "rb").read()
    assert a == b


def test_joint_without_supervision_trains_the_vit_like_scratch(make_config, settings, micro_data):
    scratch = make_config(scheme="scratch-vit", run_name="scratch")
    joint = make_config(scheme="joint", run_name="joint0",
                        weights=LossWeights(alpha=0.0, beta=0.0))
    train(scratch, settings, data=micro_data)
    train(joint, settings, data=micro_data)
    rows_s = read_metrics(f"{settings.output_dir}/scratch/metrics.csv")
    rows_j = read_metrics(f"{settings.output_dir}/joint0/metrics.csv")
    assert [r.ce_vit for r in rows_s] == [r.ce_vit for r in rows_j]
    assert [r.val_acc_vit for r in rows_s] == [r.val_acc_vit for r in rows_j]


def test_shared_run_has_fewer_parameters_than_joint(make_config, settings):
    shared = Trainer(make_config(scheme="shared"), settings).partition.counts()
    joint = Trainer(make_config(scheme="joint"), settings).partition.counts()
    assert sum(shared.values()) < sum(joint.values())


def test_resume_continues_the_metrics(make_config, settings, micro_data):
    cfg = make_config(scheme="joint", run_name="resumed", epochs=1)
    train(cfg, settings, data=micro_data)
    run_dir = Path(settings.output_dir) / "resumed"
    with MetricsWriter(run_dir, cfg.arch.layers, append=True) as writer:
        writer.write(TrainRecord(kind="step", epoch=2, step=4, total=123.0), 0.0)
    with open(run_dir / "metrics.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    column = rows[0].index("val_acc_vit")
    for row in rows[1:]:
        if row[0] == "epoch" and row[1] == "1":
            row[column] = "1.0"
    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)

    longer = cfg.model_copy(update={"epochs": 2})
    summary = train(longer, settings, resume=True, data=micro_data)
    records = read_metrics(run_dir / "metrics.csv")
    epochs = [r.epoch for r in records if r.kind == "epoch"]
    assert epochs == [1, 2]
    assert summary.steps == 6
    assert all(r.total != 123.0 for r in records)
    steps = [(r.epoch, r.step) for r in records if r.kind == "step"]
    assert len(steps) == len(set(steps))
    assert summary.best_epoch == 1
    assert load_checkpoint(run_dir / "checkpoint_best.bin").epoch == 1


def test_nan_loss_aborts_with_a_dump(make_config, settings, micro_data):
    bad = TrainingData(np.full_like(micro_data.train_x, np.nan), micro_data.train_y, micro_data.val_x,
                       micro_data.val_y, classes=3)
    cfg = make_config(scheme="scratch-vit", run_name="nan")
    with pytest.raises(NumericError):
        train(cfg, settings, data=bad)
    assert "step = 1" in open(f"{settings.output_dir}/nan/nan_dump.txt").read()
    assert read_summary(f"{settings.output_dir}/nan/summary.txt").status == "aborted"


def test_data_must_match_the_architecture(make_config, settings, micro_data):
    cfg = make_config(scheme="scratch-vit")
    cfg = cfg.model_copy(update={"arch": cfg.arch.model_copy(update={"classes": 5})})
    with pytest.raises(ConfigurationError):
        train(cfg, settings, data=micro_data)


def test_toggles(make_config):
    cfg = make_config(scheme="joint")
    toggled = apply_toggles(cfg, ["no-decay", "adapt=AP-2D", "drop-layer=2"])
    assert toggled.weights.decay == "none"
    assert toggled.weights.adapt == "avg-pool-2d"
    assert toggled.weights.supervised_layers == [1]
    assert toggled.toggles == ["no-decay", "adapt=AP-2D", "drop-layer=2"]
    with pytest.raises(ConfigurationError):
        apply_toggles(cfg, ["no-feat", "drop-layer=1"])
    with pytest.raises(ConfigurationError):
        apply_toggles(make_config(scheme="scratch-vit"), ["no-mutual"])
    with pytest.raises(ConfigurationError):
        apply_toggles(cfg, ["drop-layer=9"])


def test_drop_layer_all_expands_per_layer(make_config):
    assert expand_toggles(make_config(), ["no-decay", "drop-layer=all"]) == [
        ["no-decay", "drop-layer=1"], ["no-decay", "drop-layer=2"]]


def test_no_decay_ablation_keeps_multiplier_at_one(make_config, settings, micro_data):
    (summary,) = ablate(make_config(scheme="joint", run_name="abl"), ["no-decay"], settings, data=micro_data)
    assert summary.toggles == ["no-decay"]
    rows = read_metrics(f"{settings.output_dir}/{summary.run_name}/metrics.csv")
    assert all(r.feat_weight_multiplier == 1.0 for r in rows)


def test_sweep_tags_every_point(make_config, settings, micro_data):
    cfg = make_config(scheme="joint", epochs=1)
    points = sweep_points(cfg, alphas=[0.5, 1.0], betas=[1.0, 10.0], temperatures=[2.0])
    assert [p[0] for p in points] == ["alpha=0.5,beta=1", "alpha=0.5,beta=10", "alpha=1,beta=1",
                                      "alpha=1,beta=10", "T=2"]
    path = sweep(cfg, settings, alphas=[0.5], temperatures=[2.0], data=micro_data)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("coordinate,alpha,beta,temperature")
    assert len(lines) == 3
    with pytest.raises(ConfigurationError):
        sweep_points(cfg)
