import pytest

from app.errors import MetricsParseError, UsageError
from app.models.run import RunSummary, TrainRecord
from app.services.curves_service import export_curves, find_metrics
from app.services.metrics_service import (MetricsWriter, final_and_best, metrics_header, read_metrics, read_summary,
                                          truncate_metrics, write_summary)


def write_run(run_dir, epochs=3, networks=("vit", "agent"), layers=2):
    with MetricsWriter(run_dir, layers) as writer:
        writer.write(TrainRecord(kind="init", epoch=0, step=0, val_acc_vit=0.1 if "vit" in networks else None,
                                 val_acc_agent=0.1 if "agent" in networks else None), 0.0)
        for epoch in range(1, epochs + 1):
            writer.write(TrainRecord(kind="step", epoch=epoch, step=epoch * 10 - 5, total=1.0 / epoch,
                                     feat_per_layer={1: 0.5, 2: 0.25}), 1.0)
            accs = {f"val_acc_{n}": 0.2 * epoch for n in networks}
            writer.write(TrainRecord(kind="epoch", epoch=epoch, step=epoch * 10, **accs), 2.0)
    return run_dir / "metrics.csv"


def test_header_has_one_column_per_layer():
    assert metrics_header(3)[-3:] == ["feat_l1", "feat_l2", "feat_l3"]


def test_written_rows_parse_back(tmp_path):
    records = read_metrics(write_run(tmp_path / "run"))
    assert [r.kind for r in records[:3]] == ["init", "step", "epoch"]
    assert records[1].feat_per_layer == {1: 0.5, 2: 0.25}
    assert records[-1].val_acc_vit == pytest.approx(0.6)
    assert (tmp_path / "run" / "timing.csv").read_text().startswith("kind,epoch,step,wall_clock")


def test_wall_clock_stays_out_of_metrics(tmp_path):
    path = write_run(tmp_path / "run")
    assert "wall_clock" not in path.read_text()


def test_bad_number_reports_line(tmp_path):
    path = write_run(tmp_path / "run")
    lines = path.read_text().splitlines()
    lines[3] = lines[3].replace("epoch,1,10", "epoch,1,ten")
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(MetricsParseError) as err:
        read_metrics(path)
    assert err.value.line == 4


def test_keys_must_not_go_back(tmp_path):
    path = write_run(tmp_path / "run")
    lines = path.read_text().splitlines()
    lines.append(lines[2])
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(MetricsParseError, match="goes back"):
        read_metrics(path)


def test_wrong_field_count(tmp_path):
    path = tmp_path / "metrics.csv"
    path.write_text(",".join(metrics_header(1)) + "\ninit,0\n")
    with pytest.raises(MetricsParseError):
        read_metrics(path)


def test_final_and_best(tmp_path):
    values = final_and_best(read_metrics(write_run(tmp_path / "run", networks=("vit",))))
    assert values["final_val_acc_vit"] == pytest.approx(0.6)
    assert values["best_val_acc_vit"] == pytest.approx(0.6)
    assert values["final_val_acc_agent"] is None


def test_truncation_drops_rows_after_a_checkpoint(tmp_path):
    path = write_run(tmp_path)
    assert truncate_metrics(tmp_path, 2, 20) == 2
    records = read_metrics(path)
    assert [(r.kind, r.epoch, r.step) for r in records][-1] == ("epoch", 2, 20)
    assert len(records) == 5
    timing = (tmp_path / "timing.csv").read_text().splitlines()
    assert len(timing) == 1 + 5
    assert truncate_metrics(tmp_path, 2, 20) == 0


def test_summary_round_trip(tmp_path):
    summary = RunSummary(run_name="r", scheme="joint", epochs=2, steps=8, seed=1, toggles=["no-decay"],
                         final_val_acc_vit=0.5, params_vit=10, params_agent=5)
    write_summary(tmp_path / "summary.txt", summary)
    assert "params_total = 15" in (tmp_path / "summary.txt").read_text()
    assert read_summary(tmp_path / "summary.txt") == summary


def test_curves_for_one_joint_run(tmp_path):
    write_run(tmp_path / "runs" / "joint")
    csv_path, svg_path = export_curves([tmp_path / "runs"], tmp_path / "out")
    header = csv_path.read_text().splitlines()[0]
    assert header == "epoch,joint/agent,joint/vit"
    assert svg_path.read_text().lstrip().startswith("<?xml")


def test_curves_merge_the_union_of_epochs(tmp_path):
    write_run(tmp_path / "a", epochs=2, networks=("vit",))
    write_run(tmp_path / "b", epochs=4, networks=("vit",))
    csv_path, _ = export_curves([tmp_path / "a" / "metrics.csv", tmp_path / "b"], tmp_path / "out")
    rows = csv_path.read_text().splitlines()
    assert [row.split(",")[0] for row in rows[1:]] == ["0", "1", "2", "3", "4"]
    assert rows[-1].split(",")[1] == ""


def test_curves_need_metrics(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(UsageError):
        find_metrics([tmp_path / "empty"])
