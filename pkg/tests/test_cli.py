import pytest

from app.cli.commands import build_parser, run_config_from_args
from app.main import main
from app.services.check_service import run_checks
from app.config.settings import Settings
from app.errors import UsageError


def test_every_oracle_suite_passes():
    results = run_checks()
    assert [r.suite for r in results] == ["conv-equivalence", "fc-1x1", "vanishing", "gradients", "align",
                                          "bootstrap-toy", "loss-laws"]
    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_unknown_suite():
    with pytest.raises(UsageError):
        run_checks(["nope"])


def test_check_verb_exit_code(capsys):
    assert main(["check", "--suite", "align", "--suite", "bootstrap-toy"]) == 0
    out = capsys.readouterr().out
    assert "align" in out and "bootstrap-toy" in out


def test_flags_map_to_run_config(tmp_path):
    args = build_parser().parse_args(["train", "--scheme", "joint", "--alpha", "0.5", "--epochs", "3",
                                      "--set", "weights.temperature=2", "--no-augment"])
    cfg = run_config_from_args(args, Settings(dtype="float64"))
    assert cfg.scheme == "joint"
    assert cfg.weights.alpha == 0.5 and cfg.weights.temperature == 2
    assert cfg.epochs == 3
    assert cfg.dtype == "float64"
    assert not cfg.augment.crop and not cfg.augment.flip


def test_cifar100_widens_the_head():
    args = build_parser().parse_args(["train", "--dataset", "cifar100"])
    assert run_config_from_args(args, Settings()).arch.classes == 100


def test_config_file_wins_over_flags(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs = 7\n")
    args = build_parser().parse_args(["train", "--epochs", "3", "--config", str(path)])
    assert run_config_from_args(args, Settings()).epochs == 7


def test_usage_errors_exit_with_two(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["curves", str(tmp_path / "empty")]) == 2
    assert main(["train", "--set", "weights.gamma=1"]) == 2


def test_missing_dataset_exits_with_one(tmp_path):
    assert main(["train", "--data-dir", str(tmp_path), "--output-dir", str(tmp_path / "runs")]) == 1


def test_inspect_phi_writes_triplets(tmp_path, capsys):
    out = tmp_path / "phi.txt"
    assert main(["inspect-phi", "--feature", "4x4", "--heads", "9", "--out", str(out)]) == 0
    assert out.read_text().count("# offset") == 9
    assert main(["inspect-phi", "--feature", "4x4", "--out", str(out)]) == 2


def test_train_from_cifar_files_then_inspect_attention(cifar10_dir, tmp_path):
    runs = tmp_path / "runs"
    code = main(["train", "--scheme", "shared", "--data-dir", str(cifar10_dir), "--output-dir", str(runs),
                 "--run-name", "tiny", "--epochs", "1", "--batch-size", "50", "--fraction", "0.5",
                 "--set", "arch.layers=1", "--set", "arch.hidden=18", "--set", "arch.patch=8"])
    assert code == 0
    assert (runs / "tiny" / "metrics.csv").is_file()
    assert main(["inspect-attention", str(runs / "tiny" / "checkpoint_last.bin"), "--image", "2",
                 "--out", str(tmp_path / "attn")]) == 0
    assert len(list((tmp_path / "attn").glob("attention_l1_h*.txt"))) == 9
