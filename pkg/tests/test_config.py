import pytest

from app.config.run_config import (apply_overrides, dump_run_config, load_run_config, parse_assignments, parse_value,
                                   read_config_file)
from app.config.settings import Settings
from app.errors import ConfigurationError
from app.models.run import RunConfig


@pytest.mark.parametrize("text,value", [("3", 3), ("0.5", 0.5), ("true", True), ("None", None),
                                        ("[1, 2]", [1, 2]), ("1,3", [1, 3]), ("shared", "shared")])
def test_parse_value(text, value):
    assert parse_value(text) == value


def test_dotted_overrides_reach_nested_fields():
    cfg = apply_overrides(RunConfig(), {"weights.beta": 5, "arch.hidden": 36, "optimizer.mode": "sgd"})
    assert cfg.weights.beta == 5
    assert cfg.arch.hidden == 36
    assert cfg.optimizer.mode == "sgd"


def test_unknown_key():
    with pytest.raises(ConfigurationError, match="unknown"):
        apply_overrides(RunConfig(), {"weights.gamma": 1})


def test_validation_errors_become_configuration_errors():
    with pytest.raises(ConfigurationError, match="fraction"):
        apply_overrides(RunConfig(), {"fraction": 1.5})
    with pytest.raises(ConfigurationError):
        apply_overrides(RunConfig(), {"arch.heads": 7})


def test_preset_swaps_the_architecture():
    cfg = apply_overrides(RunConfig(), {"preset": "vit-s", "arch.classes": 100})
    assert (cfg.arch.layers, cfg.arch.hidden, cfg.arch.patch) == (6, 288, 16)
    assert cfg.arch.classes == 100


def test_config_file_overrides_flags(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk run\nscheme = joint\nweights.alpha = 0.5\nepochs = 3\n")
    cfg = load_run_config({"scheme": "shared", "epochs": 9, "seed": 4}, path)
    assert cfg.scheme == "joint"
    assert cfg.epochs == 3
    assert cfg.seed == 4
    assert cfg.weights.alpha == 0.5


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        read_config_file(tmp_path / "absent.cfg")


def test_dumped_config_reads_back(tmp_path):
    cfg = apply_overrides(RunConfig(), {"weights.supervised_layers": [1, 3], "run_name": "override", "toggles": ["x"]})
    path = tmp_path / "config.txt"
    path.write_text(dump_run_config(cfg))
    assert load_run_config(config_file=path) == cfg


def test_assignments_need_equals():
    assert parse_assignments(["weights.temperature=2"]) == {"weights.temperature": 2}
    with pytest.raises(ConfigurationError):
        parse_assignments(["epochs"])


def test_settings_read_prefixed_environment(monkeypatch):
    monkeypatch.setenv("BOOTVIT_OUTPUT_DIR", "/tmp/elsewhere")
    monkeypatch.setenv("BOOTVIT_PREFETCH_BATCHES", "5")
    s = Settings()
    assert s.output_dir == "/tmp/elsewhere"
    assert s.prefetch_batches == 5
