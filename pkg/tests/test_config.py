import json

import pytest

from fiplab import config as C
from fiplab.errors import ConfigError
from fiplab.ffip import FipConfig


def test_defaults_validate_and_checksum_is_stable():
    cfg = C.load_config()
    assert C.config_checksum(cfg) == C.config_checksum(C.load_config())
    assert cfg["defense"]["eta_F"] == 0.001 and cfg["defense"]["eta_r"] == 5.0


def test_user_file_is_merged(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"defense": {"mode": "ffip"}}))
    cfg = C.load_config(tmp_path / "c.json")
    assert cfg["defense"]["mode"] == "ffip"
    assert cfg["defense"]["eta_r"] == 5.0


@pytest.mark.parametrize(
    "override, pointer",
    [
        ({"defense": {"eta_f": 0.1}}, "/defense/eta_f"),
        ({"train": {"benign": {"lr": -1}}}, "/train/benign/lr"),
        ({"dataset": {"source": "cifar"}}, "/dataset/source"),
        ({"extra": 1}, "/extra"),
        ({"attack": {"target": 7}}, "/attack/target"),
    ],
)
def test_errors_carry_json_pointer(override, pointer):
    with pytest.raises(ConfigError) as exc:
        C.load_config(overrides=override)
    assert exc.value.pointer == pointer


def test_validation_split_must_be_unique():
    with pytest.raises(ConfigError):
        C.load_config(overrides={"dataset": {"val_per_class": 1}})
    cfg = C.load_config(overrides={"dataset": {"val_per_class": 1, "val_fraction": None}})
    assert cfg["dataset"]["val_per_class"] == 1


def test_idx_files_must_exist():
    with pytest.raises(ConfigError) as exc:
        C.load_config(overrides={"dataset": {"source": "idx", "train_images": "/nope", "train_labels": "/nope",
                                             "test_images": "/nope", "test_labels": "/nope"}})
    assert exc.value.pointer == "/dataset/train_images"


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        C.load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        C.load_config(tmp_path / "bad.json")


def test_conversions():
    cfg = C.load_config()
    assert C.fip_config(cfg["defense"]).lr == cfg["defense"]["lr"]
    assert C.fip_config(cfg["defense"], for_ffip=True).lr == cfg["defense"]["ffip_lr"]
    assert isinstance(C.fip_config(cfg["defense"]), FipConfig)
    assert C.train_config(cfg["train"]["backdoor"]).batch_size == 64
    assert C.analysis_config(cfg["analysis"]).probes == cfg["analysis"]["probes"]
