from pathlib import Path

import pytest

from lst import config as run_config
from lst.config import RunConfig
from lst.errors import ConfigError
from lst.utils.enums import BudgetMode, ModelKind, PatchingMode

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.mark.parametrize("name", ["micro.json", "smoke.json", "desk.json"])
def test_shipped_configs_load(name):
    cfg = run_config.load(CONFIGS / name)
    assert cfg.model.patch_size == cfg.train.patch_size


def test_micro_config_values():
    cfg = run_config.load(CONFIGS / "micro.json")
    assert cfg.n_utterances == 16
    assert cfg.model.kind == ModelKind.LST
    assert cfg.train.total_steps == 6
    assert cfg.train.ratio == (1.0, 2.0)
    assert cfg.eval.story_records == 2


def test_unknown_key_names_the_field():
    with pytest.raises(ConfigError) as e:
        RunConfig.from_dict({"train": {"lrr": 0.1}})
    assert e.value.field == "train.lrr"


def test_wrong_types_name_the_field():
    with pytest.raises(ConfigError) as e:
        RunConfig.from_dict({"seed": "zero"})
    assert e.value.field == "seed"
    with pytest.raises(ConfigError) as e:
        RunConfig.from_dict({"train": {"ratio": [1.0]}})
    assert e.value.field == "train.ratio"
    with pytest.raises(ConfigError) as e:
        RunConfig.from_dict({"train": {"budget": "tokens"}})
    assert e.value.field == "train.budget"


def test_enum_values_are_parsed():
    cfg = RunConfig.from_dict({"train": {"patching": "bpe", "budget": "data", "ratio": [1, 0]}})
    assert cfg.train.patching == PatchingMode.BPE_ALIGNED
    assert cfg.train.budget == BudgetMode.DATA
    assert cfg.train.ratio == (1.0, 0.0)


def test_dict_roundtrip_and_hash():
    cfg = run_config.load(CONFIGS / "micro.json")
    again = RunConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert again.hash() == cfg.hash()
    assert cfg.replace(seed=1).hash() != cfg.hash()


def test_save_and_load(tmp_path):
    cfg = RunConfig.from_dict({"n_utterances": 10, "train": {"patching": "curriculum", "tau1": 10, "tau2": 50}})
    path = tmp_path / "config.json"
    run_config.save(cfg, path)
    assert run_config.load(path) == cfg


def test_cross_checks():
    with pytest.raises(ConfigError) as e:
        RunConfig.from_dict({"model": {"patch_size": 3}}).validate()
    assert e.value.field == "train.patch_size"
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"model": {"speech_vocab": 100}}).validate()
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"n_utterances": 0}).validate()


def test_unreadable_config(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{")
    with pytest.raises(ConfigError) as e:
        run_config.load(path)
    assert e.value.field == "config"
    path.write_text("[]")
    with pytest.raises(ConfigError):
        run_config.load(path)
