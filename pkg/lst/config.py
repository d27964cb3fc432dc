"""
Run configuration: one JSON file bundling the corpus, model, training and evaluation
dataclasses. Keys mirror the dataclass field names; enums are stored by value.
"""

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

from lst.corpus import SynthConfig
from lst.errors import ConfigError
from lst.evaluator import EvalConfig
from lst.model import ModelConfig
from lst.trainer import TrainConfig
from lst.utils import config_hash
from lst.utils.enums import PatchingMode


@dataclass
class RunConfig:
    seed: int = 0
    n_utterances: int = 2000
    corpus: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.n_utterances < 1:
            raise ConfigError("must be >= 1", "n_utterances")
        self.corpus.validate()
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        if self.model.patch_size != self.train.patch_size:
            raise ConfigError(
                f"model patch size {self.model.patch_size} differs from train patch size {self.train.patch_size}",
                "train.patch_size",
            )
        if self.corpus.speech_vocab > self.model.speech_vocab:
            raise ConfigError("corpus speech vocabulary exceeds the model's", "model.speech_vocab")
        if self.corpus.n_word_types > self.model.text_vocab - 4:
            raise ConfigError("corpus word types exceed the text content ids", "model.text_vocab")

    def to_dict(self) -> dict[str, Any]:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        """
        Raises:
            ConfigError: On unknown keys or values of the wrong type (with the dotted path).
        """
        return _from_plain(cls, data, "")

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def replace(self, **sections: Any) -> "RunConfig":
        return dataclasses.replace(self, **sections)


def _to_plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return [_to_plain(v) for v in value]
    return value


def _convert(tp: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"expected an object, got {type(value).__name__}", path)
        return _from_plain(tp, value, path)
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return PatchingMode.parse(value) if tp is PatchingMode else tp(value)
        except ValueError as e:
            allowed = ", ".join(str(m.value) for m in tp)
            raise ConfigError(f"invalid value {value!r} (allowed: {allowed})", path) from e
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"expected a list of {len(args)} values", path)
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    return value


def _from_plain(cls: type, data: dict[str, Any], prefix: str) -> Any:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError("unknown key", f"{prefix}{key}")
    kwargs = {key: _convert(hints[key], value, f"{prefix}{key}") for key, value in data.items()}
    return cls(**kwargs)


def load(path: str | Path) -> RunConfig:
    """
    Raises:
        ConfigError: If the file is unreadable, not JSON, or fails validation.
    """
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}", "config") from e
    if not isinstance(data, dict):
        raise ConfigError("top level must be an object", "config")
    config = RunConfig.from_dict(data)
    config.validate()
    return config


def save(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
