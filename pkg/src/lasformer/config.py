"""Experiment configuration: flat TOML sections, overrides and validation.

A config file looks like::

    seed = 7
    [model]
    d = 64
    [selection]
    t = 0.95
    [task]
    task = "longrange-recall"

Sections map onto :class:`ModelConfig`, :class:`SelectionConfig`,
:class:`TaskSpec`, :class:`OptimConfig` and :class:`TrainConfig`. The
root ``seed`` feeds every named random stream (params, select, data,
dropout, batches).
"""
from __future__ import annotations

import dataclasses
import json
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import TaskSpec
from .errors import ConfigError, SpecError
from .model import ModelConfig
from .optim import OptimConfig
from .sparsity import SelectionConfig

SEED_MAX = 2**64 - 1


@dataclass
class TrainConfig:
    steps: int = 2000
    eval_every: int = 500
    checkpoint_every: int = 500
    eval_batch_size: int = 32
    eval_samples: int = 200
    sparsity_report: bool = True
    dump_attention: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def selection(self) -> SelectionConfig:
        return self.model.selection

    def resolved(self) -> ExperimentConfig:
        """Copy with the root seed pushed into every component."""
        c = dataclasses.replace(
            self,
            model=dataclasses.replace(self.model, seed=self.seed),
            task=dataclasses.replace(self.task, seed=self.seed),
        )
        return c

    def validate(self) -> None:
        if not 0 <= self.seed <= SEED_MAX:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        self.model.validate()
        try:
            self.task.validate()
        except SpecError as exc:
            raise ConfigError(str(exc)) from exc
        if self.task.vocab_size != self.model.vocab_size:
            raise ConfigError(f"task.vocab_size={self.task.vocab_size} differs from model.vocab_size={self.model.vocab_size}")
        longest = self.task.max_len + 1
        if longest > self.model.max_len:
            raise ConfigError(f"task sequences of {longest} tokens exceed model.max_len={self.model.max_len}")
        if self.train.steps < 0 or self.train.eval_every < 1 or self.train.checkpoint_every < 1:
            raise ConfigError("train.steps must be >= 0 and eval/checkpoint cadences >= 1")
        if self.optim.batch_size < 1 or self.optim.lr <= 0:
            raise ConfigError("optim.batch_size and optim.lr must be positive")

    # -- serialisation ------------------------------------------------------

    def sections(self) -> dict[str, dict]:
        model = dataclasses.asdict(self.model)
        selection = model.pop("selection")
        model.pop("seed")
        task = dataclasses.asdict(self.task)
        task.pop("seed")
        return {
            "": {"seed": self.seed, "out_dir": self.out_dir},
            "model": model,
            "selection": selection,
            "task": task,
            "optim": dataclasses.asdict(self.optim),
            "train": dataclasses.asdict(self.train),
        }

    def to_toml(self) -> str:
        lines = []
        for name, values in self.sections().items():
            if name:
                lines.append(f"\n[{name}]")
            lines += [f"{k} = {_toml_value(v)}" for k, v in values.items()]
        return "\n".join(lines).lstrip("\n") + "\n"

    def to_dict(self) -> dict:
        return self.sections()


SECTION_TYPES = {
    "model": ModelConfig,
    "selection": SelectionConfig,
    "task": TaskSpec,
    "optim": OptimConfig,
    "train": TrainConfig,
}
EXCLUDED = {"model": {"selection", "seed"}, "task": {"seed"}}
ROOT_KEYS = {"seed", "out_dir"}


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    raise ConfigError(f"cannot serialise config value {v!r}")


def _field_types(cls) -> dict[str, type]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def _line_of(text: str, section: str, key: str) -> int | None:
    current = ""
    for no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"\[([^\]]+)\]", stripped)
        if m:
            current = m.group(1).strip()
            continue
        if current == section and re.match(rf"{re.escape(key)}\s*=", stripped):
            return no
    return None


def _coerce(section: str, key: str, value, annotation: str, where: str):
    ann = str(annotation)
    if ann.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: {section}.{key} must be a boolean")
        return value
    if ann.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: {section}.{key} must be an integer")
        return value
    if ann.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: {section}.{key} must be a number")
        return float(value)
    if ann.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: {section}.{key} must be a string")
        return value
    return value


def from_mapping(data: dict, text: str = "", source: str = "<config>") -> ExperimentConfig:
    """Build a config from parsed TOML, rejecting unknown sections and keys."""
    values: dict[str, dict] = {name: {} for name in SECTION_TYPES}
    root: dict = {}
    for key, value in data.items():
        if isinstance(value, dict):
            if key not in SECTION_TYPES:
                line = next((no for no, ln in enumerate(text.splitlines(), 1) if ln.strip() == f"[{key}]"), None)
                raise ConfigError(f"{source}: unknown section [{key}]" + (f" (line {line})" if line else ""))
            allowed = _field_types(SECTION_TYPES[key])
            for sub, v in value.items():
                where = source
                line = _line_of(text, key, sub)
                if line:
                    where = f"{source}:{line}"
                if sub not in allowed or sub in EXCLUDED.get(key, ()):
                    raise ConfigError(f"{where}: unknown key {key}.{sub}")
                values[key][sub] = _coerce(key, sub, v, allowed[sub], where)
        else:
            line = _line_of(text, "", key)
            where = f"{source}:{line}" if line else source
            if key not in ROOT_KEYS:
                raise ConfigError(f"{where}: unknown key {key}")
            if key == "seed" and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f"{where}: seed must be an integer")
            if key == "out_dir" and not isinstance(value, str):
                raise ConfigError(f"{where}: out_dir must be a string")
            root[key] = value
    model = ModelConfig(**values["model"], selection=SelectionConfig(**values["selection"]))
    return ExperimentConfig(
        model=model,
        task=TaskSpec(**values["task"]),
        optim=OptimConfig(**values["optim"]),
        train=TrainConfig(**values["train"]),
        **root,
    )


def parse(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return from_mapping(data, text, source)


def load(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse(text, str(path))


def _parse_scalar(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(config: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` (or ``seed=...``) strings in order."""
    data = config.sections()
    merged = {k: v for k, v in data[""].items()}
    for name, values in data.items():
        if name:
            merged[name] = dict(values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, raw = (s.strip() for s in item.split("=", 1))
        value = _parse_scalar(raw)
        if "." in key:
            section, sub = key.split(".", 1)
            if section not in SECTION_TYPES:
                raise ConfigError(f"override {item!r}: unknown section {section!r}")
            merged[section][sub] = value
        else:
            merged[key] = value
    return from_mapping(merged, source="--override")
