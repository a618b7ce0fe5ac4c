"""Flat ``key=value`` run configuration.

Keys are ``section.field`` with sections ``model``, ``loss``, ``synth`` and
``train``, plus the top-level ``preset`` (``toy`` or ``full``), which is
applied before any other key.  Blank lines and ``#`` comments are ignored;
unknown keys are an error.

Defaults (``preset=toy``): 64x64 input, C=16, depths 2/2/2/2, heads 1/2/4/8,
window 2, 8 attributes, batch 16, 20 epochs.  Loss and optimizer defaults are
the published PETA settings (attribute loss summed over the batch): gamma+=0, gamma-=1, lambda1=0.2, lambda2=1.0,
T=0.1, mask ratio 0.3, AdamW lr 1e-4 -> 5e-6, weight decay 0.05.
``preset=full`` switches to the 224x224, C=128, depths 2/2/18/2 geometry
with 35 attributes, batch 32 and 100 epochs.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import ModelConfig
from .data import SynthSpec
from .numerics import ContractError
from .recognition import LossConfig
from .training import TrainConfig


class ConfigError(ContractError):
    pass


PRESETS = ("toy", "full")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.toy)
    loss: LossConfig = field(default_factory=LossConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    preset: str = "toy"

    @classmethod
    def from_preset(cls, preset: str) -> "RunConfig":
        if preset == "toy":
            return cls()
        if preset == "full":
            return cls(
                model=ModelConfig(),
                synth=SynthSpec(n_attributes=35, image_side=224),
                train=TrainConfig(batch_size=32, epochs=100),
                preset="full",
            )
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")

    def sections(self) -> dict[str, object]:
        return {"model": self.model, "loss": self.loss, "synth": self.synth, "train": self.train}

    def to_dict(self) -> dict[str, object]:
        out: dict[str, object] = {"preset": self.preset}
        for name, sec in self.sections().items():
            for f in dataclasses.fields(sec):
                value = getattr(sec, f.name)
                out[f"{name}.{f.name}"] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, values: dict[str, object]) -> "RunConfig":
        cfg = cls.from_preset(str(values.get("preset", "toy")))
        for key, value in values.items():
            if key != "preset":
                cfg.set(key, value)
        return cfg.validate()

    def set(self, key: str, value) -> None:
        section, _, name = key.partition(".")
        sec = self.sections().get(section)
        if sec is None or name not in {f.name for f in dataclasses.fields(sec)}:
            raise ConfigError(f"unknown config key {key!r}")
        hint = typing.get_type_hints(type(sec))[name]
        setattr(sec, name, _coerce(key, value, hint))

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.loss.validate()
        if self.synth.n_attributes != self.model.n_attributes:
            raise ConfigError(
                f"synth.n_attributes={self.synth.n_attributes} but model.n_attributes={self.model.n_attributes}"
            )
        if self.synth.image_side != self.model.image_h or self.synth.image_side != self.model.image_w:
            raise ConfigError("synth.image_side must match model.image_h and model.image_w")
        t = self.train
        if t.batch_size < 2 or t.epochs < 1:
            raise ConfigError("train.batch_size must be >= 2 and train.epochs >= 1")
        if not 0.0 <= t.mask_ratio <= 1.0:
            raise ConfigError(f"train.mask_ratio must lie in [0, 1], got {t.mask_ratio}")
        if not 0.0 < t.train_fraction < 1.0:
            raise ConfigError(f"train.train_fraction must lie in (0, 1), got {t.train_fraction}")
        return self


def _coerce(key: str, value, hint):
    if not isinstance(value, str):
        return tuple(value) if isinstance(value, list) else value
    text = value.strip()
    try:
        if hint is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if typing.get_origin(hint) is tuple:
            item = typing.get_args(hint)[0]
            return tuple(item(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    raise ConfigError(f"unsupported type for {key}")


def parse_config_text(text: str) -> RunConfig:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        pairs[key.strip()] = value.strip()
    return RunConfig.from_dict(pairs)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    return parse_config_text(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
