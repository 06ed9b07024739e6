"""INI-style configuration with one section per component.

Sections: ``region``, ``bmp``, ``rim``, ``irm`` and ``train``. Keys are the
dataclass field names; tuples are comma-separated. Unknown sections or keys
raise :class:`ConfigFileError` so typos never pass silently.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .bev import RegionSpec
from .bmp import BmpConfig
from .irm import IrmConfig
from .pipeline import ModelConfig
from .rim import RimConfig
from .train import TrainConfig

SECTIONS = {"region": RegionSpec, "bmp": BmpConfig, "rim": RimConfig, "irm": IrmConfig, "train": TrainConfig}


class ConfigFileError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def section(self, name: str):
        return self.train if name == "train" else getattr(self.model, name)


def _parse(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(f"not a boolean: {raw!r}")
            return configparser.ConfigParser.BOOLEAN_STATES[low]
        if isinstance(default, tuple):
            vals = tuple(type(default[0])(v.strip()) for v in raw.split(","))
            if len(vals) != len(default):
                raise ValueError(f"expected {len(default)} comma-separated values")
            return vals
        return type(default)(raw.strip())
    except ValueError as e:
        raise ConfigFileError(f"{where}: {e}") from None


def loads_config(text: str, source: str = "<string>") -> Config:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigFileError(str(e)) from None
    base = Config()
    parts = {}
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigFileError(f"{source}: unknown section [{name}]; expected one of {sorted(SECTIONS)}")
        current = base.section(name)
        fields = {f.name for f in dataclasses.fields(current)}
        kw = {}
        for key, raw in cp.items(name):
            if key not in fields:
                raise ConfigFileError(f"{source}: unknown key {key!r} in [{name}]")
            kw[key] = _parse(raw, getattr(current, key), f"{source}: [{name}] {key}")
        try:
            parts[name] = dataclasses.replace(current, **kw)
        except ValueError as e:
            raise ConfigFileError(f"{source}: [{name}] {e}") from None
    model = dataclasses.replace(base.model, **{k: v for k, v in parts.items() if k != "train"})
    return Config(model, parts.get("train", base.train))


def load_config(path) -> Config:
    path = Path(path)
    return loads_config(path.read_text(), str(path))


def dumps_config(cfg: Config) -> str:
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        sec = cfg.section(name)
        for f in dataclasses.fields(sec):
            v = getattr(sec, f.name)
            text = ", ".join(repr(x) for x in v) if isinstance(v, tuple) else str(v)
            lines.append(f"{f.name} = {text}")
        lines.append("")
    return "\n".join(lines)
