"""Run configuration: one INI file with a section per component.

Example::

    [run]
    seed = 7
    out = runs/base
    threads = 1

    [data]
    n = 64
    train = 160
    val = 40

    [unet]
    base_channels = 8

    [ada]
    z = 16
    cycles = 5

    [augment]
    rotation = -4.6, 4.6
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .ada import AdaConfig
from .augment import COMPOSITION_ORDER, AugmentParams
from .data import SyntheticSpec
from .unet import UNetConfig


@dataclass
class RunSettings:
    seed: int = 0
    out: str = "."
    threads: int = 1
    learning_rate: float = 1e-3
    data: str = ""
    checkpoint: str = ""
    split: str = "val"
    methods: str = "all"
    sample: str = ""
    model: str = ""
    method_label: str = "baseline"
    inputs: str = ""
    labels: str = ""
    zoom: str = ""


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    unet: UNetConfig = field(default_factory=UNetConfig)
    ada: AdaConfig = field(default_factory=AdaConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)

    SECTIONS = ("run", "data", "unet", "ada", "augment")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for sec in self.SECTIONS:
            obj = getattr(self, sec)
            cp[sec] = {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        cp["augment"]["order"] = ", ".join(COMPOSITION_ORDER)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_ini(), encoding="utf-8")

    def update(self, section: str, key: str, raw) -> None:
        obj = getattr(self, section)
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if key not in fields:
            raise ValueError(f"unknown config key [{section}] {key}")
        setattr(obj, key, _parse(raw, getattr(obj, key)) if isinstance(raw, str) else raw)

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_string(text)
        cfg = cls()
        for sec in cp.sections():
            if sec not in cls.SECTIONS:
                raise ValueError(f"unknown config section [{sec}]")
            for key, raw in cp[sec].items():
                if sec == "augment" and key == "order":
                    if [s.strip() for s in raw.split(",")] != list(COMPOSITION_ORDER):
                        raise ValueError("augmentation order is fixed to " + ", ".join(COMPOSITION_ORDER))
                    continue
                cfg.update(sec, key, raw)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_ini(Path(path).read_text(encoding="utf-8"))


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if hasattr(v, "value"):
        return str(v.value)
    return str(v)


def _parse(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, tuple):
        return tuple(float(x) for x in raw.split(","))
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if hasattr(current, "value"):
        return type(current)(raw)
    return raw
