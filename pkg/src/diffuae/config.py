"""Run configuration: an INI file with typed sections.

Every section maps to a dataclass; values are parsed by the field's type and
unknown sections or keys are rejected. The fully resolved configuration is
written next to a run's outputs and can be fed back in unchanged.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .diffusion import ConfigError
from .guidance import PRESETS


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs/default"
    workers: int = 1


@dataclass
class DataSection:
    classes: int = 8
    per_class: int = 500
    radius: float = 2.0
    gamma: float = 0.2
    seed: int = 1


@dataclass
class ScheduleSection:
    kind: str = "linear"
    T: int = 500
    beta_start: float = 2e-4
    beta_end: float = 0.04


@dataclass
class DenoiserSection:
    checkpoint: str = "denoiser.ckpt"
    hidden: str = "128,128,128"
    emb_dim: int = 16
    time_freqs: int = 8
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.05
    p_uncond: float = 0.1
    loss_threshold: float = 1.0


@dataclass
class ClassifierSection:
    checkpoint: str = "classifier.ckpt"
    hidden: str = "128,128,128"
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.1
    adversarial: bool = False


@dataclass
class PgdSection:
    epsilon: float = 0.3
    step_size: float = 0.075
    steps: int = 10
    random_start: bool = True


@dataclass
class GuidanceSection:
    w: float = 1.0
    s: float = 0.5
    a: float = 1.0
    N: int = 10
    t_star: float = 0.5
    mode: str = "targeted"
    sampler: str = "ddpm"
    ddim_steps: int = 50
    # auto | on | off
    noise_sigma_bar: str = "auto"


@dataclass
class AttackSection:
    count: int = 500
    targets: str = "random"
    chunk: int = 50
    benign_reference: bool = True
    # optional second oracle: an independently trained classifier checkpoint
    oracle_checkpoint: str = ""


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    pgd: PgdSection = field(default_factory=PgdSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    attack: AttackSection = field(default_factory=AttackSection)


def _parse(value: str, kind, where: str):
    try:
        if kind is bool:
            low = value.strip().lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(value)
        return kind(value.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} as {kind.__name__}") from None


def load_config(path=None, text: str | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is None and text is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keep key case (T, N)
    try:
        if text is not None:
            parser.read_string(text, source="<string>")
        else:
            with open(path) as fh:
                parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    sections = {f.name: f for f in dataclasses.fields(RunConfig)}
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(f"unknown section [{name}]")
        sec = getattr(cfg, name)
        hints = typing.get_type_hints(type(sec))
        for key, value in parser.items(name):
            if key not in hints:
                raise ConfigError(f"unknown key '{key}' in section [{name}]")
            setattr(sec, key, _parse(value, hints[key], f"[{name}] {key}"))
    return cfg


def apply_preset(cfg: RunConfig, preset: str) -> None:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    for key, value in PRESETS[preset].items():
        setattr(cfg.guidance, key, value)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        sec = getattr(cfg, f.name)
        lines.append(f"[{f.name}]")
        for sf in dataclasses.fields(sec):
            v = getattr(sec, sf.name)
            lines.append(f"{sf.name} = {str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else v}")
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))


def parse_hidden(text: str) -> tuple[int, ...]:
    try:
        widths = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"hidden widths must be comma-separated integers, got {text!r}") from None
    if not widths or min(widths) < 1:
        raise ConfigError("hidden widths must be positive")
    return widths
