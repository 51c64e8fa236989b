"""INI-style pipeline configuration with typed sections and dotted overrides."""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

__all__ = [
    "ConfigError",
    "CaseSection",
    "ProfilesSection",
    "AttackSection",
    "DataSection",
    "EncoderSection",
    "NetworkSection",
    "TrainSection",
    "SplitSection",
    "EvalSection",
    "PipelineConfig",
    "load_config",
    "parse_config",
    "preset_path",
]

BUNDLED_CASE = "bundled:case57"


class ConfigError(ValueError):
    pass


@dataclass
class CaseSection:
    path: str = BUNDLED_CASE


@dataclass
class ProfilesSection:
    source: str = "synth"  # synth | csv
    csv_path: str = ""
    days: int = 7
    step_minutes: int = 5
    n_steps: int = 0  # 0 keeps days * steps-per-day
    seed: int = 0
    regions: int = 11  # 0 gives every bus an independent curve
    bus_noise: float = 0.002


@dataclass
class AttackSection:
    targets: list = field(default_factory=lambda: [38, 47, 35, 14, 10, 51, 6])
    scales: list = field(default_factory=lambda: [0.9, 1.1])
    window_start: int = 1728
    window_end: int = 2016  # exclusive


@dataclass
class DataSection:
    noise_sigma: float = 0.02
    alpha: float = 0.01
    reject_flagged: bool = True
    seed: int = 0


@dataclass
class EncoderSection:
    kind: str = "rp"  # rp | gaf
    image_size: int = 32  # 0 keeps the feature length
    epsilon_frac: float = 0.1
    mode: str = "distance"
    standardize: bool = True


@dataclass
class NetworkSection:
    preset: str = "desk_cnn"  # desk_cnn | paper_cnn | mlp
    hidden_units: int = 128
    batchnorm: bool = True
    dropout: float = 0.25
    mlp_hidden: list = field(default_factory=lambda: [64, 128])
    seed: int = 0


@dataclass
class TrainSection:
    batch_size: int = 128
    epochs: int = 30
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0


@dataclass
class SplitSection:
    train_fraction: float = 0.7
    seed: int = 0


@dataclass
class EvalSection:
    knn_k: int = 5
    mlp_baseline: bool = True
    mlp_epochs: int = 100


_SECTIONS = {
    "case": CaseSection,
    "profiles": ProfilesSection,
    "attack": AttackSection,
    "data": DataSection,
    "encoder": EncoderSection,
    "network": NetworkSection,
    "train": TrainSection,
    "split": SplitSection,
    "eval": EvalSection,
}


@dataclass
class PipelineConfig:
    case: CaseSection = field(default_factory=CaseSection)
    profiles: ProfilesSection = field(default_factory=ProfilesSection)
    attack: AttackSection = field(default_factory=AttackSection)
    data: DataSection = field(default_factory=DataSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    split: SplitSection = field(default_factory=SplitSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output_dir: str = "out"
    name: str = "custom"
    base_dir: str = "."  # relative paths in the file resolve against this

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in _SECTIONS}
        d["output"] = {"directory": self.output_dir}
        d["name"] = self.name
        return d

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def validate(self) -> "PipelineConfig":
        a = self.attack
        if not a.targets:
            raise ConfigError("attack.targets must list at least one bus")
        if not a.scales or any(s <= 0 or s == 1 for s in a.scales):
            raise ConfigError("attack.scales must be positive and different from 1")
        if a.window_end < a.window_start:
            raise ConfigError("attack.window_end must not precede window_start")
        if self.profiles.source not in ("synth", "csv"):
            raise ConfigError(f"profiles.source must be synth or csv, not {self.profiles.source!r}")
        if self.profiles.source == "csv" and not self.profiles.csv_path:
            raise ConfigError("profiles.csv_path is required when source = csv")
        if self.encoder.kind not in ("rp", "gaf"):
            raise ConfigError(f"encoder.kind must be rp or gaf, not {self.encoder.kind!r}")
        if self.encoder.mode not in ("distance", "binary"):
            raise ConfigError(f"encoder.mode must be distance or binary, not {self.encoder.mode!r}")
        if self.network.preset not in ("desk_cnn", "paper_cnn", "mlp"):
            raise ConfigError(f"network.preset must be desk_cnn, paper_cnn or mlp, not {self.network.preset!r}")
        if not 0 < self.split.train_fraction < 1:
            raise ConfigError("split.train_fraction must lie in (0, 1)")
        if self.data.noise_sigma <= 0:
            raise ConfigError("data.noise_sigma must be positive")
        if not 0 < self.data.alpha < 1:
            raise ConfigError("data.alpha must lie in (0, 1)")
        if self.eval.knn_k < 1:
            raise ConfigError("eval.knn_k must be >= 1")
        if self.train.epochs < 1 or self.train.batch_size < 1 or self.train.learning_rate <= 0:
            raise ConfigError("train.epochs, train.batch_size and train.learning_rate must be positive")
        return self


def _convert(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [t for t in raw.replace(",", " ").split() if t]
            kind = type(default[0]) if default else float
            return [kind(t) if kind is not int else int(t) for t in items]
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {type(default).__name__}") from None
    return raw


def _apply(cfg: PipelineConfig, section: str, key: str, value: str):
    if section == "output":
        if key != "directory":
            raise ConfigError(f"unknown key output.{key}")
        cfg.output_dir = value.strip()
        return
    if section == "meta":
        if key != "name":
            raise ConfigError(f"unknown key meta.{key}")
        cfg.name = value.strip()
        return
    if section not in _SECTIONS:
        raise ConfigError(f"unknown section [{section}]")
    obj = getattr(cfg, section)
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise ConfigError(f"unknown key {section}.{key}")
    setattr(obj, key, _convert(value, getattr(obj, key), f"{section}.{key}"))


def parse_config(text: str, overrides=(), base_dir: str | Path = ".") -> PipelineConfig:
    """Build a config from INI text; ``overrides`` are ``section.key=value`` strings applied last."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    cfg = PipelineConfig(base_dir=str(base_dir))
    for section in parser.sections():
        for key, value in parser.items(section):
            _apply(cfg, section, key, value)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, value = item.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        _apply(cfg, section, key, value)
    return cfg.validate()


def preset_path(name: str) -> Path:
    """Path of a shipped preset (``paper`` or ``desk``)."""
    ref = resources.files("fdia_imaging.presets").joinpath(f"{name}.cfg")
    if not ref.is_file():
        raise ConfigError(f"no preset named {name!r}")
    return Path(str(ref))


def load_config(path, overrides=()) -> PipelineConfig:
    """Read a config file; a bare preset name (``desk``, ``paper.cfg``) resolves to the shipped file.

    Relative paths inside a file resolve against the file's directory, except
    for shipped presets, which resolve against the working directory.
    """
    p = Path(path)
    base = p.parent
    if not p.exists() and p.parent == Path(".") and p.stem in ("desk", "paper"):
        # shipped presets write relative to the working directory
        p, base = preset_path(p.stem), Path(".")
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides, base_dir=base)
