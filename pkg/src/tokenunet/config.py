"""Flat ``section.key = value`` run configuration files."""
from dataclasses import dataclass, field, fields

from .data import PhantomSpec
from .models import ConfigError, ModelConfig
from .training import TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": PhantomSpec}


def _parse_value(text):
    text = text.strip()
    low = text.lower()
    if low in ("none", "null", ""):
        return None
    if low in ("true", "false"):
        return low == "true"
    if "," in text:
        return tuple(_parse_value(p) for p in text.split(","))
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)

    def model_config(self, **override):
        return ModelConfig.from_dict({**self.model, **override})

    def train_config(self, **override):
        return TrainConfig.from_dict({**self.train, **override})

    def phantom_spec(self, **override):
        spec = PhantomSpec(**{**self.data, **override})
        spec.validate()
        return spec


def parse_run_config(text, source="<config>"):
    """Parse then validate. Unknown sections or keys raise :class:`ConfigError`."""
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"{source}:{lineno}: unknown section in key {key!r}")
        if name not in {f.name for f in fields(SECTIONS[section])}:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        getattr(cfg, section)[name] = _parse_value(value)
    try:
        cfg.model_config()
        cfg.train_config()
        cfg.phantom_spec()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return cfg


def load_run_config(path):
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_run_config(fh.read(), path)
