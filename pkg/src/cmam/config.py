"""Training configuration and its ``key = value`` file format."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


PROFILES: dict[str, dict] = {
    # memory 16x16 with 4 read heads, controller 196
    "default": dict(mem_slots=16, mem_width=16, read_heads=4, hidden=196, feature_width=64,
                    cnn_channels=(16, 32, 48, 64)),
    "small": dict(mem_slots=16, mem_width=16, read_heads=4, hidden=64, feature_width=64,
                  cnn_channels=(16, 32, 48, 64)),
    "tiny": dict(mem_slots=4, mem_width=8, read_heads=2, hidden=32, feature_width=32,
                 cnn_channels=(8, 16, 16, 16)),
}


@dataclass(frozen=True)
class TrainConfig:
    model: str = "cmam"
    profile: str = "default"
    refinements: int = 1
    mem_slots: int = 16
    mem_width: int = 16
    read_heads: int = 4
    hidden: int = 196
    feature_width: int = 64
    cnn_channels: tuple[int, ...] = (16, 32, 48, 64)
    vocab_size: int = 20
    lr: float = 1e-4
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 50
    patience: int = 5
    clip_norm: float = 10.0
    stop_loss: float = 0.0      # stop once epoch loss < stop_loss and valid CER is 0; 0 disables
    seed: int = 0
    train_data: str = ""
    valid_data: str = ""
    checkpoint: str = ""
    log: str = ""

    def __post_init__(self):
        if self.model not in ("cmam", "crnn"):
            raise ConfigError(f"unknown model kind {self.model!r} (expected cmam or crnn)")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r} (expected one of {sorted(PROFILES)})")
        if self.refinements < 0:
            raise ConfigError("refinements must be >= 0")
        positive = ["mem_slots", "mem_width", "read_heads", "hidden", "feature_width", "vocab_size",
                    "rmsprop_eps", "batch_size", "max_epochs", "patience", "clip_norm"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lr", "stop_loss"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 < self.rmsprop_decay < 1:
            raise ConfigError("rmsprop_decay must lie in (0, 1)")
        if len(self.cnn_channels) != 4 or min(self.cnn_channels) <= 0:
            raise ConfigError(f"cnn_channels needs four positive counts, got {self.cnn_channels}")

    @classmethod
    def for_profile(cls, profile: str = "default", **overrides) -> "TrainConfig":
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r} (expected one of {sorted(PROFILES)})")
        return cls(profile=profile, **{**PROFILES[profile], **overrides})

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def architecture(self) -> dict:
        keys = ["model", "refinements", "mem_slots", "mem_width", "read_heads", "hidden",
                "feature_width", "cnn_channels", "vocab_size"]
        return {k: getattr(self, k) for k in keys}


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            return tuple(int(x) for x in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    """Parse ``key = value`` lines; '#' starts a comment; unknown keys are errors."""
    values: dict = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    profile = values.pop("profile", "default")
    try:
        return TrainConfig.for_profile(profile, **values)
    except TypeError as e:
        raise ConfigError(f"{source}: {e}") from None


def load_config(path) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    cfg = parse_config(p.read_text(encoding="utf-8"), str(p))
    # dataset and checkpoint paths are relative to the config file
    base = p.parent
    fix = {}
    for key in ("train_data", "valid_data", "checkpoint", "log"):
        v = getattr(cfg, key)
        if v and not Path(v).is_absolute():
            fix[key] = str(base / v)
    return cfg.with_(**fix)


def config_diff(a: dict, b: dict) -> list[str]:
    out = []
    for k in sorted(set(a) | set(b)):
        if a.get(k) != b.get(k):
            out.append(f"  {k}: {a.get(k)!r} != {b.get(k)!r}")
    return out
