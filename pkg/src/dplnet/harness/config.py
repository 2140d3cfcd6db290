"""Run configuration: ``key=value`` text with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from ..backbone import PRESETS, ConfigError
from ..model import DPLNetConfig, dplnet_config
from ..prompts import PromptConfig
from ..tensor_core import OPTIMIZERS

EVAL_MODES = ("ss", "ms_flip")


class RunConfigError(ConfigError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    preset: str = "toy"
    num_classes: int = 5
    decoder_dim: int = 0  # 0 picks the preset default
    beta: int = 4
    theta: int = 32
    num_tokens: int = 30
    token_dim: int = 32
    mfa_heads: int = 1
    mpg_stages: tuple[int, ...] = (1, 2, 3, 4)
    mfa_stages: tuple[int, ...] = (1, 2, 3, 4)
    freeze_decoder: bool = False
    full_finetune: bool = False
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 5e-4
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 8
    crop_size: int = 64
    flip_p: float = 0.5
    scale_min: float = 0.5
    scale_max: float = 2.0
    seed: int = 0
    train_manifest: str = ""
    val_manifest: str = ""
    eval_mode: str = "ss"
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise RunConfigError("preset", f"unknown preset {self.preset!r}")
        if self.optimizer not in OPTIMIZERS:
            raise RunConfigError("optimizer", f"must be one of {OPTIMIZERS}")
        if self.eval_mode not in EVAL_MODES:
            raise RunConfigError("eval_mode", f"must be one of {EVAL_MODES}")
        if self.lr < 0:
            raise RunConfigError("lr", "must be non-negative")
        for key in ("epochs", "batch_size", "crop_size"):
            if getattr(self, key) < 1:
                raise RunConfigError(key, "must be >= 1")
        if not 0.0 <= self.flip_p <= 1.0:
            raise RunConfigError("flip_p", "must lie in [0, 1]")
        if not 0 < self.scale_min <= self.scale_max:
            raise RunConfigError("scale_min", "need 0 < scale_min <= scale_max")
        n = PRESETS[self.preset].num_stages
        for key in ("mpg_stages", "mfa_stages"):
            stages = getattr(self, key)
            if any(not 1 <= s <= n for s in stages) or len(set(stages)) != len(stages):
                raise RunConfigError(key, f"stages must be distinct values in 1..{n}")

    def prompt_config(self) -> PromptConfig:
        n = PRESETS[self.preset].num_stages
        return PromptConfig(
            beta=self.beta, theta=self.theta, num_tokens=self.num_tokens, token_dim=self.token_dim,
            mfa_heads=self.mfa_heads,
            mpg_stages=tuple(i in self.mpg_stages for i in range(1, n + 1)),
            mfa_stages=tuple(i in self.mfa_stages for i in range(1, n + 1)),
        )

    def model_config(self) -> DPLNetConfig:
        return dplnet_config(self.preset, num_classes=self.num_classes, prompts=self.prompt_config(),
                             input_size=(self.crop_size, self.crop_size), decoder_dim=self.decoder_dim or None)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_stages(text: str) -> tuple[int, ...]:
    text = text.strip()
    if text.lower() in ("", "none"):
        return ()
    return tuple(int(t) for t in text.split(","))


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_PARSERS = {"int": int, "float": float, "str": str, "bool": _parse_bool, "tuple[int, ...]": _parse_stages}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value) if value else "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_pairs(pairs, base: RunConfig | None = None) -> RunConfig:
    """Apply ``(key, raw_value)`` pairs on top of ``base`` (or the defaults)."""
    changes = {}
    for key, raw in pairs:
        if key not in _FIELD_TYPES:
            raise RunConfigError(key, "unknown configuration key")
        try:
            changes[key] = _PARSERS[_FIELD_TYPES[key]](raw.strip())
        except ValueError as exc:
            raise RunConfigError(key, f"bad value {raw.strip()!r} ({exc})") from None
    base = base or RunConfig()
    return base.replace(**changes)


def split_line(line: str, where: str = "") -> tuple[str, str] | None:
    line = line.split("#", 1)[0].strip()
    if not line:
        return None
    if "=" not in line:
        raise RunConfigError(line, f"expected key=value{where}")
    key, value = line.split("=", 1)
    return key.strip(), value


def parse_config(text: str = "", overrides=(), base: RunConfig | None = None) -> RunConfig:
    pairs = []
    for n, line in enumerate(text.splitlines(), start=1):
        kv = split_line(line, f" on line {n}")
        if kv:
            pairs.append(kv)
    for item in overrides:
        kv = split_line(item)
        if kv:
            pairs.append(kv)
    return parse_pairs(pairs, base)


def load_config(path=None, overrides=()) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, overrides)


def serialize(cfg: RunConfig) -> str:
    """Canonical text form: every key, declaration order."""
    return "".join(f"{f.name}={_format(getattr(cfg, f.name))}\n" for f in fields(RunConfig))
