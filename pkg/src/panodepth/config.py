"""Model and training configuration, plus the flat key=value config format.

Unknown keys are hard errors so a typo can never silently fall back to a
default. Reserved keys (weight_decay, lr_schedule, augmentation, grad_clip)
are accepted only at their no-op values: the trainer implements none of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for the two-branch depth network."""

    h: int = 256                      # panorama height; width is always 2*h
    p: int = 16                       # patch size on each cubemap face
    k: int = 12                       # transformer block count
    taps: tuple = (4, 7, 10, 12)      # 1-indexed blocks feeding pyramid levels 1..4
    d: int = 256                      # token width
    heads: int = 8
    mlp_ratio: int = 4
    level_channels: tuple = (64, 128, 256, 512)
    fusion_mode: str = "gated"

    @property
    def w(self) -> int:
        return 2 * self.h

    @property
    def face_size(self) -> int:
        return self.h // 2

    @property
    def tokens(self) -> int:
        # 6 faces, each (H/2 / p)^2 patches
        return 6 * (self.h // 2) ** 2 // (self.p ** 2)

    @property
    def face_grid(self) -> int:
        return self.h // (2 * self.p)

    def level_shape(self, level: int) -> tuple:
        """(channels, height, width) of pyramid level 1..4."""
        f = 2 ** (level + 1)
        return (self.level_channels[level - 1], self.h // f, self.w // f)

    def validate(self) -> "ModelConfig":
        if self.h < 32 or self.h % 32 != 0:
            raise ConfigError(f"h must be a positive multiple of 32, got {self.h}")
        if not _is_pow2(self.p):
            raise ConfigError(f"patch size must be a power of two, got {self.p}")
        if (self.h // 2) % self.p != 0:
            raise ConfigError(f"face size {self.h // 2} not divisible by patch size {self.p}")
        if self.d % self.heads != 0:
            raise ConfigError(f"token width {self.d} not divisible by {self.heads} heads")
        if len(self.taps) != 4 or list(self.taps) != sorted(self.taps):
            raise ConfigError(f"taps must be 4 ascending block indices, got {self.taps}")
        if len(set(self.taps)) != 4:
            raise ConfigError(f"taps must be distinct, got {self.taps}")
        if self.taps[0] < 1 or self.taps[-1] > self.k:
            raise ConfigError(f"taps {self.taps} out of range 1..{self.k}")
        if len(self.level_channels) != 4 or any(c < 1 for c in self.level_channels):
            raise ConfigError(f"level_channels must be 4 positive ints, got {self.level_channels}")
        if self.fusion_mode not in ("gated", "concat"):
            raise ConfigError(f"fusion_mode must be 'gated' or 'concat', got {self.fusion_mode!r}")
        if self.mlp_ratio < 1 or self.k < 1:
            raise ConfigError("mlp_ratio and k must be positive")
        return self


@dataclass
class TrainConfig:
    """Optimizer, data and run settings. Desk-scale defaults; the full-scale
    values (batch 8, 80 epochs, 512-wide panoramas) remain settable."""

    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 2
    epochs: int = 80
    steps: int = 0                    # if > 0, overrides epochs as the step budget
    seed: int = 0
    berhu_t: float = 0.2
    data: str = "synth"               # dataset root, or "synth" for generated scenes
    synth_count: int = 8
    depth_scale: float = 4000.0       # 16-bit PNG depth units per meter
    eval_every: int = 100
    checkpoint: str = "model.ckpt"
    dtype: str = "float64"
    # reserved, must stay at their no-op values
    weight_decay: float = 0.0
    lr_schedule: str = "none"
    augmentation: str = "none"
    grad_clip: float = 0.0

    def validate(self) -> "TrainConfig":
        self.model.validate()
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.berhu_t <= 0:
            raise ConfigError(f"berhu_t must be positive, got {self.berhu_t}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.weight_decay != 0.0:
            raise ConfigError("weight_decay is reserved and not implemented; leave it at 0")
        if self.lr_schedule != "none":
            raise ConfigError("lr_schedule is reserved and not implemented; leave it at 'none'")
        if self.augmentation != "none":
            raise ConfigError("augmentation is reserved and not implemented; leave it at 'none'")
        if self.grad_clip != 0.0:
            raise ConfigError("grad_clip is reserved and not implemented; leave it at 0")
        return self


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"model"}

_INT_TUPLE_KEYS = {"taps", "level_channels"}
_STR_KEYS = {"fusion_mode", "data", "checkpoint", "dtype", "lr_schedule", "augmentation"}
_FLOAT_KEYS = {"lr", "beta1", "beta2", "adam_eps", "berhu_t", "depth_scale",
               "weight_decay", "grad_clip"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _INT_TUPLE_KEYS:
        try:
            return tuple(int(tok) for tok in raw.split(","))
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated ints, got {raw!r}") from None
    if key in _STR_KEYS:
        return raw
    if key in _FLOAT_KEYS:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a float, got {raw!r}") from None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an int, got {raw!r}") from None


def parse_config_text(text: str) -> TrainConfig:
    """Parse flat key=value lines ('#' comments allowed) into a TrainConfig."""
    model_kwargs = {}
    train_kwargs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key in _MODEL_KEYS:
            model_kwargs[key] = _parse_value(key, raw)
        elif key in _TRAIN_KEYS:
            train_kwargs[key] = _parse_value(key, raw)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    cfg = TrainConfig(model=ModelConfig(**model_kwargs), **train_kwargs)
    return cfg.validate()


def load_config(path: str) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def model_config_text(cfg: ModelConfig) -> str:
    """Serialize a ModelConfig as key=value lines (checkpoint header block)."""
    lines = []
    for f in fields(ModelConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def model_config_from_text(text: str) -> ModelConfig:
    kwargs = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, raw = line.split("=", 1)
        if key not in _MODEL_KEYS:
            raise ConfigError(f"unknown model config key {key!r}")
        kwargs[key] = _parse_value(key, raw)
    return ModelConfig(**kwargs).validate()


def with_model(cfg: TrainConfig, **model_kwargs) -> TrainConfig:
    return replace(cfg, model=replace(cfg.model, **model_kwargs))
