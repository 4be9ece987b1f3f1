"""Run configuration: dataclasses plus a plain ``key = value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 0.01
    momentum: float = 0.9
    batch: int = 8                   # groundtruths sampled per image and step
    jitter_sigma: float = 0.1
    no_shape: bool = False
    no_embed: bool = False
    width: int = 32
    prior_mode: str = "class-agnostic"
    k: int = 12
    seed: int = 0
    loss_prior: float = 1.0
    loss_coarse: float = 1.0
    loss_fine: float = 1.0
    grad_clip: float = 5.0           # global L2 norm; 0 disables
    image_side: int = 256
    max_level: int = 3
    min_level: int = 1
    threshold: float = 0.5
    kmeans_iter: int = 100
    feature_seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be non-negative, got {self.steps}")
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.batch <= 0 or self.width <= 0 or self.k <= 0:
            raise ValueError("batch, width and k must be positive")
        if self.image_side & (self.image_side - 1):
            raise ValueError(f"image_side must be a power of two, got {self.image_side}")
        if not 0 <= self.min_level <= self.max_level:
            raise ValueError("need 0 <= min_level <= max_level")

    @property
    def patch_side(self) -> int:
        return self.image_side // 2 ** self.max_level

    @property
    def levels(self) -> range:
        return range(self.min_level, self.max_level + 1)

    @property
    def loss_weights(self) -> tuple[float, float, float]:
        return (self.loss_prior, self.loss_coarse, self.loss_fine)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class DataConfig:
    train_scenes: int = 300
    test_scenes: int = 100
    min_instances: int = 1
    max_instances: int = 4
    seed: int = 0
    test_seed: int = 1000


# desk-scale presets; "experiment" shrinks the patch to 16 cells so the
# multi-model harnesses (ablation, sweeps, robustness) stay within CPU budgets
PRESETS = {
    "default": {},
    "experiment": {"image_side": 128, "max_level": 3, "min_level": 0, "steps": 1500},
}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out: str = "runs"

    def as_items(self) -> list[tuple[str, object]]:
        items = [(f.name, getattr(self.train, f.name)) for f in fields(TrainConfig)]
        items += [(f.name, getattr(self.data, f.name)) for f in fields(DataConfig)]
        return items + [("out", self.out)]

    def dump(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.as_items())


def _coerce(raw: str, typ):
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "bool": bool, "str": str}[typ]
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return typ(raw.strip())


def apply_overrides(cfg: RunConfig, items: dict[str, str]) -> RunConfig:
    """Return a new RunConfig with string values applied; unknown keys raise."""
    train_types = {f.name: f.type for f in fields(TrainConfig)}
    data_types = {f.name: f.type for f in fields(DataConfig)}
    tr, da, out = {}, {}, cfg.out
    for key, raw in items.items():
        if key in train_types:
            tr[key] = _coerce(raw, train_types[key])
        elif key in data_types:
            da[key] = _coerce(raw, data_types[key])
        elif key == "out":
            out = raw.strip()
        else:
            raise KeyError(f"unknown config key {key!r}")
    return RunConfig(dataclasses.replace(cfg.train, **tr), dataclasses.replace(cfg.data, **da), out)


def parse_config_text(text: str) -> dict[str, str]:
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return items


def load_config(path=None, overrides: dict[str, str] | None = None, preset: str = "default") -> RunConfig:
    cfg = apply_overrides(RunConfig(), {k: str(v) for k, v in PRESETS[preset].items()})
    if path is not None:
        cfg = apply_overrides(cfg, parse_config_text(Path(path).read_text()))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg
