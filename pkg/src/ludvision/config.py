"""Run configuration: ``key = value`` lines with ``#`` comments.

Every key, with its default:

    manifest            ""        CSV of image,mask[,group] paths (relative to the CSV)
    val_fraction        0.2       share of each group held out for validation
    epochs              10
    batch_size          1
    crop_size           0         random square training crops; 0 trains on whole images
    lr                  0.01      base learning rate, polynomial decay
    poly_power          0.9
    momentum            0.9
    weight_decay        0.0
    augment_flips       false     random horizontal/vertical flips
    val_tile            0         tile size for validation inference; 0 = untiled
    val_overlap         32
    seed                0         model initialization and data order

plus every model hyperparameter (``in_channels``, ``num_classes``,
``branch_widths``, ``blocks_per_branch``, ``stem_downsample``,
``stage1_fusion_stride``, ``other_fusion_stride``, ``dilated_stages``,
``dilation``, ``ocr_enabled``, ``ocr_key_channels``, ``ocr_mid_channels``,
``aux_loss_weight``) with the defaults of :class:`ModelConfig`.
Tuples are written comma-separated.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError
from .model import ModelConfig

_MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig) if f.name not in ("seed", "num_stages"))


@dataclass(frozen=True)
class RunConfig:
    manifest: str = ""
    val_fraction: float = 0.2
    epochs: int = 10
    batch_size: int = 1
    crop_size: int = 0
    lr: float = 0.01
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0
    augment_flips: bool = False
    val_tile: int = 0
    val_overlap: int = 32
    seed: int = 0
    model: ModelConfig = ModelConfig()

    def __post_init__(self):
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.crop_size < 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and crop_size >= 0 required")
        if self.lr < 0 or self.momentum < 0:
            raise ConfigError("lr and momentum must be non-negative")

    def model_config(self) -> ModelConfig:
        return dataclasses.replace(self.model, seed=self.seed)

    # -- text form --------------------------------------------------------

    def items(self):
        for f in dataclasses.fields(self):
            if f.name != "model":
                yield f.name, getattr(self, f.name)
        for key in _MODEL_KEYS:
            yield key, getattr(self.model, key)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        run_types = {f.name: f.default for f in dataclasses.fields(cls) if f.name != "model"}
        model_defaults = ModelConfig()
        run_vals, model_vals = {}, {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in run_types:
                target, default = run_vals, run_types[key]
            elif key in _MODEL_KEYS:
                target, default = model_vals, getattr(model_defaults, key)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in target:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            try:
                target[key] = _parse(value, default)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: {key}: {exc}") from None
        model = dataclasses.replace(model_defaults, **model_vals)
        return cls(model=model, **run_vals)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse(text: str, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(x) for x in text.split(",") if x.strip())
    return text
