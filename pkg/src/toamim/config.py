"""Run configuration: one JSON document covering every stage.

Loading is strict: unknown keys anywhere in the document are rejected and
the whole configuration is validated before any stage runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigError, ParameterError
from .heads import FinetuneConfig, PretrainConfig


@dataclass(frozen=True)
class SynthConfig:
    n_train_days: int = 10
    n_eval_days: int = 2
    swaths_per_day: int = 15
    scene_width: int = 512
    scene_height: int = 256
    corr_length: float = 6.0
    cloud_cover: float = 0.4
    n_cols: int = 59
    pixel_km: float = 40.0
    noise_dn: int = 0
    start_date: str = "2000-03-01"


@dataclass(frozen=True)
class CalibrateConfig:
    fit_scaling: bool = True
    reflective_offset: float = 316.97
    thermal_offset: float = 2730.0
    t_ceiling: float = 345.0


@dataclass(frozen=True)
class CompositeConfig:
    n_lat: int = 256
    n_lon: int = 512
    sza_max: float = 72.0
    semi_major: float = 1.5
    semi_minor: float = 1.5
    orientation: float = 0.0
    alpha: float = 1.0
    q_max: float = 1.0
    w_min: float = 1e-6


@dataclass(frozen=True)
class ChipConfig:
    chip_size: int = 64
    stride: int = 32
    max_fill: float = 0.05
    k: int = 8
    kmeans_iters: int = 50
    n_train: int = 512
    n_eval: int = 64


@dataclass(frozen=True)
class ReconstructConfig:
    mask_ratio: float = 0.6
    n_triptychs: int = 4


@dataclass(frozen=True)
class CurtainConfig:
    n_train: int = 700
    n_val: int = 130
    height_bins: int = 32
    max_height_m: float = 16000.0
    corr_length: float = 6.0
    cloud_cover: float = 0.45


@dataclass(frozen=True)
class ScaleStudyConfig:
    # model name -> encoder overrides
    models: dict = field(default_factory=lambda: {"small": {"dims": [12, 24], "heads": [2, 4]}, "default": {}})
    dataset_sizes: tuple[int, ...] = (128, 512)
    pretrain_epochs: int = 50
    finetune_epochs: int = 20


@dataclass(frozen=True)
class RunConfig:
    name: str = "default"
    seed: int = 0
    workers: int = 1
    precision: int = 32
    synth: SynthConfig = field(default_factory=SynthConfig)
    calibrate: CalibrateConfig = field(default_factory=CalibrateConfig)
    composite: CompositeConfig = field(default_factory=CompositeConfig)
    chip: ChipConfig = field(default_factory=ChipConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    reconstruct: ReconstructConfig = field(default_factory=ReconstructConfig)
    curtain: CurtainConfig = field(default_factory=CurtainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    scale_study: ScaleStudyConfig = field(default_factory=ScaleStudyConfig)

    def validate(self) -> None:
        s, c = self.synth, self.chip
        if s.n_train_days < 1 or s.n_eval_days < 1 or s.swaths_per_day < 1:
            raise ConfigError("synth needs at least one train day, one eval day and one swath")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if not 0.0 <= c.max_fill < 1.0 or c.stride < 1 or c.k < 1:
            raise ConfigError("chip: need 0 <= max_fill < 1, stride >= 1, k >= 1")
        if c.n_train < 1 or c.n_eval < 1:
            raise ConfigError("chip: n_train and n_eval must be positive")
        if c.chip_size != self.encoder.chip_size:
            raise ConfigError(f"chip.chip_size {c.chip_size} != encoder.chip_size {self.encoder.chip_size}")
        if c.chip_size > min(self.composite.n_lat, self.composite.n_lon):
            raise ConfigError("chips do not fit in the composite grid")
        if not 0.0 < self.reconstruct.mask_ratio <= 1.0 or not 0.0 < self.pretrain.mask_ratio <= 1.0:
            raise ConfigError("mask ratios must lie in (0, 1]")
        if self.curtain.n_train < 1 or self.curtain.n_val < 1:
            raise ConfigError("curtain splits must be non-empty")
        if self.pretrain.precision != self.precision or self.finetune.precision != self.precision:
            raise ConfigError("stage precision must match the run precision")
        for name, over in self.scale_study.models.items():
            try:
                self.encoder_variant(name)
            except (ParameterError, TypeError) as exc:
                raise ConfigError(f"scale_study model {name!r}: {exc}") from exc
        if not self.scale_study.dataset_sizes or min(self.scale_study.dataset_sizes) < 1:
            raise ConfigError("scale_study.dataset_sizes must be positive")

    def encoder_variant(self, name: str) -> EncoderConfig:
        over = self.scale_study.models[name]
        return EncoderConfig.from_dict({**self.encoder.to_dict(), **over})

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def with_overrides(self, seed: int | None = None, workers: int | None = None,
                       precision: int | None = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=seed)
        if workers is not None:
            cfg = dataclasses.replace(cfg, workers=workers)
        if precision is not None:
            cfg = dataclasses.replace(cfg, precision=precision,
                                      pretrain=dataclasses.replace(cfg.pretrain, precision=precision),
                                      finetune=dataclasses.replace(cfg.finetune, precision=precision))
        cfg.validate()
        return cfg


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) at {path or 'top level'}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        where = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, where)
        elif typing.get_origin(hint) is tuple:
            if not isinstance(value, list):
                raise ConfigError(f"{where} must be a list")
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ParameterError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path | None = None) -> RunConfig:
    """Load a run config from a JSON file.

    ``None`` gives the bundled default; a bare name such as ``"smoke"`` that is
    not an existing file selects the bundled config of that name.
    """
    if path is None:
        path = "default"
    bundled = resources.files("toamim").joinpath(f"configs/{path}.json")
    if not Path(path).exists() and str(path).isidentifier() and bundled.is_file():
        text = bundled.read_text()
        where = f"bundled config {path!r}"
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        where = str(path)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{where} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def bundled_config(name: str) -> RunConfig:
    text = resources.files("toamim").joinpath(f"configs/{name}.json").read_text()
    return config_from_dict(json.loads(text))
