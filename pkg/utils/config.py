"""
Run configuration: one flat key=value file, `section.field` keys.

Lines are tokenized with python-dotenv's parser (comments, quoting and `export` follow
dotenv rules) and validated by pydantic models. Every error names the offending key and
the line it came from; `--set` overrides report their line as "--set".
"""
import io
import logging
import typing
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import pydantic
from dotenv.parser import parse_stream
from pydantic import BaseModel, ConfigDict, Field, model_validator

from services.augmentation import AugmentParams
from services.dataset import SplitConfig
from services.model import BackboneConfig, preset
from services.training import StageSchedule, TrainSettings, default_schedule
from services.wavesim import PlateSpec
from utils.validation import ConfigError

logger = logging.getLogger(__name__)

SET_LINE = "--set"


def _is_tuple(annotation) -> bool:
    if typing.get_origin(annotation) is tuple:
        return True
    return any(_is_tuple(arg) for arg in typing.get_args(annotation))


class _Section(BaseModel):
    """Rejects unknown keys; tuple fields accept comma-separated strings"""
    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="before")
    @classmethod
    def _split_lists(cls, data):
        if not isinstance(data, dict):
            return data
        out = dict(data)
        for name, value in data.items():
            info = cls.model_fields.get(name)
            if info is not None and isinstance(value, str) and _is_tuple(info.annotation):
                out[name] = tuple(part.strip() for part in value.split(",") if part.strip())
        return out


class SimSettings(_Section):
    scan_width_mm: float = 80.0
    scan_height_mm: float = 80.0
    grid_nx: int = 160
    grid_ny: int = 160
    wave_speed_mm_per_us: float = 3.0
    probe_x_mm: float = 40.0
    probe_width_mm: float = 8.0
    source_freq_mhz: float = 0.5
    source_cycles: int = 3
    noise_sigma: float = 0.02
    image_size: int = 64
    n_snapshots: int = Field(128, ge=1)
    stride: int = Field(3, ge=1)
    defect_length_mm: float = Field(20.0, gt=0)
    defect_width_mm: float = Field(1.0, gt=0)
    orientation_deg: float = 0.0
    visibility: float = Field(0.01, ge=0)

    def plate_spec(self) -> PlateSpec:
        return PlateSpec(
            scan_width_mm=self.scan_width_mm,
            scan_height_mm=self.scan_height_mm,
            grid_nx=self.grid_nx,
            grid_ny=self.grid_ny,
            wave_speed_mm_per_us=self.wave_speed_mm_per_us,
            probe_pos=(self.probe_x_mm, 0.0),
            probe_width_mm=self.probe_width_mm,
            source_freq_mhz=self.source_freq_mhz,
            source_cycles=self.source_cycles,
            noise_sigma=self.noise_sigma,
            image_size=self.image_size,
        )


class DataSettings(_Section):
    train_series: Tuple[int, ...] = (1, 2, 6, 7, 9, 10)
    val_series: Tuple[int, ...] = (4, 5)
    test_series: Tuple[int, ...] = (3, 8)
    input_size: int = Field(64, ge=8)

    @model_validator(mode="after")
    def _valid_split(self):
        self.split()
        return self

    def split(self) -> SplitConfig:
        return SplitConfig(train_series=self.train_series, val_series=self.val_series,
                           test_series=self.test_series)


class AugmentSettings(_Section):
    enabled: bool = True
    shift_fraction: float = 0.1
    scale_range: float = 0.1
    rotate_deg: float = 10.0
    crop_range: float = 0.1
    brightness: float = 0.1
    contrast_range: float = 0.25
    gamma_range: float = 0.25
    noise_sigma: float = 0.05
    probability: float = Field(0.5, ge=0, le=1)
    max_retries: int = 10

    def params(self, seed: int) -> Optional[AugmentParams]:
        if not self.enabled:
            return None
        p = self.probability
        return AugmentParams(
            shift_fraction=self.shift_fraction, scale_range=self.scale_range,
            rotate_deg=self.rotate_deg, crop_range=self.crop_range,
            brightness=self.brightness, contrast_range=self.contrast_range,
            gamma_range=self.gamma_range, noise_sigma=self.noise_sigma,
            p_shift=p, p_scale=p, p_rotate=p, p_crop=p,
            p_brightness=p, p_contrast=p, p_gamma=p, p_noise=p,
            max_retries=self.max_retries, seed=seed,
        )


class ModelSettings(_Section):
    preset: Optional[str] = None
    widths: Tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    block_type: Literal["plain", "residual"] = "residual"
    coord_channels: bool = True

    def backbone(self, input_size: int) -> BackboneConfig:
        if self.preset:
            return preset(self.preset, input_size=input_size, block_type=self.block_type,
                          coord_channels=self.coord_channels)
        return BackboneConfig(widths=self.widths, blocks_per_stage=self.blocks_per_stage,
                              block_type=self.block_type, input_size=input_size,
                              coord_channels=self.coord_channels)


class TrainSection(_Section):
    batch_size: int = Field(32, ge=1)
    stage_epochs: Tuple[int, ...] = (10, 10, 10)
    stage_lrs: Tuple[float, ...] = (1e-3, 1e-4, 1e-4)
    warm_start_epochs: int = Field(10, ge=0)
    warm_start_lr: float = Field(1e-3, gt=0)
    metric: Literal["val_loss", "f_at_r"] = "val_loss"

    def schedule(self) -> StageSchedule:
        return default_schedule(self.stage_epochs, self.stage_lrs,
                                self.warm_start_epochs, self.warm_start_lr)


class EvalSettings(_Section):
    r_grid: Optional[Tuple[float, ...]] = None
    select_r: Optional[float] = Field(None, ge=0)
    batch_size: int = Field(64, ge=1)
    split: Literal["train", "val", "test"] = "test"


class BenchSettings(_Section):
    warmup: int = Field(5, ge=0)
    reps: int = Field(50, ge=10)
    images: int = Field(8, ge=1)
    pin_cpu: bool = True
    compare_half_width: bool = True


class RunConfig(_Section):
    seed: int = Field(ge=0)
    workers: int = Field(1, ge=1)
    sim: SimSettings = SimSettings()
    data: DataSettings = DataSettings()
    augment: AugmentSettings = AugmentSettings()
    model: ModelSettings = ModelSettings()
    train: TrainSection = TrainSection()
    eval: EvalSettings = EvalSettings()
    bench: BenchSettings = BenchSettings()

    def select_r(self) -> float:
        if self.eval.select_r is not None:
            return self.eval.select_r
        return 0.25 * self.data.input_size

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            batch_size=self.train.batch_size,
            seed=self.seed,
            metric=self.train.metric,
            select_r=self.select_r(),
            eval_batch_size=self.eval.batch_size,
            augment=self.augment.params(self.seed),
        )


TOP_LEVEL = ("seed", "workers")
SECTIONS: Dict[str, type] = {
    name: info.annotation for name, info in RunConfig.model_fields.items() if name not in TOP_LEVEL
}


def parse_bindings(text: str) -> List[Tuple[str, str, int]]:
    """(key, value, line) for every assignment; comments and blank lines are skipped"""
    bindings = []
    for binding in parse_stream(io.StringIO(text)):
        # dotenv folds preceding blank lines into the binding
        raw = binding.original.string
        line = binding.original.line + raw[:len(raw) - len(raw.lstrip())].count("\n")
        if binding.error:
            raise ConfigError("malformed line", line=line)
        if binding.key is None:
            continue
        if binding.value is None:
            raise ConfigError("missing value", key=binding.key, line=line)
        bindings.append((binding.key, binding.value, line))
    return bindings


def parse_override(text: str) -> Tuple[str, str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like key=value, got '{text}'", line=SET_LINE)
    return key.strip(), value.strip(), SET_LINE


def _place(tree: dict, lines: dict, key: str, value: str, line) -> None:
    if key in TOP_LEVEL:
        tree[key] = value
    else:
        section, dot, name = key.partition(".")
        if not dot or section not in SECTIONS:
            raise ConfigError("unknown section", key=key, line=line)
        if name not in SECTIONS[section].model_fields:
            raise ConfigError("unknown field", key=key, line=line)
        tree.setdefault(section, {})[name] = value
    lines[key] = line


def build_config(bindings: Sequence[Tuple[str, str, Union[int, str]]],
                 overrides: Sequence[Tuple[str, str, str]] = (),
                 seed: Optional[int] = None) -> RunConfig:
    tree: dict = {}
    lines: dict = {}
    for key, value, line in bindings:
        if key in lines:
            raise ConfigError(f"duplicate key (first on line {lines[key]})", key=key, line=line)
        _place(tree, lines, key, value, line)
    for key, value, line in overrides:
        _place(tree, lines, key, value, line)
    if seed is not None:
        tree["seed"] = seed
        lines["seed"] = "--seed"
    if "seed" not in tree:
        raise ConfigError("seed is required (config key or --seed)", key="seed")

    try:
        return RunConfig(**tree)
    except pydantic.ValidationError as e:
        error = e.errors()[0]
        key = ".".join(str(part) for part in error["loc"] if not isinstance(part, int))
        raise ConfigError(error["msg"], key=key or None, line=lines.get(key)) from e
    except ValueError as e:
        raise ConfigError(str(e)) from e


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = (),
                seed: Optional[int] = None) -> RunConfig:
    """
    Read a config file (optional) and apply `--set` overrides and `--seed`.

    Args:
        path: key=value file; None uses built-in defaults
        overrides: "key=value" strings applied after the file
        seed: replaces the seed key when given

    Returns:
        Validated RunConfig
    """
    bindings = []
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        bindings = parse_bindings(path.read_text(encoding="utf-8"))
    config = build_config(bindings, [parse_override(o) for o in overrides], seed)
    logger.debug(f"Config loaded from {path or 'defaults'} with {len(overrides)} overrides")
    return config


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return "" if value is None else str(value)


def dump_config(config: RunConfig) -> str:
    """Resolved config as key=value lines; loading it back yields the same RunConfig"""
    lines = [f"seed={config.seed}", f"workers={config.workers}"]
    for section in SECTIONS:
        for name, value in getattr(config, section).model_dump().items():
            if value is None:
                continue
            lines.append(f"{section}.{name}={_format(value)}")
    return "\n".join(lines) + "\n"
