"""Configuration for confit runs.

Process-level settings come from the environment (and an optional ``.env``
file); run-level settings are frozen dataclasses, either built in code or
parsed from a JSON run-config file with ``load_run_config``. Every value is
validated when the dataclass is constructed, so a bad config fails before any
compute starts.
"""
import json
import math
import os
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from dotenv import load_dotenv

from errors import ConfigError, MissingPathError, SpecError

REPO_ROOT = Path(__file__).resolve().parent.parent
DEFAULT_PRECISION = "f64"
DEFAULT_LOG_LEVEL = "INFO"
DEFAULT_RUNS_DB = "runs.sqlite"

PRECISIONS = {"f32": np.float32, "f64": np.float64}
NORM_MODES = ("shared_bn", "task_bn", "xconv_bn")
SCHEDULE_MODES = ("plain_ft", "hierarchical", "linear_probe_only", "stl")
MOMENT_MODES = ("running", "t_mean", "t_var", "t_both")
RECOVERY_METHODS = ("closed_form", "broadcast")
RUN_CONFIG_SECTIONS = ("train", "schedule", "model", "data")


def resolve_repo_path(value) -> Path:
    """Resolve a path against the repo root unless it is already absolute."""
    path = Path(value).expanduser()
    if not path.is_absolute():
        path = REPO_ROOT / path
    return path.resolve()


def default_precision() -> str:
    """Precision used when a run config does not name one (``CONFIT_PRECISION``)."""
    load_dotenv()
    value = os.getenv("CONFIT_PRECISION", DEFAULT_PRECISION).strip() or DEFAULT_PRECISION
    if value not in PRECISIONS:
        raise ConfigError(f"CONFIT_PRECISION must be one of {sorted(PRECISIONS)}, got {value!r}")
    return value


def log_file_path() -> Path | None:
    load_dotenv()
    value = os.getenv("CONFIT_LOG_FILE", "").strip()
    return resolve_repo_path(value) if value else None


def log_level() -> str:
    load_dotenv()
    return os.getenv("CONFIT_LOG_LEVEL", DEFAULT_LOG_LEVEL).strip().upper() or DEFAULT_LOG_LEVEL


def runs_db_path(out_dir) -> Path:
    """Grid ledger location: ``CONFIT_RUNS_DB`` if set, else inside the output directory."""
    load_dotenv()
    value = os.getenv("CONFIT_RUNS_DB", "").strip()
    if value:
        return resolve_repo_path(value)
    return Path(out_dir) / DEFAULT_RUNS_DB


def _require(condition, message, error=ConfigError):
    if not condition:
        raise error(message)


@dataclass(frozen=True)
class ConvBlock:
    """One Conv -> Norm -> ReLU block of the feature stack."""

    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    bias: bool = False

    def __post_init__(self):
        _require(self.out_channels >= 1, "block out_channels must be >= 1")
        _require(self.kernel >= 1, "block kernel must be >= 1")
        _require(self.stride >= 1, "block stride must be >= 1")
        _require(self.padding >= 0, "block padding must be >= 0")


# 16x16 input: 18x18 (exact recovery), 9x9 (stride 2), 11x11 (exact recovery).
DEFAULT_BLOCKS = (
    ConvBlock(out_channels=8, kernel=3, stride=1, padding=2),
    ConvBlock(out_channels=8, kernel=2, stride=2, padding=0),
    ConvBlock(out_channels=16, kernel=3, stride=1, padding=2),
)


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int] = (1, 16, 16)
    blocks: tuple[ConvBlock, ...] = DEFAULT_BLOCKS

    def __post_init__(self):
        _require(len(self.input_shape) == 3, "model input_shape must be (C, H, W)")
        _require(all(size >= 1 for size in self.input_shape), "model input_shape must be positive")
        _require(len(self.blocks) >= 1, "model needs at least one conv block")


@dataclass(frozen=True)
class StageSchedule:
    """Epoch budget of one task and how it splits across the fine-tuning stages.

    ``fractions`` is (head only, head + norm affine, all parameters). The first
    two stages are floored and the remainder goes to the last one, so the
    stage counts always sum to ``total_epochs``.
    """

    total_epochs: int = 10
    fractions: tuple[float, float, float] = (0.2, 0.3, 0.5)
    mode: str = "hierarchical"

    def __post_init__(self):
        _require(self.total_epochs >= 1, "schedule total_epochs must be >= 1")
        _require(len(self.fractions) == 3, "schedule fractions must have three entries")
        _require(all(0.0 <= value <= 1.0 for value in self.fractions),
                 "schedule fractions must lie in [0, 1]")
        _require(math.isclose(sum(self.fractions), 1.0, abs_tol=1e-9),
                 f"schedule fractions must sum to 1, got {sum(self.fractions)}")
        _require(self.mode in SCHEDULE_MODES, f"schedule mode must be one of {SCHEDULE_MODES}")

    def stage_epochs(self) -> tuple[int, int, int]:
        head = math.floor(self.total_epochs * self.fractions[0] + 1e-9)
        head_norm = math.floor(self.total_epochs * self.fractions[1] + 1e-9)
        head_norm = min(head_norm, self.total_epochs - head)
        return head, head_norm, self.total_epochs - head - head_norm

    @property
    def head_init(self) -> str:
        """Zero heads for probed schedules, small random heads for plain fine-tuning."""
        return "zeros" if self.mode in ("hierarchical", "linear_probe_only") else "uniform"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 32
    seed: int = 0
    precision: str = field(default_factory=default_precision)
    norm_mode: str = "xconv_bn"
    schedule: StageSchedule = field(default_factory=StageSchedule)
    momentum: float = 0.1
    stab_eps: float = 1e-5
    moment_mode: str = "running"
    sgd_momentum: float = 0.0
    weight_decay: float = 0.0
    pretrain_epochs: int = 3
    stage2_trains_norm: bool = True
    recovery: str = "closed_form"
    eval_batch_size: int = 256
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        _require(self.lr > 0, "train lr must be > 0")
        _require(self.batch_size >= 1, "train batch_size must be >= 1")
        _require(self.eval_batch_size >= 1, "train eval_batch_size must be >= 1")
        _require(self.seed >= 0, "train seed must be >= 0")
        _require(self.precision in PRECISIONS,
                 f"train precision must be one of {sorted(PRECISIONS)}")
        _require(self.norm_mode in NORM_MODES, f"train norm_mode must be one of {NORM_MODES}")
        _require(0.0 < self.momentum <= 1.0, "train momentum must lie in (0, 1]")
        _require(self.stab_eps > 0, "train stab_eps must be > 0")
        _require(self.moment_mode in MOMENT_MODES,
                 f"train moment_mode must be one of {MOMENT_MODES}")
        _require(0.0 <= self.sgd_momentum < 1.0, "train sgd_momentum must lie in [0, 1)")
        _require(self.weight_decay >= 0, "train weight_decay must be >= 0")
        _require(self.pretrain_epochs >= 0, "train pretrain_epochs must be >= 0")
        _require(self.recovery in RECOVERY_METHODS,
                 f"train recovery must be one of {RECOVERY_METHODS}")

    @property
    def dtype(self):
        return np.dtype(PRECISIONS[self.precision])


@dataclass(frozen=True)
class TaskSequenceSpec:
    """Shape of a synthetic task sequence; ``pretext_classes = 0`` disables pretraining data."""

    num_tasks: int = 5
    classes_per_task: int = 4
    train_per_class: int = 100
    test_per_class: int = 50
    channels: int = 1
    height: int = 16
    width: int = 16
    prototype_scale: float = 1.0
    noise_scale: float = 1.0
    cutoff: int = 3
    pretext_classes: int = 8
    seed: int = 0

    def __post_init__(self):
        counts = {
            "num_tasks": self.num_tasks,
            "classes_per_task": self.classes_per_task,
            "train_per_class": self.train_per_class,
            "test_per_class": self.test_per_class,
            "channels": self.channels,
        }
        for name, value in counts.items():
            _require(value >= 1, f"data {name} must be >= 1, got {value}", SpecError)
        _require(self.height >= 2 and self.width >= 2,
                 f"data images must be at least 2x2, got {self.height}x{self.width}", SpecError)
        _require(self.prototype_scale > 0, "data prototype_scale must be > 0", SpecError)
        _require(self.noise_scale >= 0, "data noise_scale must be >= 0", SpecError)
        _require(1 <= self.cutoff <= min(self.height, self.width) // 2,
                 "data cutoff must lie in [1, min(H, W) // 2]", SpecError)
        _require(self.pretext_classes >= 0, "data pretext_classes must be >= 0", SpecError)
        _require(self.seed >= 0, "data seed must be >= 0", SpecError)


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: TaskSequenceSpec = field(default_factory=TaskSequenceSpec)

    def to_dict(self) -> dict:
        return {
            "train": {key: value for key, value in asdict(self.train).items()
                      if key not in ("schedule", "model")},
            "schedule": asdict(self.train.schedule),
            "model": asdict(self.train.model),
            "data": asdict(self.data),
        }


def _default_of(spec_field):
    if spec_field.default is not MISSING:
        return spec_field.default
    if spec_field.default_factory is not MISSING:
        return spec_field.default_factory()
    return None


def _coerce(value, default, where):
    """Check a JSON value against the type of the field's default and convert it."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        if len(default) == 0:
            return tuple(value)
        return tuple(_coerce(item, default[0], f"{where}[{index}]")
                     for index, item in enumerate(value))
    raise ConfigError(f"{where} cannot be set from a config file")


def _build(cls, mapping, section, **fixed):
    if not isinstance(mapping, dict):
        raise ConfigError(f"[{section}] must be an object")
    known = {spec_field.name: spec_field for spec_field in fields(cls)
             if spec_field.name not in fixed}
    unknown = sorted(set(mapping) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    values = {}
    for name, value in mapping.items():
        default = _default_of(known[name])
        if default is None:
            default = 0 if known[name].type is int else ""
        values[name] = _coerce(value, default, f"{section}.{name}")
    try:
        return cls(**values, **fixed)
    except TypeError as error:
        raise ConfigError(f"[{section}]: {error}") from error


def _build_model(mapping) -> ModelConfig:
    if not isinstance(mapping, dict):
        raise ConfigError("[model] must be an object")
    mapping = dict(mapping)
    blocks = mapping.pop("blocks", None)
    fixed = {}
    if blocks is not None:
        if not isinstance(blocks, list):
            raise ConfigError("model.blocks must be a list of objects")
        fixed["blocks"] = tuple(_build(ConvBlock, block, f"model.blocks[{index}]")
                                for index, block in enumerate(blocks))
    return _build(ModelConfig, mapping, "model", **fixed)


def parse_run_config(document) -> RunConfig:
    if not isinstance(document, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = sorted(set(document) - set(RUN_CONFIG_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s) in run config: {', '.join(unknown)}")
    schedule = _build(StageSchedule, document.get("schedule", {}), "schedule")
    model = _build_model(document.get("model", {}))
    train = _build(TrainConfig, document.get("train", {}), "train", schedule=schedule, model=model)
    data = _build(TaskSequenceSpec, document.get("data", {}), "data")
    return RunConfig(train=train, data=data)


def parse_data_spec(document) -> TaskSequenceSpec:
    """A bare data-spec object, or the ``data`` section of a run config."""
    if isinstance(document, dict) and set(document) & set(RUN_CONFIG_SECTIONS):
        return parse_run_config(document).data
    return _build(TaskSequenceSpec, document, "data")


def load_json_config(path):
    path = Path(path)
    if not path.is_file():
        raise MissingPathError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as error:
        raise ConfigError(f"config file {path} is not valid JSON: {error}") from error


def load_run_config(path) -> RunConfig:
    return parse_run_config(load_json_config(path))
