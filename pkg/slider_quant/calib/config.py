from pathlib import Path
import dataclasses as dc
import typing as t

import slider_quant.core.datafiles.serialization as ser
import slider_quant.core.logging as logging
import slider_quant.quant.quantizer as qz
from slider_quant.core.errors import ConfigError
from slider_quant.model.quantized import FP_ACTIVATION_BITS, activation_spec
from slider_quant.quant.schedule import ScheduleConfig

logger = logging.get_logger(__name__)

WEIGHT_BITS = (2, 3, 4, 8, 16)
ACTIVATION_BITS = (4, 8, 16)
GROUP_CHOICES = ("channel", "32", "64", "128", "256")
TARGET_STREAMS = ("quant", "fp")
OBJECTIVES = ("block", "linear")

DEFAULT_EPOCHS = 20
LOW_BIT_EPOCHS = 60


@dc.dataclass(frozen=True)
class CalibConfig:
    """Calibration run configuration; defaults follow the SliderQuant hyper-parameter table at desk scale."""
    wbits: int = 4
    abits: int = 4
    group: str = "channel"
    ls: int = 4
    ld: int = 4
    s: int = 2
    i: int = 1
    gamma: float = 0.5
    rank: int = 4
    epochs: t.Optional[int] = None
    batch_size: int = 4
    lr_scale: float = 1e-3
    lr_lora: float = 1e-4
    weight_decay: float = 0.0
    calib_samples: int = 32
    calib_tokens: int = 128
    target_stream: str = "quant"
    objective: str = "block"
    repeats: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "group", str(self.group))
        if self.wbits not in WEIGHT_BITS:
            raise ConfigError(f"wbits in {WEIGHT_BITS} violated: {self.wbits}")
        if self.abits not in ACTIVATION_BITS:
            raise ConfigError(f"abits in {ACTIVATION_BITS} violated: {self.abits}")
        if str(self.group) not in GROUP_CHOICES:
            raise ConfigError(f"group in {GROUP_CHOICES} violated: {self.group}")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError(f"epochs >= 1 violated: {self.epochs}")
        if self.lr_scale <= 0 or self.lr_lora <= 0:
            raise ConfigError(f"lrs > 0 violated: lr_scale={self.lr_scale}, lr_lora={self.lr_lora}")
        if self.batch_size < 1 or self.rank < 1 or self.repeats < 1:
            raise ConfigError(f"batch_size, rank, repeats >= 1 violated: "
                              f"{self.batch_size}, {self.rank}, {self.repeats}")
        if self.target_stream not in TARGET_STREAMS:
            raise ConfigError(f"target_stream in {TARGET_STREAMS} violated: {self.target_stream}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective in {OBJECTIVES} violated: {self.objective}")

    @property
    def resolved_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return LOW_BIT_EPOCHS if self.wbits == 2 else DEFAULT_EPOCHS

    @property
    def group_size(self) -> int:
        return 0 if self.group == "channel" else int(self.group)

    @property
    def needs_calibration(self) -> bool:
        return self.wbits < 16 or self.abits < FP_ACTIVATION_BITS

    def weight_spec(self) -> qz.QuantSpec:
        if self.group_size:
            return qz.QuantSpec.group_wise(self.wbits, self.group_size, axis=0)
        return qz.QuantSpec.per_channel(self.wbits, axis=1)

    def activation_spec(self) -> t.Optional[qz.QuantSpec]:
        return activation_spec(self.abits)

    def schedule_config(self, num_layers: int, pesw: bool = True, pcsw: bool = True,
                        gamma: t.Optional[float] = None) -> ScheduleConfig:
        return ScheduleConfig(L=num_layers, L_s=self.ls, L_d=self.ld, s=self.s, i=self.i,
                              gamma=self.gamma if gamma is None else gamma, pesw=pesw, pcsw=pcsw)

    def check_model(self, d_model: int, d_ff: int) -> None:
        """Group-wise weights need the group size to divide every linear's input width."""
        if self.group_size:
            for width in sorted({d_model, d_ff}):
                if width % self.group_size != 0:
                    raise ConfigError(f"group_size {self.group_size} must divide linear input width {width}")


def load_calib_config(config_path: t.Union[str, Path]) -> CalibConfig:
    return load_config(CalibConfig, config_path)


def save_calib_config(config: CalibConfig, config_path: t.Union[str, Path]) -> Path:
    ser.save_json(ser.serialize_dataclass(config), config_path)
    logger.debug(f"Saved calibration config: {config_path}")
    return Path(config_path)


QuantizeConfig = CalibConfig

PROBE_MODES = ("single", "prefix")
PROBE_METHODS = ("rtn", "calibrated")
ABLATION_GRIDS = ("components", "repeats", "window")
BASELINE_KINDS = ("rtn", "layerwise", "blockwise", "fixed")


@dc.dataclass(frozen=True)
class ProbeConfig:
    calib: CalibConfig = dc.field(default_factory=CalibConfig)
    mode: str = "single"
    method: str = "rtn"
    layers: t.Optional[t.List[int]] = None
    jobs: int = 1

    def __post_init__(self):
        if self.mode not in PROBE_MODES:
            raise ConfigError(f"mode in {PROBE_MODES} violated: {self.mode}")
        if self.method not in PROBE_METHODS:
            raise ConfigError(f"method in {PROBE_METHODS} violated: {self.method}")
        if self.jobs < 1:
            raise ConfigError(f"jobs >= 1 violated: {self.jobs}")


@dc.dataclass(frozen=True)
class AblateConfig:
    calib: CalibConfig = dc.field(default_factory=CalibConfig)
    grid: str = "components"
    max_repeats: int = 4
    jobs: int = 1

    def __post_init__(self):
        if self.grid not in ABLATION_GRIDS:
            raise ConfigError(f"grid in {ABLATION_GRIDS} violated: {self.grid}")
        if self.max_repeats < 1 or self.jobs < 1:
            raise ConfigError(f"max_repeats, jobs >= 1 violated: {self.max_repeats}, {self.jobs}")


def load_config(config_cls: t.Type, config_path: t.Union[str, Path]) -> t.Any:
    """Load any run config dataclass, rejecting unknown keys."""
    config_path = Path(config_path)
    if not config_path.exists():
        raise FileNotFoundError(f"Config file not found: {config_path}")
    return ser.deserialize_dataclass(config_cls, ser.load_json(config_path), strict=True)
