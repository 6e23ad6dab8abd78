import logging
import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigurationError, DataFormatError

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)


class LossWeights(BaseModel):
    """Loss coefficients; defaults follow the desk-scale chair setting"""
    model_config = ConfigDict(extra="forbid")

    gamma1: float = Field(1000.0, ge=0, description="part deformation consistency, geometry")
    gamma2: float = Field(50.0, ge=0, description="part deformation consistency, semantics")
    gamma3: float = Field(100.0, ge=0, description="global scale consistency")
    gamma4: float = Field(50.0, ge=0, description="global deformation consistency (Chamfer)")
    gamma5: float = Field(5.0, ge=0, description="deformation smoothness")
    gamma6: float = Field(100.0, ge=0, description="template normal consistency")
    gamma7: float = Field(50.0, ge=0, description="minimal SDF correction")
    gamma8: float = Field(1e6, ge=0, description="latent code / part prior l2")
    delta: float = Field(100.0, gt=1, description="off-surface sharpness")
    uncertainty_gamma: float = Field(10.0, ge=0, description="correspondence uncertainty modulation")
    scale_mode: Literal["per_shape", "pooled"] = "per_shape"
    emb_reduction: Literal["sum", "mean"] = "mean"

    @property
    def pairwise_active(self) -> bool:
        """Whether any term needs a pair of shapes"""
        return self.gamma1 > 0 or self.gamma2 > 0 or self.gamma4 > 0


class FieldConfig(BaseModel):
    """Network dimensions for the template and deformation fields"""
    model_config = ConfigDict(extra="forbid")

    latent_dim: int = Field(256, ge=1)
    prior_dim: int = Field(64, ge=1)
    n_parts: Optional[int] = Field(None, ge=2, description="k; inferred from the dataset when unset")
    template_hidden: int = Field(128, ge=1)
    template_layers: int = Field(5, ge=2)
    deform_hidden: int = Field(128, ge=1)
    deform_layers: int = Field(6, ge=2)
    hyper_hidden: int = Field(64, ge=1)
    hyper_layers: int = Field(3, ge=2)
    omega0: float = Field(30.0, gt=0)
    sdc_mode: Literal["soft", "hard"] = "soft"
    init_std: float = Field(0.01, ge=0)


class TrainConfig(BaseModel):
    """Optimisation schedule; desk-scale defaults"""
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(1000, ge=0)
    max_steps: Optional[int] = Field(2000, ge=0)
    batch_size: int = Field(8, ge=1)
    surface_points: int = Field(512, ge=1)
    query_points: int = Field(512, ge=1)
    lr: float = Field(1e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    clip_norm: Optional[float] = Field(10.0, gt=0)
    seed: int = 0
    log_every: int = Field(1, ge=1)
    fit_steps: int = Field(300, ge=0)
    fit_lr: float = Field(1e-3, gt=0)


class RunConfig(BaseModel):
    """Everything a training run needs"""
    model_config = ConfigDict(extra="forbid")

    dataset: str = "data"
    output_dir: str = "runs/default"
    run_db: Optional[str] = "runs.db"
    mesh_resolution: int = Field(64, ge=2)
    field: FieldConfig = Field(default_factory=FieldConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    weights: LossWeights = Field(default_factory=LossWeights)

    @model_validator(mode="after")
    def check_batch_pairs(self) -> "RunConfig":
        if self.weights.pairwise_active and self.train.batch_size < 2:
            raise ValueError("batch_size must be >= 2 when a pairwise loss weight is positive")
        return self


_SECTIONS = ("field", "train", "weights")


def parse_config_text(text: str) -> Dict[str, str]:
    """Parse 'key = value' lines with '#' comments into a flat mapping"""
    entries: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"Config line {lineno}: expected 'key = value', got '{raw}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise DataFormatError(f"Config line {lineno}: empty key")
        if key in entries:
            raise DataFormatError(f"Config line {lineno}: duplicate key '{key}'")
        entries[key] = value
    return entries


def _coerce(value: str) -> Any:
    lowered = value.lower()
    if lowered in ("none", "null", ""):
        return None
    return value


def build_config(entries: Dict[str, str]) -> RunConfig:
    """Nest flat 'section.key' entries and validate them"""
    nested: Dict[str, Any] = {}
    for key, value in entries.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ConfigurationError(f"Unknown config section '{section}' in key '{key}'")
            nested.setdefault(section, {})[name] = _coerce(value)
        else:
            nested[key] = _coerce(value)

    try:
        config = RunConfig.model_validate(nested)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {e}") from e

    _echo_defaults(config, entries)
    return config


def _echo_defaults(config: RunConfig, entries: Dict[str, str]) -> None:
    for name, value in config.model_dump().items():
        if isinstance(value, dict):
            for sub, sub_value in value.items():
                key = f"{name}.{sub}"
                if key not in entries:
                    logger.info(f"Config default: {key} = {sub_value}")
        elif name not in entries:
            logger.info(f"Config default: {name} = {value}")


def load_config(path: Union[str, Path]) -> RunConfig:
    """Read and validate a run configuration file"""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Config file not found: {path}")
    return build_config(parse_config_text(path.read_text(encoding="utf-8")))


def format_config(config: RunConfig) -> str:
    """Render a configuration back to the flat file format"""
    lines = []
    for name, value in config.model_dump().items():
        if isinstance(value, dict):
            for sub, sub_value in value.items():
                lines.append(f"{name}.{sub} = {sub_value}")
        else:
            lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def worker_count() -> int:
    """Thread cap from PDC_THREADS (defaults to the CPU count)"""
    raw = os.getenv("PDC_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning(f"Ignoring non-integer PDC_THREADS={raw!r}")
    return os.cpu_count() or 1
