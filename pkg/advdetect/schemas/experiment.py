"""Experiment configuration: one flat ``key = value`` file, dataset-dependent defaults, CLI overrides."""
import hashlib
import pathlib
import re
import typing

from pydantic import BaseModel, ValidationError, field_validator, model_validator

from advdetect.config import settings
from advdetect.exceptions import ConfigError
from advdetect.schemas.attack import AttackName
from advdetect.schemas.network import DatasetId

# "#" opens a comment only at line start or after whitespace
_COMMENT = re.compile(r"(?:^|\s)#")

ALL_ATTACKS = [AttackName.fgsm, AttackName.bim, AttackName.pgd, AttackName.deepfool, AttackName.cw]

# Training tables, evaluation eps headers and closeness eps per dataset
DATASET_DEFAULTS: dict[DatasetId, dict] = {
    DatasetId.mnist_digit: {
        "cnn_epochs": 10, "cnn_batch_size": 64,
        "mlp_epochs": 50,
        "eps": [0.12, 0.30], "closeness_eps": 0.2,
    },
    DatasetId.mnist_fashion: {
        "cnn_epochs": 10, "cnn_batch_size": 64,
        "mlp_epochs": 50,
        "eps": [0.03, 0.12], "closeness_eps": 0.07,
    },
    DatasetId.cifar10: {
        "cnn_epochs": 50, "cnn_batch_size": 128,
        "mlp_epochs": 150,
        "eps": [0.02, 0.04], "closeness_eps": 0.03,
    },
}


class ExperimentConfig(BaseModel):
    dataset: DatasetId
    data_dir: str = ""
    out_dir: str = ""

    # CNN / closeness MLP training
    cnn_epochs: int
    cnn_batch_size: int
    cnn_lr: float = 0.001
    mlp_epochs: int
    mlp_batch_size: int = 128
    mlp_lr: float = 0.001
    # 0 = whole training split
    train_cap: int = 0
    closeness_cap: int = 0

    # evaluation grid
    attacks: list[AttackName] = ALL_ATTACKS
    eps: list[float]
    closeness_eps: float
    mc_samples: int = 50
    cap: int = 1000
    seed: int = 0

    # attack parameters; iterative step = step_ratio * eps
    step_ratio: float = 0.1
    bim_iters: int = 10
    pgd_iters: int = 20
    deepfool_overshoot: float = 0.02
    deepfool_max_iter: int = 50
    cw_binary_steps: int = 5
    cw_steps: int = 100
    cw_initial_c: float = 0.01
    cw_confidence: float = 0.0
    cw_lr: float = 0.01

    # detector
    logreg_epochs: int = 200
    logreg_lr: float = 0.1
    logreg_l2: float = 0.0001
    cv_folds: int = 5

    # sweep / profile
    sweep_attack: AttackName = AttackName.bim
    sweep_eps: list[float] = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3]
    profile_samples: int = 200
    profile_eps: list[float] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5]

    model_config = {"extra": "forbid"}

    @model_validator(mode="before")
    @classmethod
    def fill_dataset_defaults(cls, data):
        if not isinstance(data, dict):
            return data
        if "dataset" not in data:
            raise ValueError("dataset is required")
        defaults = DATASET_DEFAULTS[DatasetId(data["dataset"])]
        merged = {**defaults, **data}
        merged.setdefault("data_dir", settings.DATA_DIR)
        merged.setdefault("out_dir", settings.OUT_DIR)
        return merged

    @field_validator("eps", "sweep_eps", "profile_eps")
    @classmethod
    def eps_non_negative(cls, v):
        for eps in v:
            if eps < 0:
                raise ValueError(f"eps values must be >= 0, got {eps}")
        return v

    @field_validator("closeness_eps", "deepfool_overshoot", "cw_confidence", "logreg_l2")
    @classmethod
    def non_negative(cls, v):
        if v < 0:
            raise ValueError(f"Value must be >= 0, got {v}")
        return v

    @field_validator("cap", "mc_samples", "cnn_batch_size", "mlp_batch_size", "bim_iters", "pgd_iters",
                     "deepfool_max_iter", "cw_binary_steps", "cw_steps", "profile_samples")
    @classmethod
    def at_least_one(cls, v):
        if v < 1:
            raise ValueError(f"Value must be >= 1, got {v}")
        return v

    @field_validator("cnn_epochs", "mlp_epochs", "logreg_epochs", "train_cap", "closeness_cap")
    @classmethod
    def non_negative_int(cls, v):
        if v < 0:
            raise ValueError(f"Value must be >= 0, got {v}")
        return v

    @field_validator("cv_folds")
    @classmethod
    def at_least_two_folds(cls, v):
        if v < 2:
            raise ValueError(f"cv_folds must be >= 2, got {v}")
        return v

    @field_validator("cnn_lr", "mlp_lr", "cw_lr", "logreg_lr", "step_ratio")
    @classmethod
    def positive(cls, v):
        if v <= 0:
            raise ValueError(f"Value must be > 0, got {v}")
        return v

    @property
    def data_path(self) -> pathlib.Path:
        return pathlib.Path(self.data_dir)

    @property
    def out_path(self) -> pathlib.Path:
        return pathlib.Path(self.out_dir)


def _is_list_field(name: str) -> bool:
    return typing.get_origin(ExperimentConfig.model_fields[name].annotation) is list


def _render_value(value) -> str:
    if isinstance(value, list):
        return ", ".join(_render_value(v) for v in value)
    if hasattr(value, "value"):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(cfg: ExperimentConfig) -> str:
    lines = [f"{name} = {_render_value(getattr(cfg, name))}" for name in ExperimentConfig.model_fields]
    return "\n".join(lines) + "\n"


def config_digest(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(render_config(cfg).encode("utf-8")).hexdigest()


def normalize_key(key: str) -> str:
    return key.strip().replace("-", "_")


def parse_pairs(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` at line start or after whitespace starts a comment, blank lines are skipped."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _COMMENT.split(raw, maxsplit=1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"Config line {lineno}: expected 'key = value', got '{raw.strip()}'")
        pairs[normalize_key(key)] = value.strip()
    return pairs


def build_config(pairs: dict[str, str]) -> ExperimentConfig:
    data: dict = {}
    for key, value in pairs.items():
        if key in ExperimentConfig.model_fields and _is_list_field(key):
            data[key] = [item.strip() for item in value.split(",") if item.strip()]
        else:
            data[key] = value
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid experiment configuration: {e}") from e
    except ValueError as e:
        raise ConfigError(str(e)) from e


def parse_config(text: str) -> ExperimentConfig:
    return build_config(parse_pairs(text))


def load_config(path: str | pathlib.Path | None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Config file (optional) with ``overrides`` applied on top before validation."""
    pairs: dict[str, str] = {}
    if path is not None:
        path = pathlib.Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        pairs = parse_pairs(path.read_text(encoding="utf-8"))
    for key, value in (overrides or {}).items():
        pairs[normalize_key(key)] = value
    return build_config(pairs)
