import math
from enum import Enum

from pydantic import BaseModel, field_validator, model_validator

FEATURE_NAMES = ("epi", "ale", "sci", "ent", "close")
AUC_COLUMNS = FEATURE_NAMES + ("all",)


class Origin(str, Enum):
    clean = "clean"
    noisy = "noisy"
    adversarial = "adversarial"


class DetectionSample(BaseModel):
    sample_id: int
    origin: Origin
    attack: str
    eps: float
    epi: float
    ale: float
    sci: float
    ent: float
    close: float
    label: int
    predicted_class: int = -1

    @model_validator(mode="after")
    def label_matches_origin(self):
        if (self.label == 1) != (self.origin == Origin.adversarial):
            raise ValueError(f"Row {self.sample_id}: label {self.label} does not match origin '{self.origin.value}'")
        if not all(math.isfinite(v) for v in self.features):
            raise ValueError(f"Row {self.sample_id} has non-finite features")
        return self

    @property
    def features(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in FEATURE_NAMES)


class LogRegHyper(BaseModel):
    epochs: int = 200
    lr: float = 0.1
    l2: float = 1e-4

    @field_validator("epochs")
    @classmethod
    def epochs_non_negative(cls, v):
        if v < 0:
            raise ValueError("epochs must be >= 0")
        return v

    @field_validator("lr")
    @classmethod
    def lr_positive(cls, v):
        if v <= 0:
            raise ValueError("lr must be > 0")
        return v

    @field_validator("l2")
    @classmethod
    def l2_non_negative(cls, v):
        if v < 0:
            raise ValueError("l2 must be >= 0")
        return v


class AucRow(BaseModel):
    """One (attack, eps) cell of the AUC table."""

    dataset: str
    attack: str
    eps: float
    n_samples: int
    success_rate: float
    epi: float
    ale: float
    sci: float
    ent: float
    close: float
    all: float
