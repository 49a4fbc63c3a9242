from enum import Enum

from pydantic import BaseModel, field_validator, model_validator


class AttackName(str, Enum):
    fgsm = "fgsm"
    bim = "bim"
    pgd = "pgd"
    deepfool = "deepfool"
    cw = "cw"


ITERATIVE_ATTACKS = (AttackName.bim, AttackName.pgd)

DEFAULT_ITERS = {
    AttackName.fgsm: 1,
    AttackName.bim: 10,
    AttackName.pgd: 20,
    AttackName.deepfool: 50,
    AttackName.cw: 100,
}


class AttackConfig(BaseModel):
    attack: AttackName
    eps: float

    # None = eps / 10 for bim and pgd
    alpha: float | None = None
    # None = per-attack default (DEFAULT_ITERS); max_iter for deepfool, inner steps for cw
    iters: int | None = None

    # deepfool
    overshoot: float = 0.02

    # cw
    binary_steps: int = 5
    initial_c: float = 1e-2
    confidence: float = 0.0
    cw_lr: float = 0.01

    seed: int = 0

    @field_validator("eps")
    @classmethod
    def eps_non_negative(cls, v):
        if v < 0:
            raise ValueError(f"eps must be >= 0, got {v}")
        return v

    @field_validator("iters")
    @classmethod
    def iters_positive(cls, v):
        if v is not None and v < 1:
            raise ValueError(f"iters must be >= 1, got {v}")
        return v

    @field_validator("binary_steps")
    @classmethod
    def binary_steps_positive(cls, v):
        if v < 1:
            raise ValueError(f"binary_steps must be >= 1, got {v}")
        return v

    @field_validator("overshoot", "confidence")
    @classmethod
    def non_negative(cls, v):
        if v < 0:
            raise ValueError(f"Value must be >= 0, got {v}")
        return v

    @model_validator(mode="after")
    def check_step_size(self):
        # a zero step is only meaningful when the budget itself is zero
        if self.attack in ITERATIVE_ATTACKS and self.eps > 0 and self.step_size <= 0:
            raise ValueError(f"{self.attack.value} needs alpha > 0, got {self.step_size}")
        return self

    @property
    def step_size(self) -> float:
        return self.alpha if self.alpha is not None else self.eps / 10

    @property
    def iterations(self) -> int:
        return self.iters if self.iters is not None else DEFAULT_ITERS[self.attack]


class CraftRecord(BaseModel):
    """One manifest row of a crafted set."""

    source_index: int
    attack: AttackName
    eps: float
    success: bool
    linf: float
    l2: float
