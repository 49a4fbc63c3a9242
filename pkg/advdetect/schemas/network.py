from enum import Enum
from typing import Literal

from pydantic import BaseModel, field_validator, model_validator


class DatasetId(str, Enum):
    mnist_digit = "mnist_digit"
    mnist_fashion = "mnist_fashion"
    cifar10 = "cifar10"


class NetworkKind(str, Enum):
    cnn = "cnn"
    mlp = "mlp"


LayerKind = Literal["conv2d", "maxpool2d", "relu", "dropout", "flatten", "dense"]


class LayerSpec(BaseModel):
    kind: LayerKind

    # conv2d
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    padding: int = 0
    stride: int = 1

    # dropout
    p: float = 0.0

    # dense
    in_features: int = 0
    out_features: int = 0

    model_config = {"frozen": True}

    @field_validator("p")
    @classmethod
    def dropout_probability_in_range(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError(f"Dropout probability must be in [0, 1), got {v}")
        return v

    @model_validator(mode="after")
    def check_kind_parameters(self):
        if self.kind == "conv2d":
            if self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise ValueError(f"Conv kernel must be odd-sized, got {self.kernel_size}")
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError("Conv channel counts must be positive")
        elif self.kind == "maxpool2d":
            if self.kernel_size < 1:
                raise ValueError(f"Pool window must be positive, got {self.kernel_size}")
        elif self.kind == "dense":
            if self.in_features < 1 or self.out_features < 1:
                raise ValueError(f"Dense dims must be > 0, got {self.in_features}x{self.out_features}")
        return self

    @property
    def trainable(self) -> bool:
        return self.kind in ("conv2d", "dense")


def conv(in_channels: int, out_channels: int, kernel_size: int = 3, padding: int = 1) -> LayerSpec:
    return LayerSpec(
        kind="conv2d", in_channels=in_channels, out_channels=out_channels,
        kernel_size=kernel_size, padding=padding,
    )


def maxpool(size: int = 2, stride: int = 2) -> LayerSpec:
    return LayerSpec(kind="maxpool2d", kernel_size=size, stride=stride)


def relu() -> LayerSpec:
    return LayerSpec(kind="relu")


def dropout(p: float) -> LayerSpec:
    return LayerSpec(kind="dropout", p=p)


def flatten() -> LayerSpec:
    return LayerSpec(kind="flatten")


def dense(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec(kind="dense", in_features=in_features, out_features=out_features)


class NetworkSpec(BaseModel):
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    class_count: int

    model_config = {"frozen": True}

    @field_validator("class_count")
    @classmethod
    def at_least_two_classes(cls, v):
        if v < 2:
            raise ValueError(f"class_count must be at least 2, got {v}")
        return v

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        """Trainable tensor names (``"<layer index>.weight"`` / ``".bias"``) and their shapes."""
        shapes: dict[str, tuple[int, ...]] = {}
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv2d":
                shapes[f"{i}.weight"] = (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size)
                shapes[f"{i}.bias"] = (layer.out_channels,)
            elif layer.kind == "dense":
                shapes[f"{i}.weight"] = (layer.out_features, layer.in_features)
                shapes[f"{i}.bias"] = (layer.out_features,)
        return shapes

    @property
    def has_dropout(self) -> bool:
        return any(layer.kind == "dropout" and layer.p > 0 for layer in self.layers)


class TrainHyper(BaseModel):
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @field_validator("epochs")
    @classmethod
    def epochs_non_negative(cls, v):
        if v < 0:
            raise ValueError("epochs must be >= 0")
        return v

    @field_validator("batch_size")
    @classmethod
    def batch_size_positive(cls, v):
        if v < 1:
            raise ValueError("batch_size must be >= 1")
        return v


class TrainMeta(BaseModel):
    dataset_id: str = ""
    kind: str = ""
    epochs_completed: int = 0
    seed: int = 0


class EpochStats(BaseModel):
    epoch: int
    loss: float
    train_accuracy: float
    test_accuracy: float | None = None
