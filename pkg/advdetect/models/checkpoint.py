import pathlib
from dataclasses import dataclass, field

import torch

from advdetect.exceptions import DataFormatError
from advdetect.schemas.network import NetworkSpec, TrainMeta
from advdetect.storage import read_container, write_container

CHECKPOINT_KIND = "checkpoint"


@dataclass(frozen=True)
class AdamState:
    """Per-weight first/second moments plus the shared step counter."""

    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


@dataclass(frozen=True)
class Checkpoint:
    spec: NetworkSpec
    weights: dict[str, torch.Tensor]
    adam_state: AdamState = field(default_factory=AdamState)
    train_meta: TrainMeta = field(default_factory=TrainMeta)

    def __post_init__(self):
        expected = self.spec.weight_shapes()
        missing = sorted(set(expected) - set(self.weights))
        if missing:
            raise ValueError(f"Checkpoint is missing weights: {', '.join(missing)}")
        for name, shape in expected.items():
            tensor = self.weights[name]
            if tuple(tensor.shape) != shape:
                raise ValueError(f"Weight '{name}' has shape {tuple(tensor.shape)}, spec expects {shape}")
            if not torch.isfinite(tensor).all():
                raise ValueError(f"Weight '{name}' contains NaN or Inf")

    @property
    def is_trained(self) -> bool:
        return self.train_meta.epochs_completed > 0


def save_checkpoint(ckpt: Checkpoint, path: str | pathlib.Path) -> None:
    metadata = {
        "kind": CHECKPOINT_KIND,
        "spec": ckpt.spec.model_dump(mode="json"),
        "train_meta": ckpt.train_meta.model_dump(mode="json"),
        "adam_step": ckpt.adam_state.step,
    }
    tensors: dict[str, torch.Tensor] = {}
    for name, tensor in ckpt.weights.items():
        tensors[f"w/{name}"] = tensor
    for name, tensor in ckpt.adam_state.exp_avg.items():
        tensors[f"adam.m/{name}"] = tensor
    for name, tensor in ckpt.adam_state.exp_avg_sq.items():
        tensors[f"adam.v/{name}"] = tensor
    write_container(path, metadata, tensors)


def load_checkpoint(path: str | pathlib.Path) -> Checkpoint:
    metadata, tensors = read_container(path)
    if metadata.get("kind") != CHECKPOINT_KIND:
        raise DataFormatError(f"{path} holds a '{metadata.get('kind')}' artifact, not a checkpoint")

    groups: dict[str, dict[str, torch.Tensor]] = {"w": {}, "adam.m": {}, "adam.v": {}}
    for key, tensor in tensors.items():
        prefix, _, name = key.partition("/")
        if prefix not in groups:
            raise DataFormatError(f"Unexpected tensor '{key}' in checkpoint {path}")
        groups[prefix][name] = tensor

    try:
        return Checkpoint(
            spec=NetworkSpec.model_validate(metadata["spec"]),
            weights=groups["w"],
            adam_state=AdamState(
                step=int(metadata.get("adam_step", 0)),
                exp_avg=groups["adam.m"],
                exp_avg_sq=groups["adam.v"],
            ),
            train_meta=TrainMeta.model_validate(metadata.get("train_meta", {})),
        )
    except (KeyError, ValueError) as e:
        raise DataFormatError(f"Invalid checkpoint {path}: {e}") from e
