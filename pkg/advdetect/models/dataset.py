from dataclasses import dataclass, field

import torch

PROVENANCE_TAGS = ("clean", "noisy", "pert")


@dataclass(frozen=True)
class LabeledDataset:
    """Images N x C x H x W in [0, 1] with integer labels in [0, K)."""

    images: torch.Tensor
    labels: torch.Tensor
    dataset_id: str = ""
    split: str = ""
    class_count: int = 10

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"Image count {self.images.shape[0]} does not match label count {self.labels.shape[0]}"
            )
        if self.labels.numel() and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"Labels must lie in [0, {self.class_count})")
        if self.images.numel() and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("Pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: torch.Tensor | list[int]) -> "LabeledDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return LabeledDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            dataset_id=self.dataset_id,
            split=self.split,
            class_count=self.class_count,
        )

    def head(self, cap: int) -> "LabeledDataset":
        return self.subset(list(range(min(cap, len(self)))))


@dataclass(frozen=True)
class FeatureDataset:
    """Pooled penultimate activations: clean block, then noisy block, then perturbed block."""

    features: torch.Tensor
    labels: torch.Tensor
    provenance: torch.Tensor
    eps: float
    attack: str = "bim"
    dataset_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        rows = self.features.shape[0]
        if rows % 3:
            raise ValueError(f"Feature dataset must hold 3 blocks, got {rows} rows")
        if self.labels.shape[0] != rows or self.provenance.shape[0] != rows:
            raise ValueError("Features, labels and provenance must have the same row count")
        m = rows // 3
        blocks = self.labels.view(3, m)
        if not (torch.equal(blocks[0], blocks[1]) and torch.equal(blocks[0], blocks[2])):
            raise ValueError("Noisy and perturbed label blocks must equal the clean block")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def source_count(self) -> int:
        return len(self) // 3

    @property
    def width(self) -> int:
        return int(self.features.shape[1])

    def tag_counts(self) -> dict[str, int]:
        return {tag: int((self.provenance == code).sum()) for code, tag in enumerate(PROVENANCE_TAGS)}
