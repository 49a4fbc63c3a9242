from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass
class ActivationTrace:
    inputs: torch.Tensor
    layer_outputs: list[torch.Tensor]
    penultimate: torch.Tensor
    logits: torch.Tensor
    # layer index -> binary keep mask (only dropout layers that were sampled)
    dropout_masks: dict[int, torch.Tensor] = field(default_factory=dict)


@dataclass
class AttackOutcome:
    x_adv: torch.Tensor
    success: torch.Tensor
    iterations_used: torch.Tensor
    final_linf: torch.Tensor
    final_l2: torch.Tensor

    @property
    def success_rate(self) -> float:
        if self.success.numel() == 0:
            return 0.0
        return float(self.success.double().mean())


@dataclass(frozen=True)
class PredictionEnsemble:
    """T x K softmax outputs of T dropout-sampled forward passes for one input."""

    probs: torch.Tensor

    def __post_init__(self):
        if self.probs.dim() != 2 or self.probs.shape[0] < 1:
            raise ValueError(f"Ensemble must be a non-empty T x K matrix, got shape {tuple(self.probs.shape)}")
        if (self.probs < 0).any() or (self.probs > 1).any():
            raise ValueError("Ensemble probabilities must lie in [0, 1]")
        if not torch.allclose(self.probs.sum(dim=1), torch.ones(self.T, dtype=self.probs.dtype), atol=1e-9, rtol=0):
            raise ValueError("Every ensemble row must sum to 1")

    @property
    def T(self) -> int:
        return int(self.probs.shape[0])

    @property
    def K(self) -> int:
        return int(self.probs.shape[1])


@dataclass(frozen=True)
class UncertaintyEstimate:
    epistemic: float
    aleatoric: float
    scibilic: float
    entropy: float
    mean_probs: torch.Tensor
    predicted_class: int


@dataclass(frozen=True)
class LogRegModel:
    weights: np.ndarray
    bias: float
    feature_means: np.ndarray
    feature_stds: np.ndarray


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
