"""MC-dropout ensembles and the four scalar uncertainty metrics derived from them."""
import logging
from collections.abc import Sequence

import torch
from tqdm import tqdm

from advdetect.config import settings
from advdetect.models.checkpoint import Checkpoint
from advdetect.models.results import PredictionEnsemble, UncertaintyEstimate
from advdetect.services import nn_service
from advdetect.services.nn_service import DTYPE
from advdetect.utils.seeding import make_generator

logger = logging.getLogger(__name__)

SCIBILIC_GUARD = 1e-12


def mc_predict(ckpt: Checkpoint, x: torch.Tensor, T: int, rng: torch.Generator) -> PredictionEnsemble:
    """T dropout-sampled passes over one input, drawn as a single replicated batch."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if x.dim() == len(ckpt.spec.input_shape) + 1:
        if x.shape[0] != 1:
            raise ValueError(f"mc_predict takes one sample, got a batch of {x.shape[0]}")
        x = x[0]
    batch = x.unsqueeze(0).expand(T, *x.shape)
    logits = nn_service.forward(ckpt, batch, dropout_mode="sample", rng=rng, keep_outputs=False).logits
    return PredictionEnsemble(probs=nn_service.softmax(logits))


def aleatoric(ens: PredictionEnsemble) -> float:
    """Mean diagonal of E_t[diag(p_t) - p_t p_t^T]."""
    p = ens.probs
    return float((p - p * p).mean(dim=0).mean())


def epistemic(ens: PredictionEnsemble) -> float:
    """Mean over classes of the population variance across the T passes."""
    return float(ens.probs.var(dim=0, unbiased=False).mean())


def scibilic(epi: float, ale: float) -> float:
    if epi < 0 or ale < 0:
        raise ValueError(f"Uncertainties must be >= 0, got epistemic={epi}, aleatoric={ale}")
    return epi / (ale + SCIBILIC_GUARD)


def predictive_entropy(ens: PredictionEnsemble) -> float:
    """Natural-log entropy of the mean distribution; xlogy gives 0 * ln 0 = 0."""
    mean = ens.probs.mean(dim=0)
    return float(-torch.special.xlogy(mean, mean).sum())


def estimate(ens: PredictionEnsemble) -> UncertaintyEstimate:
    ale = aleatoric(ens)
    epi = epistemic(ens)
    mean = ens.probs.mean(dim=0)
    return UncertaintyEstimate(
        epistemic=epi,
        aleatoric=ale,
        scibilic=scibilic(epi, ale),
        entropy=predictive_entropy(ens),
        mean_probs=mean,
        predicted_class=int(mean.argmax()),
    )


def mc_estimates(
    ckpt: Checkpoint,
    xs: torch.Tensor,
    T: int,
    seed: int,
    stream: str = "mc",
    indices: Sequence[int] | None = None,
) -> list[UncertaintyEstimate]:
    """One estimate per row of ``xs``; row i draws its masks from ``(seed, stream, indices[i])``."""
    if indices is None:
        indices = range(xs.shape[0])
    if len(indices) != xs.shape[0]:
        raise ValueError(f"Got {len(indices)} indices for {xs.shape[0]} samples")
    if not ckpt.spec.has_dropout:
        logger.warning("Network has no dropout layers; every ensemble will have zero epistemic spread")

    xs = xs.to(DTYPE)
    estimates = []
    for row, idx in tqdm(list(enumerate(indices)), desc=f"mc T={T}", disable=not settings.PROGRESS, leave=False):
        ens = mc_predict(ckpt, xs[row], T, make_generator(seed, stream, int(idx)))
        estimates.append(estimate(ens))
    return estimates
