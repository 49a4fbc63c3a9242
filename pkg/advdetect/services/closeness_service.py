"""Feature-space closeness: pooled clean/noisy/perturbed penultimate activations and the MLP trained on them."""
import logging
import pathlib

import torch
from tqdm import tqdm

from advdetect.config import settings
from advdetect.exceptions import DataFormatError
from advdetect.models.checkpoint import Checkpoint
from advdetect.models.dataset import FeatureDataset, LabeledDataset
from advdetect.schemas.attack import AttackConfig, AttackName
from advdetect.schemas.network import DatasetId, EpochStats, NetworkKind, NetworkSpec, TrainHyper
from advdetect.services import attack_service, nn_service
from advdetect.services.architecture_service import build_architecture, penultimate_width
from advdetect.services.data_service import gaussian_noisify
from advdetect.services.nn_service import DTYPE
from advdetect.storage import read_container, write_container
from advdetect.utils.seeding import make_generator

logger = logging.getLogger(__name__)

FEATURES_KIND = "features"

CLEAN, NOISY, PERTURBED = 0, 1, 2


def penultimate_features(ckpt: Checkpoint, x: torch.Tensor, chunk_size: int | None = None) -> torch.Tensor:
    """Dropout-off input of the final dense layer, chunked."""
    chunk_size = chunk_size or settings.CHUNK_SIZE
    parts = [
        nn_service.forward(ckpt, x[start:start + chunk_size], keep_outputs=False).penultimate
        for start in range(0, x.shape[0], chunk_size)
    ]
    if not parts:
        return torch.empty((0, penultimate_width(ckpt.spec)), dtype=DTYPE)
    return torch.cat(parts)


def noisy_copies(x: torch.Tensor, eps: float, seed: int, stream: str, indices) -> torch.Tensor:
    """Gaussian-noised copy of every row, row i drawing from ``(seed, stream, indices[i])``."""
    if x.shape[0] == 0:
        return x.clone()
    return torch.stack([
        gaussian_noisify(x[row], eps, make_generator(seed, stream, int(idx)))
        for row, idx in enumerate(indices)
    ])


def build_feature_dataset(
    cnn_ckpt: Checkpoint,
    train_set: LabeledDataset,
    eps: float,
    seed: int,
    bim_alpha: float | None = None,
    bim_iters: int | None = None,
    chunk_size: int | None = None,
) -> FeatureDataset:
    if not cnn_ckpt.is_trained:
        raise DataFormatError("Closeness features need a trained CNN checkpoint (epochs_completed is 0)")
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    chunk_size = chunk_size or settings.CHUNK_SIZE
    m = len(train_set)
    cfg = AttackConfig(attack=AttackName.bim, eps=eps, alpha=bim_alpha, iters=bim_iters, seed=seed)

    blocks: dict[int, list[torch.Tensor]] = {CLEAN: [], NOISY: [], PERTURBED: []}
    for start in tqdm(range(0, m, chunk_size), desc="closeness features", disable=not settings.PROGRESS):
        x = train_set.images[start:start + chunk_size].to(DTYPE)
        y = train_set.labels[start:start + chunk_size]
        indices = range(start, start + x.shape[0])
        noisy = noisy_copies(x, eps, seed, "closeness-noise", indices)
        # perturbed rows are kept whether or not BIM flipped the prediction
        perturbed = attack_service.bim(cnn_ckpt, x, y, eps, cfg.step_size, cfg.iterations).x_adv
        blocks[CLEAN].append(penultimate_features(cnn_ckpt, x, chunk_size))
        blocks[NOISY].append(penultimate_features(cnn_ckpt, noisy, chunk_size))
        blocks[PERTURBED].append(penultimate_features(cnn_ckpt, perturbed, chunk_size))

    width = penultimate_width(cnn_ckpt.spec)
    features = torch.cat([
        torch.cat(blocks[tag]) if blocks[tag] else torch.empty((0, width), dtype=DTYPE)
        for tag in (CLEAN, NOISY, PERTURBED)
    ])
    labels = train_set.labels.to(torch.long).repeat(3)
    provenance = torch.arange(3).repeat_interleave(m)
    logger.info("Built closeness feature dataset: %d rows x %d features (eps=%g)", features.shape[0], width, eps)
    return FeatureDataset(
        features=features,
        labels=labels,
        provenance=provenance,
        eps=eps,
        attack=AttackName.bim.value,
        dataset_id=train_set.dataset_id,
        meta={"bim_alpha": cfg.step_size, "bim_iters": cfg.iterations, "seed": seed},
    )


def train_closeness_mlp(
    fd: FeatureDataset,
    dataset_id: DatasetId | str | None,
    hyper: TrainHyper,
    seed: int,
    spec: NetworkSpec | None = None,
) -> tuple[Checkpoint, list[EpochStats]]:
    """Train the closeness MLP on (features, labels); ``spec`` overrides the dataset's table architecture."""
    if len(fd) == 0:
        raise DataFormatError("Cannot train the closeness MLP on an empty feature dataset")
    if spec is None:
        if dataset_id is None:
            raise ValueError("Need a dataset_id or an explicit MLP spec")
        spec = build_architecture(dataset_id, NetworkKind.mlp)
    if tuple(spec.input_shape) != (fd.width,):
        raise ValueError(f"MLP input width {spec.input_shape[0]} does not match feature width {fd.width}")
    dataset_value = DatasetId(dataset_id).value if dataset_id else fd.dataset_id
    return nn_service.train_classifier(
        spec, fd.features, fd.labels, hyper, seed,
        dataset_id=dataset_value, kind=NetworkKind.mlp.value,
    )


def closeness_scores(mlp_ckpt: Checkpoint, penultimate: torch.Tensor, predicted_class: torch.Tensor) -> torch.Tensor:
    """MLP softmax probability at the CNN's predicted class, one value per row."""
    penultimate = torch.atleast_2d(penultimate.to(DTYPE))
    predicted_class = torch.as_tensor(predicted_class, dtype=torch.long).reshape(-1)
    if tuple(penultimate.shape[1:]) != tuple(mlp_ckpt.spec.input_shape):
        raise ValueError(
            f"Penultimate width {penultimate.shape[1]} does not match MLP input {mlp_ckpt.spec.input_shape[0]}"
        )
    if predicted_class.numel() != penultimate.shape[0]:
        raise ValueError(f"Got {predicted_class.numel()} classes for {penultimate.shape[0]} feature rows")
    k = mlp_ckpt.spec.class_count
    if predicted_class.numel() and (predicted_class.min() < 0 or predicted_class.max() >= k):
        raise ValueError(f"Predicted class out of range [0, {k})")
    probs = nn_service.softmax(nn_service.logits_of(mlp_ckpt, penultimate))
    return probs.gather(1, predicted_class.unsqueeze(1)).squeeze(1)


def closeness_score(mlp_ckpt: Checkpoint, penultimate: torch.Tensor, cnn_predicted_class: int) -> float:
    return float(closeness_scores(mlp_ckpt, penultimate.reshape(1, -1), torch.tensor([cnn_predicted_class]))[0])


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------
def save_feature_dataset(fd: FeatureDataset, path: str | pathlib.Path) -> None:
    metadata = {
        "kind": FEATURES_KIND,
        "eps": fd.eps,
        "attack": fd.attack,
        "dataset_id": fd.dataset_id,
        "meta": fd.meta,
    }
    write_container(path, metadata, {
        "features": fd.features,
        "labels": fd.labels.to(DTYPE),
        "provenance": fd.provenance.to(DTYPE),
    })


def load_feature_dataset(path: str | pathlib.Path) -> FeatureDataset:
    metadata, tensors = read_container(path)
    if metadata.get("kind") != FEATURES_KIND:
        raise DataFormatError(f"{path} holds a '{metadata.get('kind')}' artifact, not a feature dataset")
    try:
        return FeatureDataset(
            features=tensors["features"],
            labels=tensors["labels"].round().to(torch.long),
            provenance=tensors["provenance"].round().to(torch.long),
            eps=float(metadata["eps"]),
            attack=metadata.get("attack", AttackName.bim.value),
            dataset_id=metadata.get("dataset_id", ""),
            meta=metadata.get("meta", {}),
        )
    except (KeyError, ValueError) as e:
        raise DataFormatError(f"Invalid feature dataset {path}: {e}") from e
