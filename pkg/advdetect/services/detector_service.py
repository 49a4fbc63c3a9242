"""Five-feature detection sets, the logistic-regression detector and rank-based ROC-AUC."""
import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import expit
from scipy.stats import rankdata
from sklearn.model_selection import StratifiedGroupKFold

from advdetect.exceptions import DataFormatError
from advdetect.models.checkpoint import Checkpoint
from advdetect.models.results import AttackOutcome, LogRegModel, RocCurve, UncertaintyEstimate
from advdetect.schemas.attack import AttackConfig
from advdetect.schemas.detection import FEATURE_NAMES, DetectionSample, LogRegHyper, Origin
from advdetect.services import attack_service, closeness_service, nn_service, uncertainty_service
from advdetect.services.nn_service import DTYPE
from advdetect.utils.seeding import derive_seed

logger = logging.getLogger(__name__)

# closeness is high on clean inputs, so it is flipped to make larger mean "more adversarial"
_ORIENTATION = {"epi": 1.0, "ale": 1.0, "sci": 1.0, "ent": 1.0, "close": -1.0}


@dataclass
class DetectionSet:
    samples: list[DetectionSample]
    outcome: AttackOutcome
    survivor_ids: list[int]
    adversarial_estimates: list[UncertaintyEstimate]


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------
def _rows(
    cnn: Checkpoint,
    mlp: Checkpoint,
    inputs: torch.Tensor,
    ids: list[int],
    origin: Origin,
    cfg: AttackConfig,
    T: int,
    seed: int,
) -> tuple[list[DetectionSample], list[UncertaintyEstimate]]:
    estimates = uncertainty_service.mc_estimates(cnn, inputs, T, seed, indices=ids)
    predicted = nn_service.predict(cnn, inputs)
    close = closeness_service.closeness_scores(mlp, closeness_service.penultimate_features(cnn, inputs), predicted)
    rows = [
        DetectionSample(
            sample_id=sample_id,
            origin=origin,
            attack=cfg.attack.value,
            eps=cfg.eps,
            epi=est.epistemic,
            ale=est.aleatoric,
            sci=est.scibilic,
            ent=est.entropy,
            close=float(close[i]),
            label=int(origin == Origin.adversarial),
            predicted_class=est.predicted_class,
        )
        for i, (sample_id, est) in enumerate(zip(ids, estimates))
    ]
    return rows, estimates


def assemble_detection_set(
    cnn: Checkpoint,
    mlp: Checkpoint,
    x: torch.Tensor,
    y: torch.Tensor,
    attack_cfg: AttackConfig,
    T: int,
    seed: int,
    sample_ids: Sequence[int] | None = None,
    cap: int | None = None,
) -> DetectionSet:
    """Clean, noisy (sigma = eps) and attacked rows for the first ``cap`` correctly classified test samples.

    Rows are ordered by sample id, then clean / noisy / adversarial.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if sample_ids is None:
        sample_ids = range(x.shape[0])
    x = x.to(DTYPE)
    y = torch.as_tensor(y, dtype=torch.long)

    correct = torch.nonzero(attack_service.correctly_classified(cnn, x, y)).flatten()
    rows = correct[:cap] if cap is not None else correct
    ids = [int(sample_ids[i]) for i in rows.tolist()]
    if not ids:
        raise DataFormatError(f"No test sample survives the correctness pre-filter for {attack_cfg.attack.value}")
    xs, ys = x[rows], y[rows]
    logger.info("%d of %d test samples are correctly classified, attacking %d", len(correct), x.shape[0], len(ids))

    noisy = closeness_service.noisy_copies(xs, attack_cfg.eps, seed, "noise", ids)
    outcome = attack_service.run_attack(cnn, xs, ys, attack_cfg, ids)

    clean_rows, _ = _rows(cnn, mlp, xs, ids, Origin.clean, attack_cfg, T, seed)
    noisy_rows, _ = _rows(cnn, mlp, noisy, ids, Origin.noisy, attack_cfg, T, seed)
    adv_rows, adv_estimates = _rows(cnn, mlp, outcome.x_adv, ids, Origin.adversarial, attack_cfg, T, seed)

    samples = [row for triple in zip(clean_rows, noisy_rows, adv_rows) for row in triple]
    return DetectionSet(samples=samples, outcome=outcome, survivor_ids=ids, adversarial_estimates=adv_estimates)


def feature_matrix(samples: Sequence[DetectionSample]) -> np.ndarray:
    if not samples:
        return np.zeros((0, len(FEATURE_NAMES)))
    return np.array([s.features for s in samples], dtype=np.float64)


def label_vector(samples: Sequence[DetectionSample]) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)


def group_vector(samples: Sequence[DetectionSample]) -> np.ndarray:
    return np.array([s.sample_id for s in samples], dtype=np.int64)


# ---------------------------------------------------------------------------
# Logistic regression
# ---------------------------------------------------------------------------
def _check_binary(labels: np.ndarray) -> tuple[int, int]:
    n1 = int((labels == 1).sum())
    n0 = int((labels == 0).sum())
    if n1 + n0 != labels.size:
        raise ValueError("Labels must be 0 or 1")
    if n1 == 0 or n0 == 0:
        raise ValueError(f"Need both classes, got {n1} positives and {n0} negatives")
    return n1, n0


def train_logreg(features: np.ndarray, labels: np.ndarray, hyper: LogRegHyper | None = None) -> LogRegModel:
    """Full-batch gradient descent on the L2-regularized mean logistic loss over standardized features."""
    hyper = hyper or LogRegHyper()
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if X.shape[0] != y.size:
        raise ValueError(f"Got {y.size} labels for {X.shape[0]} rows")
    _check_binary(y)
    if not np.isfinite(X).all():
        raise ValueError("Detector features must be finite")

    means = X.mean(axis=0)
    stds = X.std(axis=0)
    constant = stds < 1e-12
    if constant.any():
        logger.warning("Constant detector feature(s) %s; std set to 1", np.flatnonzero(constant).tolist())
    stds = np.where(constant, 1.0, stds)
    Z = (X - means) / stds

    n = y.size
    w = np.zeros(Z.shape[1])
    b = 0.0
    for _ in range(hyper.epochs):
        err = expit(Z @ w + b) - y
        w = w - hyper.lr * (Z.T @ err / n + hyper.l2 * w)
        b = b - hyper.lr * float(err.mean())
    return LogRegModel(weights=w, bias=b, feature_means=means, feature_stds=stds)


def logreg_score(model: LogRegModel, features: np.ndarray) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.weights.size:
        raise ValueError(f"Expected {model.weights.size} features, got {X.shape[1]}")
    if not np.isfinite(X).all():
        raise ValueError("Detector features must be finite")
    scores = expit(((X - model.feature_means) / model.feature_stds) @ model.weights + model.bias)
    return scores[0] if single else scores


# ---------------------------------------------------------------------------
# ROC
# ---------------------------------------------------------------------------
def roc_auc(scores: np.ndarray, labels: np.ndarray) -> RocCurve:
    """Mann-Whitney AUC with average ranks for ties, plus the ROC points at every distinct threshold."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size != labels.size:
        raise ValueError(f"Got {labels.size} labels for {scores.size} scores")
    n1, n0 = _check_binary(labels)
    if not np.isfinite(scores).all():
        raise ValueError("Scores must be finite")

    ranks = rankdata(scores)
    auc = (ranks[labels == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0)

    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    positives = (labels[order] == 1).astype(np.float64)
    tps = np.cumsum(positives)
    fps = np.cumsum(1.0 - positives)
    last_of_run = np.r_[np.flatnonzero(np.diff(sorted_scores)), scores.size - 1]
    return RocCurve(
        thresholds=np.r_[np.inf, sorted_scores[last_of_run]],
        fpr=np.r_[0.0, fps[last_of_run] / n0],
        tpr=np.r_[0.0, tps[last_of_run] / n1],
        auc=float(auc),
    )


def oriented_metric(features: np.ndarray, name: str) -> np.ndarray:
    column = np.asarray(features, dtype=np.float64)[:, FEATURE_NAMES.index(name)]
    return column if _ORIENTATION[name] > 0 else 1.0 - column


def metric_aucs(features: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    """Single-metric AUCs on the raw (oriented) feature columns."""
    return {name: roc_auc(oriented_metric(features, name), labels).auc for name in FEATURE_NAMES}


def cross_validated_auc(
    features: np.ndarray,
    labels: np.ndarray,
    groups: np.ndarray,
    folds: int,
    seed: int,
    hyper: LogRegHyper | None = None,
) -> tuple[float, np.ndarray]:
    """Mean held-out AUC of the 5-feature detector and the pooled out-of-fold scores.

    Folds are grouped by source sample so its clean, noisy and adversarial rows stay together.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    groups = np.asarray(groups).reshape(-1)
    _check_binary(y)
    n_groups = np.unique(groups).size
    splits = min(folds, n_groups)
    if splits < 2:
        logger.warning("Only %d source sample(s); scoring the detector in-sample", n_groups)
        scores = logreg_score(train_logreg(X, y, hyper), X)
        return roc_auc(scores, y).auc, scores

    cv = StratifiedGroupKFold(n_splits=splits, shuffle=True, random_state=derive_seed(seed, "folds") % (2**32))
    oof = np.zeros(y.size)
    aucs = []
    for train_idx, test_idx in cv.split(X, y, groups):
        model = train_logreg(X[train_idx], y[train_idx], hyper)
        oof[test_idx] = logreg_score(model, X[test_idx])
        aucs.append(roc_auc(oof[test_idx], y[test_idx]).auc)
    return float(np.mean(aucs)), oof


def roc_curves(features: np.ndarray, labels: np.ndarray, combined_scores: np.ndarray) -> dict[str, RocCurve]:
    curves = {name: roc_auc(oriented_metric(features, name), labels) for name in FEATURE_NAMES}
    curves["all"] = roc_auc(combined_scores, labels)
    return curves
