"""Pipeline orchestration behind the CLI subcommands.

Artifacts live under ``cfg.out_dir``; every CSV ends with a footer recording the
master seed and the SHA-256 of the rendered configuration.
"""
import logging
import pathlib
import statistics
from dataclasses import dataclass

import numpy as np
import torch
from tqdm import tqdm

from advdetect.config import settings
from advdetect.exceptions import ConfigError, DataFormatError
from advdetect.models.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from advdetect.models.dataset import LabeledDataset
from advdetect.schemas.attack import AttackConfig, AttackName, CraftRecord
from advdetect.schemas.detection import AUC_COLUMNS, FEATURE_NAMES, AucRow, LogRegHyper
from advdetect.schemas.experiment import ExperimentConfig, config_digest
from advdetect.schemas.network import EpochStats, NetworkKind, TrainHyper
from advdetect.services import (
    attack_service,
    closeness_service,
    data_service,
    detector_service,
    nn_service,
    report_service,
    uncertainty_service,
)
from advdetect.services.architecture_service import build_architecture

logger = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "loss", "train_accuracy", "test_accuracy")
MANIFEST_HEADER = tuple(CraftRecord.model_fields)
AUC_HEADER = tuple(AucRow.model_fields)
DETECTION_HEADER = ("sample_id", "origin", "attack", "eps") + FEATURE_NAMES + ("label",)
UNCERTAINTY_HEADER = ("sample_id", "epistemic", "aleatoric", "scibilic", "entropy", "predicted_class")
ROC_HEADER = ("metric", "threshold", "fpr", "tpr")
PROFILE_HEADER = ("sample_id", "eps") + FEATURE_NAMES + ("predicted_class", "flipped")


# ---------------------------------------------------------------------------
# Paths and shared plumbing
# ---------------------------------------------------------------------------
def _eps_tag(eps: float) -> str:
    return report_service.format_value(float(eps))


def cnn_path(cfg: ExperimentConfig) -> pathlib.Path:
    return cfg.out_path / f"{cfg.dataset.value}_cnn.advd"


def mlp_path(cfg: ExperimentConfig) -> pathlib.Path:
    return cfg.out_path / f"{cfg.dataset.value}_mlp.advd"


def features_path(cfg: ExperimentConfig) -> pathlib.Path:
    return cfg.out_path / f"{cfg.dataset.value}_features.advd"


def cell_prefix(cfg: ExperimentConfig, attack: AttackName, eps: float) -> pathlib.Path:
    return cfg.out_path / f"{cfg.dataset.value}_{attack.value}_eps{_eps_tag(eps)}"


def _csv(cfg: ExperimentConfig, path: pathlib.Path, header, rows) -> pathlib.Path:
    return report_service.write_csv(path, header, rows, cfg.seed, config_digest(cfg))


def _load_trained(path: pathlib.Path, what: str) -> Checkpoint:
    if not path.exists():
        raise DataFormatError(f"{what} checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    if not ckpt.is_trained:
        logger.warning("%s checkpoint %s has never been trained", what, path)
    return ckpt


def _capped(dataset: LabeledDataset, cap: int) -> LabeledDataset:
    return dataset.head(cap) if cap else dataset


def attack_config(cfg: ExperimentConfig, attack: AttackName, eps: float) -> AttackConfig:
    iters = {
        AttackName.bim: cfg.bim_iters,
        AttackName.pgd: cfg.pgd_iters,
        AttackName.deepfool: cfg.deepfool_max_iter,
        AttackName.cw: cfg.cw_steps,
    }.get(attack)
    return AttackConfig(
        attack=attack,
        eps=eps,
        alpha=eps * cfg.step_ratio,
        iters=iters,
        overshoot=cfg.deepfool_overshoot,
        binary_steps=cfg.cw_binary_steps,
        initial_c=cfg.cw_initial_c,
        confidence=cfg.cw_confidence,
        cw_lr=cfg.cw_lr,
        seed=cfg.seed,
    )


def _history_rows(history: list[EpochStats]) -> list[tuple]:
    return [(h.epoch, h.loss, h.train_accuracy, h.test_accuracy) for h in history]


# ---------------------------------------------------------------------------
# train-cnn
# ---------------------------------------------------------------------------
@dataclass
class TrainResult:
    checkpoint_path: pathlib.Path
    history_path: pathlib.Path
    test_accuracy: float
    epochs: int


def train_cnn(cfg: ExperimentConfig) -> TrainResult:
    train = _capped(data_service.load_dataset(cfg.dataset, "train", cfg.data_path), cfg.train_cap)
    test = data_service.load_dataset(cfg.dataset, "test", cfg.data_path)
    spec = build_architecture(cfg.dataset, NetworkKind.cnn)
    hyper = TrainHyper(epochs=cfg.cnn_epochs, batch_size=cfg.cnn_batch_size, lr=cfg.cnn_lr)
    logger.info("Training %s CNN on %d samples for %d epochs", cfg.dataset.value, len(train), hyper.epochs)

    ckpt, history = nn_service.train_classifier(
        spec, train.images, train.labels, hyper, cfg.seed,
        dataset_id=cfg.dataset.value, kind=NetworkKind.cnn.value,
        eval_set=(test.images, test.labels),
    )
    accuracy = nn_service.evaluate_accuracy(ckpt, test.images, test.labels)
    save_checkpoint(ckpt, cnn_path(cfg))
    history_path = _csv(cfg, cfg.out_path / f"{cfg.dataset.value}_cnn_history.csv", HISTORY_HEADER, _history_rows(history))
    logger.info("CNN test accuracy %.4f", accuracy)
    return TrainResult(cnn_path(cfg), history_path, accuracy, hyper.epochs)


# ---------------------------------------------------------------------------
# build-closeness
# ---------------------------------------------------------------------------
@dataclass
class ClosenessResult:
    features_path: pathlib.Path
    checkpoint_path: pathlib.Path
    history_path: pathlib.Path
    rows: int
    train_accuracy: float


def build_closeness(cfg: ExperimentConfig) -> ClosenessResult:
    cnn = _load_trained(cnn_path(cfg), "CNN")
    train = _capped(data_service.load_dataset(cfg.dataset, "train", cfg.data_path), cfg.closeness_cap)
    fd = closeness_service.build_feature_dataset(cnn, train, cfg.closeness_eps, cfg.seed)
    closeness_service.save_feature_dataset(fd, features_path(cfg))

    hyper = TrainHyper(epochs=cfg.mlp_epochs, batch_size=cfg.mlp_batch_size, lr=cfg.mlp_lr)
    mlp, history = closeness_service.train_closeness_mlp(fd, cfg.dataset, hyper, cfg.seed)
    save_checkpoint(mlp, mlp_path(cfg))
    history_path = _csv(cfg, cfg.out_path / f"{cfg.dataset.value}_mlp_history.csv", HISTORY_HEADER, _history_rows(history))
    accuracy = nn_service.evaluate_accuracy(mlp, fd.features, fd.labels)
    logger.info("Closeness MLP training accuracy %.4f on %d rows", accuracy, len(fd))
    return ClosenessResult(features_path(cfg), mlp_path(cfg), history_path, len(fd), accuracy)


# ---------------------------------------------------------------------------
# craft
# ---------------------------------------------------------------------------
@dataclass
class CraftSummary:
    attack: AttackName
    eps: float
    n_samples: int
    success_rate: float
    mean_linf: float
    mean_l2: float
    manifest_path: pathlib.Path


def _survivors(cnn: Checkpoint, test: LabeledDataset, cap: int) -> tuple[torch.Tensor, torch.Tensor, list[int]]:
    """The first ``cap`` correctly classified test samples and their test-split indices."""
    rows = torch.nonzero(attack_service.correctly_classified(cnn, test.images, test.labels)).flatten()[:cap]
    ids = rows.tolist()
    if not ids:
        raise DataFormatError("No test sample is classified correctly; nothing to attack")
    return test.images[rows], test.labels[rows], ids


def craft(cfg: ExperimentConfig) -> list[CraftSummary]:
    cnn = _load_trained(cnn_path(cfg), "CNN")
    test = data_service.load_dataset(cfg.dataset, "test", cfg.data_path)
    x, y, ids = _survivors(cnn, test, cfg.cap)

    summaries = []
    for attack in cfg.attacks:
        for eps in cfg.eps:
            acfg = attack_config(cfg, attack, eps)
            outcome = attack_service.run_attack(cnn, x, y, acfg, ids)
            records = attack_service.craft_records(outcome, ids, acfg)
            prefix = cell_prefix(cfg, attack, eps)
            attack_service.write_crafted(prefix.with_name(prefix.name + "_crafted.advd"), outcome, records, y)
            manifest = _csv(
                cfg, prefix.with_name(prefix.name + "_manifest.csv"), MANIFEST_HEADER,
                [tuple(getattr(r, f) for f in MANIFEST_HEADER) for r in records],
            )
            summaries.append(CraftSummary(
                attack=attack, eps=eps, n_samples=len(ids),
                success_rate=outcome.success_rate,
                mean_linf=float(outcome.final_linf.mean()),
                mean_l2=float(outcome.final_l2.mean()),
                manifest_path=manifest,
            ))
    return summaries


# ---------------------------------------------------------------------------
# evaluate / sweep
# ---------------------------------------------------------------------------
def _models(cfg: ExperimentConfig) -> tuple[Checkpoint, Checkpoint]:
    return _load_trained(cnn_path(cfg), "CNN"), _load_trained(mlp_path(cfg), "Closeness MLP")


def _logreg_hyper(cfg: ExperimentConfig) -> LogRegHyper:
    return LogRegHyper(epochs=cfg.logreg_epochs, lr=cfg.logreg_lr, l2=cfg.logreg_l2)


def evaluate_cell(
    cfg: ExperimentConfig,
    cnn: Checkpoint,
    mlp: Checkpoint,
    test: LabeledDataset,
    attack: AttackName,
    eps: float,
    write_cell_files: bool = True,
) -> AucRow:
    """Detection set, five per-metric AUCs and the cross-validated detector AUC for one (attack, eps)."""
    acfg = attack_config(cfg, attack, eps)
    dset = detector_service.assemble_detection_set(
        cnn, mlp, test.images, test.labels, acfg, cfg.mc_samples, cfg.seed, cap=cfg.cap,
    )
    X = detector_service.feature_matrix(dset.samples)
    y = detector_service.label_vector(dset.samples)
    groups = detector_service.group_vector(dset.samples)

    per_metric = detector_service.metric_aucs(X, y)
    combined, oof = detector_service.cross_validated_auc(X, y, groups, cfg.cv_folds, cfg.seed, _logreg_hyper(cfg))
    row = AucRow(
        dataset=cfg.dataset.value,
        attack=attack.value,
        eps=eps,
        n_samples=len(dset.survivor_ids),
        success_rate=dset.outcome.success_rate,
        all=combined,
        **per_metric,
    )
    logger.info(
        "%s eps=%g: %s",
        attack.value, eps, " ".join(f"{c}={getattr(row, c):.3f}" for c in AUC_COLUMNS),
    )

    if write_cell_files:
        prefix = cell_prefix(cfg, attack, eps)
        curves = detector_service.roc_curves(X, y, oof)
        report_service.write_svg(
            prefix.with_name(prefix.name + "_roc.svg"),
            report_service.roc_svg(f"{cfg.dataset.value} {attack.value} eps={_eps_tag(eps)}", curves),
        )
        _csv(cfg, prefix.with_name(prefix.name + "_roc.csv"), ROC_HEADER, report_service.roc_rows(curves))
        _csv(
            cfg, prefix.with_name(prefix.name + "_detection.csv"), DETECTION_HEADER,
            [tuple(getattr(s, f) for f in DETECTION_HEADER) for s in dset.samples],
        )
        _csv(
            cfg, prefix.with_name(prefix.name + "_uncertainty.csv"), UNCERTAINTY_HEADER,
            [
                (sample_id, est.epistemic, est.aleatoric, est.scibilic, est.entropy, est.predicted_class)
                for sample_id, est in zip(dset.survivor_ids, dset.adversarial_estimates)
            ],
        )
    return row


def _auc_rows(rows: list[AucRow]) -> list[tuple]:
    return [tuple(getattr(r, f) for f in AUC_HEADER) for r in rows]


def evaluate(cfg: ExperimentConfig) -> tuple[list[AucRow], pathlib.Path]:
    cnn, mlp = _models(cfg)
    test = data_service.load_dataset(cfg.dataset, "test", cfg.data_path)
    rows = [evaluate_cell(cfg, cnn, mlp, test, attack, eps) for attack in cfg.attacks for eps in cfg.eps]
    path = _csv(cfg, cfg.out_path / f"{cfg.dataset.value}_auc.csv", AUC_HEADER, _auc_rows(rows))
    return rows, path


def sweep(cfg: ExperimentConfig) -> tuple[list[AucRow], pathlib.Path]:
    """Six AUC columns for one attack across ``cfg.sweep_eps``."""
    if not cfg.sweep_eps:
        raise ConfigError("sweep needs at least one eps value (sweep_eps)")
    cnn, mlp = _models(cfg)
    test = data_service.load_dataset(cfg.dataset, "test", cfg.data_path)
    attack = cfg.sweep_attack
    rows = [evaluate_cell(cfg, cnn, mlp, test, attack, eps, write_cell_files=False) for eps in cfg.sweep_eps]

    stem = cfg.out_path / f"{cfg.dataset.value}_{attack.value}_sweep"
    path = _csv(cfg, stem.with_suffix(".csv"), AUC_HEADER, _auc_rows(rows))
    series = {col: ([r.eps for r in rows], [getattr(r, col) for r in rows]) for col in AUC_COLUMNS}
    report_service.write_svg(
        stem.with_suffix(".svg"),
        report_service.line_chart_svg(
            f"{cfg.dataset.value} {attack.value}: ROC-AUC vs eps", "eps", "ROC-AUC", series, y_range=(0.0, 1.0),
        ),
    )
    return rows, path


# ---------------------------------------------------------------------------
# profile
# ---------------------------------------------------------------------------
@dataclass
class ProfileSummary:
    n_samples: int
    median_entropy_clean: float
    median_entropy_flip: float | None
    median_entropy_max_eps: float
    flipped_samples: int
    csv_path: pathlib.Path


def profile(cfg: ExperimentConfig) -> ProfileSummary:
    """Per-sample metric curves under BIM across ``cfg.profile_eps``."""
    if not cfg.profile_eps:
        raise ConfigError("profile needs at least one eps value (profile_eps)")
    cnn, mlp = _models(cfg)
    test = data_service.load_dataset(cfg.dataset, "test", cfg.data_path)
    x, y, ids = _survivors(cnn, test, min(cfg.cap, cfg.profile_samples))
    eps_grid = sorted(cfg.profile_eps)

    # entropy[sample][eps index], flip[sample] = first eps index whose prediction differs from the label
    entropy = np.zeros((len(ids), len(eps_grid)))
    first_flip: list[int | None] = [None] * len(ids)
    rows = []
    for j, eps in enumerate(tqdm(eps_grid, desc="profile", disable=not settings.PROGRESS)):
        acfg = attack_config(cfg, AttackName.bim, eps)
        x_adv = attack_service.run_attack(cnn, x, y, acfg, ids).x_adv
        estimates = uncertainty_service.mc_estimates(cnn, x_adv, cfg.mc_samples, cfg.seed, indices=ids)
        predicted = nn_service.predict(cnn, x_adv)
        close = closeness_service.closeness_scores(mlp, closeness_service.penultimate_features(cnn, x_adv), predicted)
        for i, (sample_id, est) in enumerate(zip(ids, estimates)):
            flipped = bool(predicted[i] != y[i])
            if flipped and first_flip[i] is None:
                first_flip[i] = j
            entropy[i, j] = est.entropy
            rows.append((
                sample_id, eps, est.epistemic, est.aleatoric, est.scibilic, est.entropy,
                float(close[i]), int(predicted[i]), flipped,
            ))

    csv_path = _csv(cfg, cfg.out_path / f"{cfg.dataset.value}_profile.csv", PROFILE_HEADER, rows)

    medians = {name: [] for name in FEATURE_NAMES}
    for j, eps in enumerate(eps_grid):
        cell = [r for r in rows if r[1] == eps]
        for k, name in enumerate(FEATURE_NAMES):
            medians[name].append(statistics.median(r[2 + k] for r in cell))
    series = {f"median {name}": (eps_grid, values) for name, values in medians.items()}
    report_service.write_svg(
        cfg.out_path / f"{cfg.dataset.value}_profile.svg",
        report_service.line_chart_svg(f"{cfg.dataset.value} BIM: metrics vs eps", "eps", "median value", series),
    )

    flip_entropy = [entropy[i, j] for i, j in enumerate(first_flip) if j is not None]
    return ProfileSummary(
        n_samples=len(ids),
        median_entropy_clean=float(np.median(entropy[:, 0])),
        median_entropy_flip=float(np.median(flip_entropy)) if flip_entropy else None,
        median_entropy_max_eps=float(np.median(entropy[:, -1])),
        flipped_samples=len(flip_entropy),
        csv_path=csv_path,
    )
