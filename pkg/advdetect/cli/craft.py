import argparse

from advdetect.schemas.experiment import ExperimentConfig
from advdetect.services import experiment_service


def register(subparsers, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser("craft", parents=[common], allow_abbrev=False, help="craft adversarial sets for every (attack, eps)")
    parser.set_defaults(handler=run)


def run(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    for s in experiment_service.craft(cfg):
        print(
            f"{s.attack.value:8s} eps={s.eps:<6g} n={s.n_samples} success={s.success_rate:.3f} "
            f"linf={s.mean_linf:.4f} l2={s.mean_l2:.4f}  {s.manifest_path}"
        )
