import argparse

from advdetect.schemas.experiment import ExperimentConfig
from advdetect.services import experiment_service


def register(subparsers, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser("train-cnn", parents=[common], allow_abbrev=False, help="train the dataset's CNN")
    parser.set_defaults(handler=run)


def run(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    result = experiment_service.train_cnn(cfg)
    print(f"trained {result.epochs} epoch(s); test accuracy {result.test_accuracy:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"history: {result.history_path}")
