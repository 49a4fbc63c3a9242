import argparse

from advdetect.schemas.experiment import ExperimentConfig
from advdetect.services import experiment_service


def register(subparsers, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser(
        "build-closeness", parents=[common], allow_abbrev=False,
        help="harvest clean/noisy/BIM penultimate features and train the closeness MLP",
    )
    parser.set_defaults(handler=run)


def run(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    result = experiment_service.build_closeness(cfg)
    print(f"feature rows: {result.rows}; MLP training accuracy {result.train_accuracy:.4f}")
    print(f"features: {result.features_path}")
    print(f"checkpoint: {result.checkpoint_path}")
