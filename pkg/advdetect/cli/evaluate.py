"""evaluate, sweep and profile: the detection-side commands."""
import argparse

from advdetect.schemas.detection import AUC_COLUMNS, AucRow
from advdetect.schemas.experiment import ExperimentConfig
from advdetect.services import experiment_service


def register(subparsers, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser("evaluate", parents=[common], allow_abbrev=False, help="AUC table and ROC plots per (attack, eps)")
    parser.set_defaults(handler=run_evaluate)

    parser = subparsers.add_parser("sweep", parents=[common], allow_abbrev=False, help="AUC columns vs eps for one attack")
    parser.set_defaults(handler=run_sweep)

    parser = subparsers.add_parser("profile", parents=[common], allow_abbrev=False, help="per-sample metric curves under BIM")
    parser.set_defaults(handler=run_profile)


def _print_table(rows: list[AucRow]) -> None:
    print("attack   eps     n     succ   " + " ".join(f"{c:>6s}" for c in AUC_COLUMNS))
    for r in rows:
        print(
            f"{r.attack:8s} {r.eps:<7g} {r.n_samples:<5d} {r.success_rate:.3f}  "
            + " ".join(f"{getattr(r, c):6.3f}" for c in AUC_COLUMNS)
        )


def run_evaluate(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    rows, path = experiment_service.evaluate(cfg)
    _print_table(rows)
    print(f"table: {path}")


def run_sweep(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    rows, path = experiment_service.sweep(cfg)
    _print_table(rows)
    print(f"sweep: {path}")


def run_profile(cfg: ExperimentConfig, args: argparse.Namespace) -> None:
    s = experiment_service.profile(cfg)
    flip = f"{s.median_entropy_flip:.4f}" if s.median_entropy_flip is not None else "n/a"
    print(f"samples: {s.n_samples}, flipped at some eps: {s.flipped_samples}")
    print(
        f"median entropy: smallest eps {s.median_entropy_clean:.4f}, at flip {flip}, "
        f"largest eps {s.median_entropy_max_eps:.4f}"
    )
    print(f"profile: {s.csv_path}")
