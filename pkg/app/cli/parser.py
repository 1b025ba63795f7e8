"""
Command-line parser and flag-to-config mapping

Kept free of numerical imports so thread pools can be pinned before JAX loads.
"""

import argparse
from typing import Any, Dict, List, Optional

COMMANDS = ["simulate", "fit", "predict", "compare", "cluster", "reproduce-sim-study"]
VARIANTS = ["IPGP", "IPGP-NOM", "IPGP-IND", "IPGP-LOW", "IPGP-NP"]


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file or a manifest.json from an earlier run")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="root seed for every random stream")
    parser.add_argument("--threads", type=int, help="worker and BLAS threads (1 = bit-determinism baseline)")


def _add_data(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", help="long-format CSV: unit_id,item_id,time,response[,trait]")
    parser.add_argument("--test-data", help="held-out CSV for the random protocol")
    parser.add_argument("--protocol", choices=["random", "forecast", "loto"], help="evaluation protocol")
    parser.add_argument("--train-days", type=float, help="forecast training window from the first time")
    parser.add_argument("--horizon-days", type=float, help="forecast test window after the training window")


def _add_model(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", choices=VARIANTS, help="model variant")
    parser.add_argument("--factors", type=int, help="population factor count K")
    parser.add_argument("--prior-loadings", help="CSV with a K×J population loading matrix to freeze")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ipgp",
        description="Multi-task ordinal Gaussian process models for idiographic personality data",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    simulate = subparsers.add_parser("simulate", help="draw a synthetic study with known ground truth")
    _add_common(simulate)
    simulate.add_argument("--planned-missing", action="store_true", default=None, help="drop one of every three sub-factor items per assessment")

    fit = subparsers.add_parser("fit", help="fit a model under an evaluation protocol")
    _add_common(fit)
    _add_data(fit)
    _add_model(fit)

    predict = subparsers.add_parser("predict", help="score queries with the model fitted into --out")
    _add_common(predict)
    predict.add_argument("--data", help="query CSV (responses are used for metrics)")

    compare = subparsers.add_parser("compare", help="Bayes-factor comparison of variants or factor counts")
    _add_common(compare)
    _add_data(compare)
    _add_model(compare)
    compare.add_argument("--models", nargs="+", choices=VARIANTS, help="variants to compare")
    compare.add_argument("--compare-factors", nargs="+", type=int, help="factor counts to compare for --model")

    cluster = subparsers.add_parser("cluster", help="CMD k-means over per-unit correlation matrices")
    _add_common(cluster)
    _add_data(cluster)
    _add_model(cluster)
    cluster.add_argument("--clusters", type=int, help="number of clusters k")

    reproduce = subparsers.add_parser("reproduce-sim-study", help="desk-scale simulation study with ordering checks")
    _add_common(reproduce)
    reproduce.add_argument("--num-seeds", type=int, help="number of seeds")

    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Nested RunConfig values for every flag that was given"""
    flag = lambda name: getattr(args, name, None)  # noqa: E731
    overrides: Dict[str, Any] = {
        "out": flag("out"),
        "seed": flag("seed"),
        "threads": flag("threads"),
        "data": flag("data"),
        "test_data": flag("test_data"),
        "protocol": flag("protocol"),
        "train_days": flag("train_days"),
        "horizon_days": flag("horizon_days"),
        "prior_loadings": flag("prior_loadings"),
        "clusters": flag("clusters"),
        "num_seeds": flag("num_seeds"),
        "planned_missing": flag("planned_missing"),
        "compare_models": flag("models"),
        "compare_factors": flag("compare_factors"),
        "model": {"variant": flag("model"), "num_factors": flag("factors")},
    }
    return overrides


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


__all__ = ["COMMANDS", "build_parser", "overrides_from_args", "parse_args"]
