"""
CLI entry point - parse flags, resolve configuration, dispatch, map errors to exit codes

Exit codes: 0 success, 1 unexpected failure, 2 configuration or structural
error, 3 data or comparison error, 4 numerical error or failed criteria.
"""

import logging
from typing import List, Optional

from app.cli.parser import overrides_from_args, parse_args
from app.core.config import configure_threads, resolve_run_config
from app.core.errors import IPGPError
from app.schemas.ipgp_schemas import ModelSpec, RunConfig

logger = logging.getLogger(__name__)

DEFAULT_FACTORS = 5


def _normalize_model(run_config: RunConfig, variant: Optional[str], factors: Optional[int]) -> RunConfig:
    """--model replaces the whole model section with the variant's consistent settings"""
    if variant is None:
        return run_config
    current = run_config.model.num_factors
    num_factors = factors if factors is not None else (current if current > 0 else DEFAULT_FACTORS)
    spec = ModelSpec.for_variant(variant, num_factors=num_factors, num_levels=run_config.model.num_levels)
    return run_config.model_copy(update={"model": spec})


def main(argv: Optional[List[str]] = None) -> int:
    """Run one CLI command and return its exit status"""
    args = parse_args(argv)
    try:
        run_config = resolve_run_config(args.config, overrides_from_args(args))
        run_config = _normalize_model(run_config, getattr(args, "model", None), getattr(args, "factors", None))
        configure_threads(run_config.threads)

        # numerical modules load JAX; thread settings must be in place first
        from app.cli.commands import run_pipeline

        return run_pipeline(args.command, run_config)
    except IPGPError as exc:
        logger.error(f"❌ {type(exc).__name__}: {exc}", exc_info=True)
        return exc.exit_code
    except Exception as exc:
        logger.error(f"❌ Unexpected failure: {exc}", exc_info=True)
        return 1


__all__ = ["main"]
