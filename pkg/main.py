"""
IPGP Toolkit - Main Entry Point
Multi-task ordinal Gaussian process models for idiographic personality data

Commands: simulate, fit, predict, compare, cluster, reproduce-sim-study
Run `python main.py <command> --help` for the flags of each command.
"""

import logging
import sys

from app.core.config import load_environment

logging.basicConfig(
    level=load_environment(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

# ============================================================================
# ENTRY POINT
# ============================================================================

if __name__ == "__main__":
    from app.cli import main

    sys.exit(main())
