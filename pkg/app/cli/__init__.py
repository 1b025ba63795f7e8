"""CLI Module - command-line surface of the IPGP toolkit"""

from .main import main

__all__ = ['main']
