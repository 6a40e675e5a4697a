"""Simulation laboratory for pointer-authentication-based stack canaries."""

from importlib import resources

from .instrument import ProtectionMode
from .pa import PacKeySet
from .program import Program, parse_program
from .vm import RunReport, VmConfig, run

__all__ = [
    "PacKeySet",
    "Program",
    "ProtectionMode",
    "RunReport",
    "VmConfig",
    "corpus_path",
    "parse_program",
    "run",
]

__version__ = "0.1.0"


def corpus_path(name: str):
    """Path to a shipped corpus program or scenario file."""
    return resources.files(__name__).joinpath("corpus", name)
