"""Chameleon-hash-based irreversible passport watermarking for small CNNs."""

from .crypto import keygen
from .model import ArchConfig, ChipModel
from .passport import Passport

__version__ = "0.1.0"

__all__ = ["keygen", "ArchConfig", "ChipModel", "Passport", "__version__"]
