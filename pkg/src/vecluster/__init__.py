"""vecluster: cycle-level simulator and energy explorer for a shared-L1
cluster of compact vector processing elements."""

from .config import ConfigError, MachineConfig

__all__ = ["MachineConfig", "ConfigError"]
__version__ = "0.1.0"
