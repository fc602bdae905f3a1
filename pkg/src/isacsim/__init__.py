"""Cross-layer beam scheduling simulator for multi-user monostatic ISAC."""

from .config import SystemConfig, load_config, dump_config, derived_resolutions
from .rng import SeededRng

__version__ = "0.1.0"

__all__ = ["SystemConfig", "load_config", "dump_config", "derived_resolutions",
           "SeededRng", "__version__"]
