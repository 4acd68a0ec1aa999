"""Statistical millimetre-wave channel model, MIMO beamforming analysis,
parameter estimation from measurements and a multi-cell rate simulator."""

from .channel_model import PRESETS, BandParameters, LinkState, get_preset
from .mimo import ArrayGeometry
from .netsim import NetworkConfig

__all__ = ["PRESETS", "BandParameters", "LinkState", "get_preset", "ArrayGeometry",
           "NetworkConfig"]
__version__ = "0.1.0"
