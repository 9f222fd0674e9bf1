"""Infant brain volume and lateral-ventricle segmentation from 3D transfontanelle US."""

__version__ = "0.1.0"

from .ellipsoid import Ellipsoid
from .volume import LabelMap, Volume

__all__ = ["Ellipsoid", "LabelMap", "Volume", "__version__"]
