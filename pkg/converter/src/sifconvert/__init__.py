"""sifconvert: checkpoint weight export into the SIF1 tensor file format."""

from .convert import ConvertError, ManifestEntry, convert
from .writer import write_sif

__version__ = "0.1.0"
