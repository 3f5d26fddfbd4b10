"""Simulator of a two-slice optical arbitrary waveform generation and
measurement (OAWG/OAWM) coherent transmission system."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"
