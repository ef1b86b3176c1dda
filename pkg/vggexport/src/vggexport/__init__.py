"""One-shot converter from VGG-19 model files to the forgecaps weight archive."""

from .exporter import EXPECTED_LAYERS, EXPORTED_PARAMETERS, ExportError, export

__version__ = "0.1.0"
