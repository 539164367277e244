"""Export hierarchical CNN feature maps as SGT tensors plus a bank manifest.

Bridges real image datasets to the sparse-reconstruction scorer: one pass
of a pretrained ResNet-family backbone per image, tapping the last
activation of each spatial-resolution block, written in the scorer's
on-disk formats so the output directory is directly usable as a memory
bank or test set.
"""

from .extract import (
    BACKBONES,
    ExtractionSpec,
    ExtractorError,
    extract,
)

__version__ = "0.1.0"

__all__ = ["BACKBONES", "ExtractionSpec", "ExtractorError", "extract"]
