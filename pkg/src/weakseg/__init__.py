"""Weakly supervised scene text segmentation toolkit.

Converts bounding-box text annotations into three-class pixel label maps
with a background/foreground network, and trains and evaluates SMANet,
a multiscale-attention encoder/decoder segmentation network.
"""

__version__ = "0.1.0"

from weakseg.core import (
    BACKGROUND,
    FOREGROUND,
    UNCERTAIN,
    LabelMap,
    ProbabilityCanvas,
    TextBox,
    enlarge_box,
    rasterize_quad,
)

__all__ = [
    "BACKGROUND",
    "FOREGROUND",
    "UNCERTAIN",
    "LabelMap",
    "ProbabilityCanvas",
    "TextBox",
    "enlarge_box",
    "rasterize_quad",
]
