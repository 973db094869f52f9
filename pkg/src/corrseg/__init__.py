"""Point-cloud segmentation toolkit for transmission-corridor scenes.

Provides whole-scene and local sampling, a desk-scale two-branch trainer with
prototype and contrastive long-tail objectives, dual-branch probability
fusion, DBSCAN-based geometric verification, and evaluation tooling, all
wired behind the ``corrseg`` command line.
"""

from corrseg.model import (
    CorrsegError,
    LabeledCloud,
    Prediction,
    ProbabilityField,
    Taxonomy,
    argmax_labels,
    default_taxonomy,
    to_primary_protocol,
)

__version__ = "0.1.0"

__all__ = [
    "CorrsegError",
    "LabeledCloud",
    "Prediction",
    "ProbabilityField",
    "Taxonomy",
    "argmax_labels",
    "default_taxonomy",
    "to_primary_protocol",
    "__version__",
]
