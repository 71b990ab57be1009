"""Epileptogenesis staging from single-channel rodent EEG.

The package covers the full chain: synthetic corpus generation, cleaning and
segmentation, a small reverse-mode autodiff engine, the network zoo, fold-wise
training, threshold-free evaluation and class-activation-map inspection.
"""

__version__ = "0.1.0"

from .signal_io import (  # noqa: F401
    Phase,
    PhaseMark,
    Recording,
    Segment,
    read_store,
    write_store,
)
