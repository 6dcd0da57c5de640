"""Lightweight CNN with channel/spatial attention for finger-vein identification.

Pure-numpy layers with hand-derived backward passes, a finite-difference
gradient checker, a synthetic vein-image generator, and a CLI for training,
evaluation and inference.
"""

__version__ = "0.1.0"
