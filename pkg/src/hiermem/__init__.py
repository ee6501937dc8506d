"""Memory-augmented sequence classifier with hierarchical attention.

Subpackages:

* :mod:`hiermem.numerics` - float64 tensors + reverse-mode tape
* :mod:`hiermem.encoders` - GRU cell, bidirectional encoder/decoder
* :mod:`hiermem.attention` - context-vector attention and augmentations
* :mod:`hiermem.memory` - FIFO slot memory with hierarchical read
* :mod:`hiermem.baselines` - flat-memory (NTM/DMN style) comparators
* :mod:`hiermem.model` - full step: encode, read, classify, predict
* :mod:`hiermem.training` - adversarial multi-task training loop
* :mod:`hiermem.data` - synthetic episode generator and FGR1 files
* :mod:`hiermem.evaluation` - metrics, ablations, 2-d projection
* :mod:`hiermem.cli` - command-line entry point
"""

__version__ = "0.1.0"
