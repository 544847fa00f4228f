"""modkit: gated modular classification, self-training segmentation, attribution.

A small, CPU-only research library built on a hand-rolled numpy autodiff
core. Subpackages/modules:

- ``modkit.nn``          tensors, gradients, layers, optimizers, builders
- ``modkit.synth``       seeded generators, augmentation, balancing, splits
- ``modkit.dataio``      portable pixmap/graymap dataset layout on disk
- ``modkit.composer``    gating + expert composition strategies
- ``modkit.selftrain``   dual-threshold self-training for segmentation
- ``modkit.metrics``     confusion matrices, IoU, binomial intervals
- ``modkit.attribution`` gradient class-activation and Sobol total-order maps
- ``modkit.config``      flat key-value run configuration
- ``modkit.experiments`` end-to-end drivers behind the subcommands
- ``modkit.cli``         experiment runner (``modkit`` console script)
"""

__version__ = "0.1.0"

from . import nn
from .errors import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    ModkitError,
    NumericsError,
    ParseError,
    ShapeError,
)
from .seeding import derive_seed, ordered_parallel_map, rng_for
