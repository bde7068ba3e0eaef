"""Multi-condition controllable diffusion at toy scale.

A small text-conditioned U-Net is trained on synthetic shape scenes, frozen, and
then steered by a control branch that reads edge, segmentation and depth maps.
The branch's cross-attention projections are adapted with sums of Kronecker
products of a small "slow" matrix and low-rank "fast" blocks.
"""

from .errors import (
    ConfigError,
    DimensionError,
    FlexCtrlError,
    FormatError,
    GenerationError,
    InputError,
    NumericError,
    ParameterError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DimensionError",
    "FlexCtrlError",
    "FormatError",
    "GenerationError",
    "InputError",
    "NumericError",
    "ParameterError",
    "__version__",
]
