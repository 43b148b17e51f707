"""Online video deblurring toolkit.

Blur-pair synthesis from high-speed footage, recurrent deblurring networks
with dynamic temporal blending, a compact training loop, and a strictly
online streaming evaluation harness.
"""

from streamdeblur.tensor import ConvSpec, ShapeError, Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "ConvSpec", "ShapeError", "__version__"]
