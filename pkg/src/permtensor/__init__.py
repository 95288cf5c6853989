"""Physics-aware permeability-tensor regression at desk scale.

Synthetic porous media with lattice-Boltzmann labels, D4-equivariant
augmentation, a small attention regressor trained under a physics-aware
loss, and the statistics used to evaluate it.
"""

from .d4 import D4Element, compose, inverse, transform_image, transform_tensor
from .tensor import PermTensor, TensorSpectrum, is_positive_definite, spectrum, symmetry_error

__version__ = "0.1.0"

__all__ = [
    "D4Element",
    "PermTensor",
    "TensorSpectrum",
    "compose",
    "inverse",
    "is_positive_definite",
    "spectrum",
    "symmetry_error",
    "transform_image",
    "transform_tensor",
]
