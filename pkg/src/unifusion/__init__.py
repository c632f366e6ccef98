"""Task-agnostic multi-source image fusion.

A small research framework that fuses two aligned images of the same scene
(different sensors, exposures, or focal planes) with one shared model. It
ships its own float64 reverse-mode autograd engine, a windowed-attention
backbone with pixel-pair interaction attention, an operation-based adaptive
fusion head, and a loss-balancing multi-task optimizer, plus a CLI for
training, fusing, evaluation, diagnostics, and ablations.
"""

__version__ = "0.1.0"

from .autograd import (
    ContractError,
    DomainError,
    NumericsError,
    ShapeError,
    Tensor,
    gradcheck,
)

__all__ = [
    "Tensor",
    "gradcheck",
    "ShapeError",
    "DomainError",
    "ContractError",
    "NumericsError",
    "__version__",
]
