"""visreason: verifier-guided visual reasoning episodes, a desk-scale
preference-training lab, and a trajectory dataset pipeline."""

from .errors import VisreasonError

__version__ = "0.1.0"

__all__ = ["VisreasonError", "__version__"]
