"""Object-incremental defect inspection with object-aware attention,
semantic compression and subspace-protected weight updates."""

__version__ = "0.1.0"

from .estimator import IUFDetector  # noqa: E402

__all__ = ["IUFDetector", "__version__"]
