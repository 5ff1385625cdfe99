"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
import numpy as np

from .exceptions import ContractViolation


def check_images(X, *, image_size=None, channels=None, copy=False):
    """Validate a batch of images and return it as a float32 ``(n, C, H, W)`` array.

    A single ``(C, H, W)`` image is promoted to a batch of one.
    """
    X = np.array(X, dtype=np.float32, copy=copy) if copy else np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"Expected images of shape (n, C, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("Found array with 0 images")
    if not np.all(np.isfinite(X)):
        raise ValueError("Input images contain NaN or infinity")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"Expected {channels} channels, got {X.shape[1]}")
    if image_size is not None and X.shape[2:] != (image_size, image_size):
        raise ValueError(
            f"Expected {image_size}x{image_size} images, got {X.shape[2]}x{X.shape[3]}"
        )
    return X


def check_object_ids(y, n_samples, n_max):
    y = np.asarray(y)
    if y.ndim == 0:
        y = np.full(n_samples, int(y))
    if y.shape != (n_samples,):
        raise ValueError(f"object ids have shape {y.shape}, expected ({n_samples},)")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("object ids must be integers")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= n_max:
        raise ContractViolation(
            f"object ids must lie in [0, {n_max}); got range [{y.min()}, {y.max()}]"
        )
    return y


def check_same_shape(a, b, what="arrays"):
    if tuple(a.shape) != tuple(b.shape):
        raise ContractViolation(f"{what} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
