"""Input checks shared by the estimator and the command line."""

import numpy as np

from .errors import InvalidArgumentError


def check_images(X, input_shape=None, allow_single=False):
    """Validate a stack of raw images and return it as float64 ``(N, C, H, W)``.

    Parameters
    ----------
    X : array-like
        Images with pixel values in ``[0, 1]``.
    input_shape : tuple of int, optional
        Required ``(C, H, W)``.
    allow_single : bool, default=False
        Accept a single ``(C, H, W)`` image and add the batch axis.
    """
    arr = np.asarray(X, dtype=np.float64)
    if allow_single and arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise InvalidArgumentError(f"expected images of shape (N, C, H, W), got {arr.shape}")
    if arr.shape[0] == 0:
        raise InvalidArgumentError("no images given")
    if input_shape is not None and arr.shape[1:] != tuple(input_shape):
        raise InvalidArgumentError(f"expected images of shape {tuple(input_shape)}, got {arr.shape[1:]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("images contain non-finite values")
    if arr.min() < 0 or arr.max() > 1:
        raise InvalidArgumentError("pixel values must lie in [0, 1]")
    return arr


def check_labels(y, n_samples):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise InvalidArgumentError(f"expected {n_samples} labels, got shape {y.shape}")
    return y


def check_fraction(value, name, low_open=True):
    value = float(value)
    ok = (0 < value <= 1) if low_open else (0 <= value <= 1)
    if not ok:
        raise InvalidArgumentError(f"{name} must lie in {'(0, 1]' if low_open else '[0, 1]'}, got {value}")
    return value
