"""Input validation helpers shared by the functional API and the estimators."""
import numpy as np
import torch

from .exceptions import ValidationError


def check_image(image, name="image", channels=3):
    """Return ``image`` as a float32 ``(H, W, C)`` array, raising on bad input."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[-1] != channels:
        raise ValidationError(f"{name} must have shape (H, W, {channels}), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise ValidationError(f"{name} must be floating point, got {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr.astype(np.float32, copy=False)


def check_mask(mask, shape=None, name="mask"):
    """Return ``mask`` as a boolean ``(H, W)`` array.

    Accepts bool arrays or numeric arrays holding only 0 and 1.
    """
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    arr = np.asarray(mask)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype != bool:
        values = np.unique(arr)
        if not np.all(np.isin(values, (0, 1))):
            raise ValidationError(f"{name} must be binary, found values {values[:5]}")
        arr = arr.astype(bool)
    if shape is not None and tuple(arr.shape) != tuple(shape[:2]):
        raise ValidationError(f"{name} shape {arr.shape} does not match {tuple(shape[:2])}")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise ValidationError(
            f"{names[0]} and {names[1]} differ in shape: {np.shape(a)} vs {np.shape(b)}")


def check_probability(p, name):
    if not 0.0 <= float(p) <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {p}")
    return float(p)
