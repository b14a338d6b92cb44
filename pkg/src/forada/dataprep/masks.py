"""Manipulation masks, blending-boundary targets and patch-level labels."""
from __future__ import annotations

import cv2
import numpy as np

from ..config import ConfigError


class ShapeError(ValueError):
    pass


# blurred values this close to 0 or 1 are snapped so the boundary is exactly
# zero away from mask edges (normalised kernels do not sum to exactly 1.0)
_SNAP = 1e-9


def _check_2d(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D array, got shape {arr.shape}")
    return arr


def binarize_mask(raw_mask: np.ndarray, threshold: float = 127.0) -> np.ndarray:
    """Threshold a grayscale manipulation mask to {0, 1}.

    Inputs that are already binary (values within {0, 1}) are returned
    unchanged so that binarising twice is a no-op.
    """
    raw = _check_2d(raw_mask, "raw_mask")
    if raw.dtype == bool:
        return raw.astype(np.uint8)
    if raw.size and np.isin(raw, (0, 1)).all():
        return raw.astype(np.uint8)
    return (raw >= threshold).astype(np.uint8)


def gaussian_blur(mask: np.ndarray, kernel: int = 5, sigma: float = 1.0) -> np.ndarray:
    if kernel < 3 or kernel % 2 == 0:
        raise ConfigError(f"blur kernel must be odd and >= 3, got {kernel}")
    k = cv2.getGaussianKernel(kernel, sigma, ktype=cv2.CV_64F)
    m = cv2.sepFilter2D(np.asarray(mask, dtype=np.float64), cv2.CV_64F, k, k,
                        borderType=cv2.BORDER_REPLICATE)
    m[m < _SNAP] = 0.0
    m[m > 1.0 - _SNAP] = 1.0
    return m


def make_boundary_target(mask_binary: np.ndarray, blur_kernel: int = 5,
                         blur_sigma: float = 1.0) -> np.ndarray:
    """Soft blending boundary ``4 m (1 - m)`` of the blurred binary mask ``m``."""
    mask = _check_2d(mask_binary, "mask_binary")
    m = gaussian_blur(mask, blur_kernel, blur_sigma)
    return 4.0 * m * (1.0 - m)


def _patch_view(arr: np.ndarray, patch_size: int) -> np.ndarray:
    h, w = arr.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"map of shape {arr.shape} is not divisible by patch size {patch_size}")
    return arr.reshape(h // patch_size, patch_size, w // patch_size, patch_size)


def make_patch_labels(mask_binary: np.ndarray, patch_size: int,
                      area_threshold: float = 0.10) -> np.ndarray:
    """Per-patch labels (1 = fake) where the forged fraction strictly exceeds the threshold."""
    mask = _check_2d(mask_binary, "mask_binary")
    counts = _patch_view((mask > 0).astype(np.int64), patch_size).sum(axis=(1, 3))
    return (counts / float(patch_size * patch_size) > area_threshold).astype(np.uint8)


def make_boundary_patch_mask(boundary_map: np.ndarray, patch_size: int) -> np.ndarray:
    bmap = _check_2d(boundary_map, "boundary_map")
    return (_patch_view(bmap, patch_size).max(axis=(1, 3)) > 0).astype(np.uint8)


def resize_mask(mask: np.ndarray, side: int) -> np.ndarray:
    """Nearest-neighbour resize of a binary mask to ``side x side``."""
    mask = np.asarray(mask)
    if mask.shape == (side, side):
        return mask.copy()
    return cv2.resize(mask.astype(np.uint8), (side, side), interpolation=cv2.INTER_NEAREST)
