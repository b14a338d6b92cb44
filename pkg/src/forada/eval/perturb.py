"""Seeded image perturbations at five severity levels per kind.

Images are uint8 RGB arrays of shape (H, W, 3). Level 0 is always the identity.
"""
from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

LEVELS = {
    # chroma multiplier in YCrCb
    "saturation": (0.4, 0.3, 0.2, 0.1, 0.0),
    # contrast factor around the per-channel mean
    "contrast": (0.85, 0.725, 0.6, 0.475, 0.35),
    # number of grey 8x8 blocks (block side grows with image side / 256)
    "block": (16, 32, 48, 64, 80),
    "blur": (3, 5, 7, 9, 11),
    "jpeg": (90, 70, 50, 30, 10),
    "noise": (5, 10, 15, 20, 25),
}
KINDS = tuple(LEVELS)
ALIASES = {
    "color_saturation": "saturation", "color_contrast": "contrast", "block_wise": "block",
    "gaussian_blur": "blur", "jpeg_compression": "jpeg", "gaussian_noise": "noise",
}


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    level: int = 1
    seed: int = 0
    # explicit parameter that bypasses the level table
    value: float | None = None

    def __post_init__(self):
        kind = ALIASES.get(self.kind, self.kind)
        if kind not in LEVELS:
            raise ValueError(f"unknown perturbation {self.kind!r}; choose from {KINDS}")
        object.__setattr__(self, "kind", kind)
        if self.value is None and not 0 <= self.level <= 5:
            raise ValueError(f"perturbation level must be in 0..5, got {self.level}")

    @property
    def parameter(self):
        if self.value is not None:
            return self.value
        return None if self.level == 0 else LEVELS[self.kind][self.level - 1]

    @property
    def is_identity(self) -> bool:
        return self.value is None and self.level == 0


def _saturation(img, factor, rng):
    ycc = cv2.cvtColor(img, cv2.COLOR_RGB2YCrCb).astype(np.float64)
    ycc[..., 1:] = (ycc[..., 1:] - 128.0) * factor + 128.0
    ycc = np.clip(np.round(ycc), 0, 255).astype(np.uint8)
    return cv2.cvtColor(ycc, cv2.COLOR_YCrCb2RGB)


def _contrast(img, factor, rng):
    x = img.astype(np.float64)
    mean = x.mean(axis=(0, 1), keepdims=True)
    return np.clip(np.round((x - mean) * factor + mean), 0, 255).astype(np.uint8)


def _block(img, count, rng):
    out = img.copy()
    h, w = img.shape[:2]
    size = 8 * max(1, min(h, w) // 256)
    for _ in range(int(count)):
        y = int(rng.integers(0, max(1, h - size + 1)))
        x = int(rng.integers(0, max(1, w - size + 1)))
        out[y:y + size, x:x + size] = 128
    return out


def _blur(img, kernel, rng):
    k = int(kernel)
    if k <= 1:
        return img.copy()
    return cv2.GaussianBlur(img, (k, k), 0, borderType=cv2.BORDER_REFLECT_101)


def _jpeg(img, quality, rng):
    ok, buf = cv2.imencode(".jpg", cv2.cvtColor(img, cv2.COLOR_RGB2BGR),
                           [cv2.IMWRITE_JPEG_QUALITY, int(quality)])
    if not ok:
        raise RuntimeError("JPEG encoding failed")
    return cv2.cvtColor(cv2.imdecode(buf, cv2.IMREAD_COLOR), cv2.COLOR_BGR2RGB)


def _noise(img, sigma, rng):
    if sigma == 0:
        return img.copy()
    x = img.astype(np.float64) + rng.normal(0.0, float(sigma), size=img.shape)
    return np.clip(np.round(x), 0, 255).astype(np.uint8)


_APPLY = {"saturation": _saturation, "contrast": _contrast, "block": _block,
          "blur": _blur, "jpeg": _jpeg, "noise": _noise}


def perturb(image: np.ndarray, spec: PerturbationSpec, sample_seed: int = 0) -> np.ndarray:
    """Apply ``spec`` to ``image``; randomness comes from (spec.seed, sample_seed) only."""
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected a uint8 (H, W, 3) image, got {image.dtype} {image.shape}")
    if spec.is_identity:
        return image.copy()
    rng = np.random.default_rng([spec.seed, sample_seed])
    return _APPLY[spec.kind](image, spec.parameter, rng)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    return float("inf") if mse == 0 else float(10 * np.log10(255.0 ** 2 / mse))
