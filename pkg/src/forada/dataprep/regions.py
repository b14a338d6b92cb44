"""Facial region partition, per-region forgery scores and forgery-aware prompts."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import cv2
import numpy as np

log = logging.getLogger(__name__)

REGION_NAMES = ("eyes", "nose", "mouth", "cheeks", "forehead")
NUM_PROMPT_CLASSES = 2 ** len(REGION_NAMES)
REAL_PREFIX = "real"
FAKE_PREFIX = "the fake regions are"

# 68-point (iBUG) index groups
JAW = list(range(0, 17))
RIGHT_BROW = list(range(17, 22))
LEFT_BROW = list(range(22, 27))
NOSE = list(range(27, 36))
RIGHT_EYE = list(range(36, 42))
LEFT_EYE = list(range(42, 48))
MOUTH = list(range(48, 68))

# Frontal mean-face template in unit coordinates (x right, y down).
_jaw_phi = np.pi - np.arange(17) * np.pi / 16
TEMPLATE_68 = np.array(
    [(0.5 + 0.4 * np.cos(p), 0.40 + 0.55 * np.sin(p)) for p in _jaw_phi]
    + [(0.18, 0.30), (0.24, 0.275), (0.30, 0.27), (0.36, 0.275), (0.42, 0.29)]
    + [(0.58, 0.29), (0.64, 0.275), (0.70, 0.27), (0.76, 0.275), (0.82, 0.30)]
    + [(0.50, 0.38), (0.50, 0.45), (0.50, 0.52), (0.50, 0.59)]
    + [(0.42, 0.64), (0.46, 0.655), (0.50, 0.66), (0.54, 0.655), (0.58, 0.64)]
    + [(0.25, 0.40), (0.29, 0.38), (0.33, 0.38), (0.37, 0.40), (0.33, 0.42), (0.29, 0.42)]
    + [(0.63, 0.40), (0.67, 0.38), (0.71, 0.38), (0.75, 0.40), (0.71, 0.42), (0.67, 0.42)]
    + [(0.38, 0.78), (0.42, 0.755), (0.46, 0.745), (0.50, 0.75), (0.54, 0.745), (0.58, 0.755),
       (0.62, 0.78), (0.58, 0.81), (0.54, 0.825), (0.50, 0.83), (0.46, 0.825), (0.42, 0.81)]
    + [(0.40, 0.78), (0.46, 0.77), (0.50, 0.772), (0.54, 0.77), (0.60, 0.78), (0.54, 0.795),
       (0.50, 0.80), (0.46, 0.795)],
    dtype=np.float64,
)


class RegionError(ValueError):
    pass


@dataclass
class RegionReport:
    region_masks: np.ndarray  # (5, H, W) uint8
    scores: np.ndarray  # (5,) float in [0, 1]
    pixel_threshold: float = 20.0
    region_threshold: float = 0.15
    forged_set: frozenset = field(default_factory=frozenset)
    prompt_class: int = 0

    def to_json(self) -> dict:
        return {
            "scores": [float(s) for s in self.scores],
            "pixel_threshold": self.pixel_threshold,
            "region_threshold": self.region_threshold,
            "forged_set": [n for n in REGION_NAMES if n in self.forged_set],
            "prompt_class": int(self.prompt_class),
        }


def _fill_hull(points: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape, np.uint8)
    pts = np.round(points).astype(np.int32)
    cv2.fillConvexPoly(out, cv2.convexHull(pts), 1)
    return out


def _fill_poly(points: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape, np.uint8)
    cv2.fillPoly(out, [np.round(points).astype(np.int32)], 1)
    return out


def partition_regions(landmarks, image_shape, scheme: str = "68",
                      forehead_frac: float = 0.25) -> np.ndarray:
    """Split a face into eyes, nose, mouth, cheeks and forehead masks.

    Regions are made disjoint by precedence in the order eyes, mouth, nose,
    cheeks, forehead. Returns a ``(5, H, W)`` uint8 stack in
    ``REGION_NAMES`` order.
    """
    if landmarks is None or len(landmarks) == 0:
        raise RegionError("no landmarks available; use the landmark-free partition "
                          "(data.region_mode=grid / partition_regions_grid)")
    if scheme != "68":
        raise RegionError(f"unsupported landmark scheme {scheme!r}")
    pts = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] != 68:
        raise RegionError(f"68-point scheme expects 68 landmarks, got {pts.shape[0]}")
    shape = tuple(int(s) for s in image_shape[:2])

    face_w = pts[JAW, 0].max() - pts[JAW, 0].min()
    radius = max(1, int(round(0.03 * face_w)))
    kernel = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (2 * radius + 1, 2 * radius + 1))
    eyes = _fill_hull(pts[RIGHT_BROW + RIGHT_EYE], shape) | _fill_hull(pts[LEFT_BROW + LEFT_EYE], shape)
    eyes = cv2.dilate(eyes, kernel)
    mouth = _fill_hull(pts[MOUTH], shape) & (1 - eyes)
    nose = _fill_hull(pts[NOSE], shape) & (1 - eyes) & (1 - mouth)
    taken = eyes | mouth | nose

    lower = _fill_poly(pts[JAW], shape)
    eye_bottom = int(np.ceil(pts[RIGHT_EYE + LEFT_EYE, 1].max()))
    lower[: max(0, min(eye_bottom, shape[0])), :] = 0
    cheeks = lower & (1 - taken)
    taken = taken | cheeks

    brows = pts[RIGHT_BROW + LEFT_BROW]
    face_h = pts[8, 1] - brows[:, 1].min()
    lifted = brows - np.array([0.0, forehead_frac * face_h])
    forehead = _fill_poly(np.concatenate([brows, lifted[::-1]]), shape) & (1 - taken)
    return np.stack([eyes, nose, mouth, cheeks, forehead]).astype(np.uint8)


def partition_regions_grid(image_shape) -> np.ndarray:
    """Landmark-free fallback: five fixed zones of an aligned face crop."""
    h, w = (int(s) for s in image_shape[:2])
    out = np.zeros((5, h, w), np.uint8)

    def rows(a, b):
        return slice(int(round(a * h)), int(round(b * h)))

    def cols(a, b):
        return slice(int(round(a * w)), int(round(b * w)))

    out[0, rows(0.30, 0.45), cols(0.15, 0.85)] = 1  # eyes
    out[1, rows(0.45, 0.65), cols(0.38, 0.62)] = 1  # nose
    out[2, rows(0.70, 0.88), cols(0.30, 0.70)] = 1  # mouth
    out[3, rows(0.45, 0.88), cols(0.10, 0.30)] = 1  # cheeks (left)
    out[3, rows(0.45, 0.88), cols(0.70, 0.90)] = 1  # cheeks (right)
    out[4, rows(0.08, 0.30), cols(0.20, 0.80)] = 1  # forehead
    return out


def region_forgery_scores(real_image, fake_image, region_masks, beta: float = 20.0) -> np.ndarray:
    """Fraction of each region's pixels whose RGB distance between the images is >= beta."""
    a = np.asarray(real_image, dtype=np.float64)
    b = np.asarray(fake_image, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    changed = np.sqrt(((a - b) ** 2).sum(axis=-1)) >= beta
    scores = np.zeros(len(region_masks))
    for i, region in enumerate(region_masks):
        region = np.asarray(region) > 0
        area = int(region.sum())
        if area == 0:
            log.warning("region %s is empty; scoring it as 0", REGION_NAMES[i] if i < 5 else i)
            continue
        scores[i] = np.count_nonzero(changed & region) / area
    return scores


def forged_regions(scores, nu: float = 0.15) -> frozenset:
    return frozenset(REGION_NAMES[i] for i, s in enumerate(scores) if s > nu)


def encode_prompt_class(forged_set) -> int:
    unknown = set(forged_set) - set(REGION_NAMES)
    if unknown:
        raise ValueError(f"unknown region names {sorted(unknown)}")
    return sum(1 << i for i, name in enumerate(REGION_NAMES) if name in forged_set)


def decode_prompt_class(prompt_class: int) -> frozenset:
    if not 0 <= prompt_class < NUM_PROMPT_CLASSES:
        raise ValueError(f"prompt class {prompt_class} outside [0, {NUM_PROMPT_CLASSES - 1}]")
    return frozenset(name for i, name in enumerate(REGION_NAMES) if prompt_class >> i & 1)


def assemble_prompt(forged_set) -> tuple[int, str]:
    cls = encode_prompt_class(forged_set)
    if cls == 0:
        return 0, REAL_PREFIX
    names = ", ".join(n for n in REGION_NAMES if n in forged_set)
    return cls, f"{FAKE_PREFIX} {names}"


def all_prompt_prefixes() -> list[str]:
    return [assemble_prompt(decode_prompt_class(c))[1] for c in range(NUM_PROMPT_CLASSES)]


def make_region_mask_target(region_masks, forged_set) -> np.ndarray:
    region_masks = np.asarray(region_masks)
    out = np.zeros(region_masks.shape[1:], np.uint8)
    for i, name in enumerate(REGION_NAMES):
        if name in forged_set:
            out |= (region_masks[i] > 0).astype(np.uint8)
    return out


def region_report(real_image, fake_image, region_masks, beta: float = 20.0,
                  nu: float = 0.15) -> RegionReport:
    scores = region_forgery_scores(real_image, fake_image, region_masks, beta)
    forged = forged_regions(scores, nu)
    return RegionReport(np.asarray(region_masks, np.uint8), scores, beta, nu, forged,
                        encode_prompt_class(forged))


def mask_region_report(mask_binary, region_masks, nu: float = 0.15) -> RegionReport:
    """Region report from mask coverage, for fakes whose real counterpart is unavailable."""
    mask = np.asarray(mask_binary) > 0
    scores = np.zeros(len(region_masks))
    for i, region in enumerate(region_masks):
        area = int(np.count_nonzero(region))
        scores[i] = np.count_nonzero(mask & (np.asarray(region) > 0)) / area if area else 0.0
    forged = forged_regions(scores, nu)
    return RegionReport(np.asarray(region_masks, np.uint8), scores, float("nan"), nu, forged,
                        encode_prompt_class(forged))


def template_landmarks(side: int) -> np.ndarray:
    return TEMPLATE_68 * (side - 1)
