"""Procedural faces and soft-mask blends standing in for licensed deepfake data.

Each identity is drawn from a jittered 68-point template, so exact landmarks
come for free. A fake copies its real frame, takes a slightly warped and
colour-shifted version of the same face as the source, and pastes it back
inside the union of randomly chosen facial regions with an alpha that is the
blurred region mask restricted to the mask itself. Pixels outside the chosen
regions are therefore untouched, which makes region scores exactly zero there.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .manifest import write_rgb
from .masks import gaussian_blur
from .regions import (JAW, LEFT_BROW, LEFT_EYE, MOUTH, NOSE, REGION_NAMES, RIGHT_BROW,
                      RIGHT_EYE, TEMPLATE_68, make_region_mask_target, partition_regions)


@dataclass
class SynthIdentity:
    landmarks: np.ndarray
    skin: np.ndarray
    background: np.ndarray
    lips: np.ndarray
    iris: np.ndarray
    brow: np.ndarray
    texture_seed: int


def sample_identity(rng: np.random.Generator, side: int) -> SynthIdentity:
    center = np.array([0.5, 0.55])
    pts = TEMPLATE_68 - center
    theta = np.deg2rad(rng.uniform(-6, 6))
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    scale = rng.uniform(0.9, 1.02)
    pts = pts @ rot.T * scale + center + rng.uniform(-0.03, 0.03, size=2)
    pts = pts * (side - 1) + rng.normal(0, 0.004 * side, size=pts.shape)
    skin = rng.uniform([120, 85, 65], [200, 160, 140])
    return SynthIdentity(
        landmarks=np.clip(pts, 0, side - 1),
        skin=skin,
        background=rng.uniform(30, 225, size=3),
        lips=rng.uniform([140, 40, 50], [200, 90, 100]),
        iris=rng.uniform(20, 110, size=3),
        brow=rng.uniform(20, 80, size=3),
        texture_seed=int(rng.integers(2 ** 31)),
    )


def _i32(pts):
    return np.round(pts).astype(np.int32)


def render_face(ident: SynthIdentity, side: int, shift=(0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Draw the identity; returns (RGB uint8 image, (68, 2) landmarks)."""
    lm = ident.landmarks + np.asarray(shift, dtype=np.float64)
    yy, xx = np.mgrid[0:side, 0:side] / max(side - 1, 1)
    img = ident.background[None, None, :] * (0.85 + 0.3 * yy[..., None])

    face = np.zeros((side, side), np.uint8)
    jaw = lm[JAW]
    brows = lm[RIGHT_BROW + LEFT_BROW]
    top = brows[:, 1].min() - 0.3 * (lm[8, 1] - brows[:, 1].min())
    cx = (jaw[0, 0] + jaw[-1, 0]) / 2
    rx = (jaw[-1, 0] - jaw[0, 0]) / 2
    arc = [(cx + rx * np.cos(a), jaw[0, 1] - (jaw[0, 1] - top) * np.sin(a)) for a in np.linspace(0, np.pi, 15)]
    cv2.fillPoly(face, [_i32(np.concatenate([jaw, np.array(arc)]))], 1)
    shade = 0.9 + 0.2 * (1 - np.abs(xx - cx / side) * 2)[..., None]
    img = np.where(face[..., None] > 0, ident.skin[None, None, :] * shade, img)

    canvas = np.ascontiguousarray(img.astype(np.float32))
    thick = max(1, side // 64)
    for eye in (RIGHT_EYE, LEFT_EYE):
        cv2.fillPoly(canvas, [_i32(lm[eye])], (235.0, 235.0, 230.0))
        c = lm[eye].mean(axis=0)
        r = max(1, int(round((lm[eye, 1].max() - lm[eye, 1].min()) * 0.45)))
        cv2.circle(canvas, tuple(_i32(c)), r, tuple(float(v) for v in ident.iris), -1)
    for brow in (RIGHT_BROW, LEFT_BROW):
        cv2.polylines(canvas, [_i32(lm[brow])], False, tuple(float(v) for v in ident.brow), thick + 1)
    nose_col = tuple(float(v) for v in ident.skin * 0.7)
    cv2.polylines(canvas, [_i32(lm[NOSE[:4]])], False, nose_col, thick)
    cv2.polylines(canvas, [_i32(lm[NOSE[4:]])], False, nose_col, thick)
    cv2.fillPoly(canvas, [_i32(lm[MOUTH[:12]])], tuple(float(v) for v in ident.lips))
    cv2.polylines(canvas, [_i32(lm[MOUTH[12:]])], True, tuple(float(v) for v in ident.lips * 0.5), thick)

    tex = np.random.default_rng(ident.texture_seed).normal(0, 1, size=(side, side, 3))
    tex = cv2.GaussianBlur(tex, (0, 0), max(side / 64, 0.5)) * 6.0
    out = np.clip(canvas + tex, 0, 255).round().astype(np.uint8)
    return out, lm


def blend_fake(real: np.ndarray, landmarks: np.ndarray, rng: np.random.Generator,
               forged_set=None, blur_kernel: int = 5, blur_sigma: float = 1.0):
    """Return (fake image, binary manipulation mask, forged region names)."""
    side = real.shape[0]
    regions = partition_regions(landmarks, real.shape)
    if forged_set is None:
        while True:
            bits = rng.integers(0, 2, size=len(REGION_NAMES))
            if bits.any():
                break
        forged_set = frozenset(n for n, b in zip(REGION_NAMES, bits) if b)
    mask = make_region_mask_target(regions, forged_set)

    s = rng.uniform(0.97, 1.03)
    a = np.deg2rad(rng.uniform(-3, 3))
    c = np.array([side / 2, side / 2])
    m = cv2.getRotationMatrix2D(tuple(c), np.rad2deg(a), s)
    m[:, 2] += rng.uniform(-1.0, 1.0, size=2)
    src = cv2.warpAffine(real, m, (side, side), borderMode=cv2.BORDER_REFLECT).astype(np.float64)
    offset = rng.choice([-1.0, 1.0], size=3) * rng.uniform(25, 40, size=3)
    src = src + offset + rng.normal(0, 3, size=src.shape)

    alpha = (mask * gaussian_blur(mask, blur_kernel, blur_sigma))[..., None]
    fake = alpha * src + (1 - alpha) * real.astype(np.float64)
    return np.clip(fake, 0, 255).round().astype(np.uint8), mask, frozenset(forged_set)


def write_synthetic_dataset(out_dir, n: int, seed: int = 0, side: int = 128,
                            frames_per_video: int = 1, blur_kernel: int = 5,
                            blur_sigma: float = 1.0) -> dict:
    """Write ``n`` real/fake video pairs in the raw layout consumed by ``prepare``.

    Layout::

        real/<video>/<frame>.png      fake/<video>/<frame>.png
        masks/<video>/<frame>.png     landmarks/<video>/<frame>.json
        pairs.json                    synth_meta.json
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    pairs, meta = {}, {}
    for i in range(n):
        ident = sample_identity(rng, side)
        real_vid, fake_vid = f"r{i:05d}", f"f{i:05d}"
        pairs[fake_vid] = real_vid
        forged = None
        for f in range(frames_per_video):
            shift = rng.uniform(-1.5, 1.5, size=2) if f else np.zeros(2)
            real, lm = render_face(ident, side, shift)
            fake, mask, forged = blend_fake(real, lm, rng, forged, blur_kernel, blur_sigma)
            name = f"{f:03d}"
            write_rgb(out / "real" / real_vid / f"{name}.png", real)
            write_rgb(out / "fake" / fake_vid / f"{name}.png", fake)
            mpath = out / "masks" / fake_vid / f"{name}.png"
            mpath.parent.mkdir(parents=True, exist_ok=True)
            cv2.imwrite(str(mpath), mask * 255)
            flat = [float(v) for v in lm.ravel()]
            for vid in (real_vid, fake_vid):
                lpath = out / "landmarks" / vid / f"{name}.json"
                lpath.parent.mkdir(parents=True, exist_ok=True)
                lpath.write_text(json.dumps(flat))
        meta[fake_vid] = sorted(forged, key=REGION_NAMES.index)
    (out / "pairs.json").write_text(json.dumps(pairs, indent=1, sort_keys=True))
    (out / "synth_meta.json").write_text(json.dumps(
        {"seed": seed, "n": n, "side": side, "frames_per_video": frames_per_video, "forged": meta},
        indent=1, sort_keys=True))
    return pairs
