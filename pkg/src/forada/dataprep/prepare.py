"""Turn a raw paired-face directory into a manifest plus per-sample target sidecars."""
from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from ..config import DataConfig
from .manifest import FaceSample, read_rgb, relpath, write_manifest
from .masks import binarize_mask, make_boundary_patch_mask, make_boundary_target, make_patch_labels, resize_mask
from .regions import (RegionError, RegionReport, make_region_mask_target, mask_region_report,
                      partition_regions, partition_regions_grid, region_report)

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class BoundaryTarget:
    mask_binary: np.ndarray
    boundary_map: np.ndarray
    patch_mask: np.ndarray
    patch_labels: np.ndarray
    region_mask: np.ndarray
    region_masks: np.ndarray

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in
                ("mask_binary", "boundary_map", "patch_mask", "patch_labels", "region_mask", "region_masks")}

    @classmethod
    def load(cls, path) -> "BoundaryTarget":
        with np.load(path) as z:
            return cls(**{k: z[k] for k in z.files})


def save_npz(path, arrays: dict) -> None:
    """np.savez_compressed with fixed zip timestamps so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def region_masks_for(sample_landmarks, side: int, native_side: int, cfg: DataConfig) -> np.ndarray:
    if cfg.region_mode == "grid":
        return partition_regions_grid((side, side))
    lm = None if sample_landmarks is None else np.asarray(sample_landmarks) * (side / native_side)
    return partition_regions(lm, (side, side), cfg.landmark_scheme, cfg.forehead_frac)


def build_targets(mask_native: np.ndarray | None, region_masks: np.ndarray, forged_set,
                  side: int, patch_size: int, cfg: DataConfig) -> BoundaryTarget:
    """Targets at ``side`` resolution. ``mask_native`` None means an all-real sample."""
    if mask_native is None:
        mask = np.zeros((side, side), np.uint8)
    else:
        mask = resize_mask(binarize_mask(mask_native, cfg.mask_threshold), side)
    boundary = make_boundary_target(mask, cfg.blur_kernel, cfg.blur_sigma)
    return BoundaryTarget(
        mask_binary=mask.astype(np.uint8),
        boundary_map=boundary.astype(np.float32),
        patch_mask=make_boundary_patch_mask(boundary, patch_size),
        patch_labels=make_patch_labels(mask, patch_size, cfg.area_threshold),
        region_mask=make_region_mask_target(region_masks, forged_set),
        region_masks=region_masks.astype(np.uint8),
    )


def _frames(directory: Path) -> list[Path]:
    if not directory.exists():
        return []
    return sorted(p for p in directory.rglob("*") if p.suffix.lower() in IMAGE_EXTS)


def _landmarks_for(raw: Path, video: str, stem: str):
    for ext in (".json", ".txt"):
        p = raw / "landmarks" / video / f"{stem}{ext}"
        if p.exists():
            text = p.read_text().strip()
            flat = json.loads(text) if text.startswith("[") else [float(t) for t in text.replace(",", " ").split()]
            return np.asarray(flat, np.float64).reshape(-1, 2)
    return None


def diff_mask(real: np.ndarray, fake: np.ndarray, beta: float) -> np.ndarray:
    """Manipulation mask from a real/fake pair: pixels whose RGB distance is >= beta."""
    d = np.sqrt(((real.astype(np.float64) - fake.astype(np.float64)) ** 2).sum(-1))
    m = (d >= beta).astype(np.uint8)
    return cv2.morphologyEx(m, cv2.MORPH_CLOSE, np.ones((3, 3), np.uint8))


def select_frames(frames: list[Path], limit: int | None) -> list[Path]:
    """Keep at most ``limit`` evenly spaced frames per video directory."""
    if not limit:
        return frames
    by_video: dict[Path, list[Path]] = {}
    for f in frames:
        by_video.setdefault(f.parent, []).append(f)
    out = []
    for video in sorted(by_video):
        fs = by_video[video]
        if len(fs) > limit:
            fs = [fs[i] for i in np.linspace(0, len(fs) - 1, limit).round().astype(int)]
        out.extend(fs)
    return out


def prepare_dataset(raw_dir, out_dir, cfg: DataConfig, target_side: int, patch_size: int,
                    strict: bool = False, frames_per_video: int | None = None) -> tuple[Path, list[str]]:
    """Build ``out_dir/manifest.jsonl`` and target sidecars from a raw directory.

    Raw layout: ``real/<video>/<frame>``, ``fake/<video>/<frame>``, optional
    ``masks/<video>/<frame>.png``, ``landmarks/<video>/<frame>.json`` and
    ``pairs.json`` mapping fake video ids to their source real video ids.
    Returns the manifest path and a list of per-record problems.
    """
    raw, out = Path(raw_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = json.loads((raw / "pairs.json").read_text()) if (raw / "pairs.json").exists() else {}
    samples: list[FaceSample] = []
    problems: list[str] = []

    for label in ("real", "fake"):
        for frame in select_frames(_frames(raw / label), frames_per_video):
            video = frame.parent.name
            stem = frame.stem
            try:
                sample = _prepare_one(raw, out, label, video, stem, frame, pairs, cfg, target_side, patch_size)
            except (RegionError, FileNotFoundError, ValueError) as exc:
                msg = f"{label}/{video}/{frame.name}: {exc}"
                if strict:
                    raise ValueError(msg) from exc
                log.warning("skipping %s", msg)
                problems.append(msg)
                continue
            samples.append(sample)
    if not samples:
        log.warning("no usable samples found under %s", raw)
    return write_manifest(samples, out / "manifest.jsonl"), problems


def _prepare_one(raw, out, label, video, stem, frame, pairs, cfg, side, patch_size) -> FaceSample:
    image = read_rgb(frame)
    native = image.shape[0]
    if image.shape[0] != image.shape[1]:
        raise ValueError(f"face crop must be square, got {image.shape[:2]}")
    landmarks = _landmarks_for(raw, video, stem)
    mask_path = None
    pair_id = pairs.get(video) if label == "fake" else None

    if cfg.region_mode == "landmarks" and landmarks is None:
        raise RegionError("no landmarks; use data.region_mode=grid for landmark-free data")
    regions_native = region_masks_for(landmarks, native, native, cfg)
    regions_side = region_masks_for(landmarks, side, native, cfg)

    if label == "real":
        mask_native = None
        report = RegionReport(regions_native, np.zeros(len(regions_native)), cfg.beta, cfg.nu)
    else:
        mfile = raw / "masks" / video / f"{stem}.png"
        real_frame = None
        if pair_id is not None:
            cand = [p for p in (raw / "real" / pair_id).glob(f"{stem}.*") if p.suffix.lower() in IMAGE_EXTS]
            real_frame = read_rgb(cand[0]) if cand else None
        if mfile.exists():
            mask_native = binarize_mask(cv2.imread(str(mfile), cv2.IMREAD_GRAYSCALE), cfg.mask_threshold)
            mask_path = relpath(mfile, out)
        elif real_frame is not None:
            mask_native = diff_mask(real_frame, image, cfg.beta)
        else:
            raise FileNotFoundError("fake frame has neither a mask nor a resolvable real counterpart")
        if real_frame is not None:
            report = region_report(real_frame, image, regions_native, cfg.beta, cfg.nu)
        else:
            report = mask_region_report(mask_native, regions_native, cfg.nu)

    target = build_targets(mask_native, regions_side, report.forged_set, side, patch_size, cfg)
    tdir = out / "targets" / label / video
    save_npz(tdir / f"{stem}.npz", target.arrays())
    (tdir / f"{stem}.json").write_text(json.dumps(report.to_json(), sort_keys=True))
    return FaceSample(
        image=relpath(frame, out), label=label, mask=mask_path, landmarks=landmarks,
        pair_id=pair_id, video_id=video, frame_index=int(stem) if stem.isdigit() else 0,
        boundary_target=relpath(tdir / f"{stem}.npz", out),
        region_report=relpath(tdir / f"{stem}.json", out), root=out,
    )
