"""Line-delimited sample manifests.

The first line is a header ``{"schema": "forada-manifest", "schema_version": 1}``;
each following line is one record with the fields
``image, label, mask, landmarks, pair_id, video_id, frame_index`` plus the
optional target sidecars written by ``prepare``. Paths are relative to the
manifest's directory. ``landmarks`` is either an inline flat ``[x0, y0, x1, ...]``
list or a relative path to a sidecar holding that flat list (JSON or
whitespace-separated text).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import cv2
import numpy as np

SCHEMA = "forada-manifest"
SCHEMA_VERSION = 1
LABELS = ("real", "fake")


class ManifestError(ValueError):
    def __init__(self, index: int, message: str):
        super().__init__(f"record {index}: {message}")
        self.index = index


@dataclass
class FaceSample:
    image: str
    label: str
    mask: str | None = None
    landmarks: np.ndarray | None = None  # (K, 2) pixel coordinates
    pair_id: str | None = None
    video_id: str | None = None
    frame_index: int = 0
    boundary_target: str | None = None  # .npz sidecar
    region_report: str | None = None  # .json sidecar
    root: Path | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.landmarks is not None:
            self.landmarks = np.asarray(self.landmarks, dtype=np.float64).reshape(-1, 2)
        if self.label == "real" and self.mask is not None:
            raise ValueError("real samples never carry a manipulation mask")

    @property
    def is_fake(self) -> bool:
        return self.label == "fake"

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def load_image(self) -> np.ndarray:
        return read_rgb(self.path(self.image))

    def load_mask(self) -> np.ndarray | None:
        if self.mask is None:
            return None
        m = cv2.imread(str(self.path(self.mask)), cv2.IMREAD_GRAYSCALE)
        if m is None:
            raise FileNotFoundError(self.path(self.mask))
        return m

    def to_record(self) -> dict:
        return {
            "image": self.image,
            "label": self.label,
            "mask": self.mask,
            "landmarks": None if self.landmarks is None else [float(v) for v in self.landmarks.ravel()],
            "pair_id": self.pair_id,
            "video_id": self.video_id,
            "frame_index": int(self.frame_index),
            "boundary_target": self.boundary_target,
            "region_report": self.region_report,
        }


def read_rgb(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise FileNotFoundError(path)
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def write_rgb(path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(np.asarray(image, np.uint8), cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write {path}")


def write_manifest(samples, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema": SCHEMA, "schema_version": SCHEMA_VERSION}) + "\n")
        for s in samples:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")
    return path


def _load_landmarks(value, root: Path, index: int):
    if value is None:
        return None
    if isinstance(value, str):
        p = root / value
        if not p.exists():
            raise ManifestError(index, f"landmark sidecar {value} not found")
        text = p.read_text().strip()
        flat = json.loads(text) if text.startswith("[") else [float(t) for t in text.replace(",", " ").split()]
    else:
        flat = value
    if len(flat) % 2:
        raise ManifestError(index, "landmark list has an odd number of values")
    return np.asarray(flat, dtype=np.float64).reshape(-1, 2)


def _parse(line: str, root: Path, index: int, check_files: bool) -> FaceSample:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(index, f"invalid JSON ({exc})") from None
    for key in ("image", "label"):
        if key not in rec:
            raise ManifestError(index, f"missing field {key!r}")
    if check_files:
        for key in ("image", "mask", "boundary_target", "region_report"):
            rel = rec.get(key)
            if rel is not None and not (root / rel).exists():
                raise ManifestError(index, f"{key} file {rel} not found")
    try:
        return FaceSample(
            image=rec["image"], label=rec["label"], mask=rec.get("mask"),
            landmarks=_load_landmarks(rec.get("landmarks"), root, index),
            pair_id=rec.get("pair_id"), video_id=rec.get("video_id"),
            frame_index=int(rec.get("frame_index", 0)),
            boundary_target=rec.get("boundary_target"), region_report=rec.get("region_report"),
            root=root,
        )
    except ValueError as exc:
        if isinstance(exc, ManifestError):
            raise
        raise ManifestError(index, str(exc)) from None


def _line_offsets(path: Path) -> list[int]:
    offsets = []
    with open(path, "rb") as fh:
        header = fh.readline()
        _check_header(header, path)
        while True:
            pos = fh.tell()
            line = fh.readline()
            if not line:
                break
            if line.strip():
                offsets.append(pos)
    return offsets


def _check_header(line: bytes, path: Path) -> None:
    try:
        head = json.loads(line)
    except json.JSONDecodeError:
        head = None
    if not isinstance(head, dict) or head.get("schema") != SCHEMA:
        raise ManifestError(-1, f"{path} has no manifest header")
    if head.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(-1, f"unsupported schema_version {head.get('schema_version')}")


def read_manifest(path, shuffle_seed: int | None = None, check_files: bool = True) -> Iterator[FaceSample]:
    """Stream samples; with ``shuffle_seed`` the order is a fixed permutation of the file order."""
    path = Path(path)
    root = path.parent
    offsets = _line_offsets(path)
    order = np.arange(len(offsets))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(offsets))
    with open(path, "rb") as fh:
        for idx in order:
            fh.seek(offsets[idx])
            yield _parse(fh.readline().decode(), root, int(idx), check_files)


def load_manifest(path, check_files: bool = True) -> list[FaceSample]:
    return list(read_manifest(path, check_files=check_files))


def relpath(path, start) -> str:
    return Path(os.path.relpath(path, start)).as_posix()
