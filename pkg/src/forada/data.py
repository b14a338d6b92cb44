"""Manifest-backed tensors for training and scoring."""
from __future__ import annotations

import json
from dataclasses import dataclass

import cv2
import numpy as np
import torch

from .config import RunConfig
from .dataprep.manifest import FaceSample
from .dataprep.masks import make_patch_labels, resize_mask
from .dataprep.prepare import BoundaryTarget


def resize_image(image: np.ndarray, side: int) -> np.ndarray:
    if image.shape[0] == side and image.shape[1] == side:
        return image
    interp = cv2.INTER_AREA if image.shape[0] > side else cv2.INTER_LINEAR
    return cv2.resize(image, (side, side), interpolation=interp)


def group_key(sample: FaceSample) -> str:
    """Fakes share a group with the real video they were made from."""
    if sample.is_fake and sample.pair_id:
        return sample.pair_id
    return sample.video_id or sample.image


def split_by_group(samples: list[FaceSample], val_fraction: float, seed: int):
    """Deterministic train/val split that never separates a real video from its fakes."""
    groups = sorted({group_key(s) for s in samples})
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(groups))
    n_val = int(round(val_fraction * len(groups)))
    val_groups = {groups[i] for i in order[:n_val]}
    train = [s for s in samples if group_key(s) not in val_groups]
    val = [s for s in samples if group_key(s) in val_groups]
    return train, val


@dataclass
class Item:
    image: np.ndarray  # (S, S, 3) uint8
    label: int
    boundary: np.ndarray
    patch_mask: np.ndarray
    adapter_patch_labels: np.ndarray
    clip_patch_labels: np.ndarray
    region_mask: np.ndarray
    prompt_class: int


class FaceDataset:
    """Random-access view of prepared samples; items are cached after first load."""

    def __init__(self, samples: list[FaceSample], cfg: RunConfig, cache: bool = True):
        self.samples = list(samples)
        self.cfg = cfg
        self.cache = cache
        self._items: dict[int, Item] = {}
        v = cfg.backbone.visual
        self.side = max(v.input_side, cfg.adapter.input_side)
        self.labels = np.array([int(s.is_fake) for s in self.samples], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.samples)

    def _load(self, i: int) -> Item:
        s = self.samples[i]
        cfg = self.cfg
        v, a = cfg.backbone.visual, cfg.adapter
        image = resize_image(s.load_image(), self.side)
        if s.boundary_target is None:
            raise ValueError(f"{s.image}: no boundary-target sidecar; run prepare first")
        t = BoundaryTarget.load(s.path(s.boundary_target))
        mask = t.mask_binary
        clip_mask = resize_mask(mask, v.input_side)
        prompt_class = 0
        if s.region_report:
            prompt_class = int(json.loads(s.path(s.region_report).read_text())["prompt_class"])
        return Item(
            image=image,
            label=int(s.is_fake),
            boundary=t.boundary_map.astype(np.float32),
            patch_mask=t.patch_mask.astype(np.uint8),
            adapter_patch_labels=make_patch_labels(resize_mask(mask, a.input_side), a.patch_size,
                                                   cfg.data.area_threshold),
            clip_patch_labels=make_patch_labels(clip_mask, v.patch_size, cfg.data.area_threshold),
            region_mask=t.region_mask.astype(np.float32),
            prompt_class=prompt_class,
        )

    def __getitem__(self, i: int) -> Item:
        if i in self._items:
            return self._items[i]
        item = self._load(i)
        if self.cache:
            self._items[i] = item
        return item

    def images(self, indices) -> torch.Tensor:
        arr = np.stack([self[i].image for i in indices])
        return torch.from_numpy(arr).permute(0, 3, 1, 2).float()

    def collate(self, indices) -> dict:
        items = [self[i] for i in indices]

        def stack(name, dtype):
            return torch.from_numpy(np.stack([getattr(it, name) for it in items])).to(dtype)

        return {
            "images": self.images(indices),
            "labels": torch.tensor([it.label for it in items], dtype=torch.long),
            "boundary": stack("boundary", torch.float32),
            "patch_mask": stack("patch_mask", torch.float32),
            "adapter_patch_labels": stack("adapter_patch_labels", torch.long),
            "clip_patch_labels": stack("clip_patch_labels", torch.long),
            "region_mask": stack("region_mask", torch.float32),
            "prompt_class": torch.tensor([it.prompt_class for it in items], dtype=torch.long),
        }


def stratified_indices(labels: np.ndarray, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Batch ``step`` as a pure function of (seed, step): half real, half fake.

    Falls back to uniform sampling when one class is absent.
    """
    rng = np.random.default_rng([seed, step])
    real = np.flatnonzero(labels == 0)
    fake = np.flatnonzero(labels == 1)
    if len(real) == 0 or len(fake) == 0:
        pool = np.arange(len(labels))
        return rng.choice(pool, size=batch_size, replace=len(pool) < batch_size)
    n_real = batch_size - batch_size // 2
    n_fake = batch_size // 2
    r = rng.choice(real, size=n_real, replace=len(real) < n_real)
    f = rng.choice(fake, size=n_fake, replace=len(fake) < n_fake)
    return np.concatenate([r, f])
