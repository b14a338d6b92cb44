from .manifest import FaceSample, ManifestError, load_manifest, read_manifest, write_manifest
from .masks import (ShapeError, binarize_mask, make_boundary_patch_mask, make_boundary_target,
                    make_patch_labels)
from .prepare import BoundaryTarget, build_targets, prepare_dataset
from .regions import (NUM_PROMPT_CLASSES, REGION_NAMES, RegionError, RegionReport, assemble_prompt,
                      decode_prompt_class, encode_prompt_class, make_region_mask_target,
                      partition_regions, partition_regions_grid, region_forgery_scores)

__all__ = [
    "FaceSample", "ManifestError", "load_manifest", "read_manifest", "write_manifest",
    "ShapeError", "binarize_mask", "make_boundary_patch_mask", "make_boundary_target",
    "make_patch_labels", "BoundaryTarget", "build_targets", "prepare_dataset",
    "NUM_PROMPT_CLASSES", "REGION_NAMES", "RegionError", "RegionReport", "assemble_prompt",
    "decode_prompt_class", "encode_prompt_class", "make_region_mask_target",
    "partition_regions", "partition_regions_grid", "region_forgery_scores",
]
