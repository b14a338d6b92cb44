"""Score a manifest, compute frame/video metrics, perturbation curves and embedding dumps."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .metrics import EvalRecord, MetricError, summary, video_aggregate
from .perturb import KINDS, PerturbationSpec, perturb

# (images uint8 (B, H, W, 3), sample indices) -> fake probabilities
Scorer = Callable[[np.ndarray, list[int]], np.ndarray]


@dataclass
class EvalOptions:
    batch_size: int = 32
    video_aggregate: str = "mean"
    perturbations: list[str] = field(default_factory=list)
    levels: tuple[int, ...] = (1, 2, 3, 4, 5)
    perturb_seed: int = 0
    embeddings: bool = False


def model_scorer(model, embeddings: list | None = None) -> Scorer:
    model.eval()

    @torch.no_grad()
    def score(images: np.ndarray, indices):
        x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()
        out = model(x)
        if embeddings is not None:
            embeddings.append(out.feature.numpy().astype(np.float32))
        return out.fake_prob.numpy().astype(np.float64)

    return score


def score_dataset(dataset, scorer: Scorer, batch_size: int = 32,
                  spec: PerturbationSpec | None = None) -> list[EvalRecord]:
    """Score every sample of a FaceDataset, optionally after a perturbation."""
    records = []
    for start in range(0, len(dataset), batch_size):
        idx = list(range(start, min(start + batch_size, len(dataset))))
        imgs = [dataset[i].image for i in idx]
        if spec is not None:
            imgs = [perturb(img, spec, sample_seed=i) for img, i in zip(imgs, idx)]
        scores = np.asarray(scorer(np.stack(imgs), idx), dtype=np.float64)
        for i, s in zip(idx, scores):
            sample = dataset.samples[i]
            records.append(EvalRecord(sample.video_id or sample.image, int(sample.frame_index),
                                      float(s), int(dataset.labels[i])))
    return records


def _metrics(records: list[EvalRecord], how: str) -> dict:
    out = {}
    for level, recs in (("frame", records), ("video", video_aggregate(records, how))):
        try:
            out[level] = summary(recs)
        except MetricError as exc:
            out[level] = {"error": str(exc), "n": len(recs)}
    return out


def evaluate(dataset, scorer: Scorer, options: EvalOptions | None = None,
             meta: dict | None = None) -> tuple[dict, dict]:
    """Return (report, artifacts). ``artifacts`` holds per-frame records and embeddings."""
    opts = options or EvalOptions()
    report = {"meta": meta or {}, "video_aggregate": opts.video_aggregate}
    records = score_dataset(dataset, scorer, opts.batch_size)
    report.update(_metrics(records, opts.video_aggregate))
    curves = {}
    for kind in opts.perturbations:
        if kind not in KINDS:
            PerturbationSpec(kind)  # raises with the list of valid kinds
        curves[kind] = {}
        for level in opts.levels:
            spec = PerturbationSpec(kind, level, opts.perturb_seed)
            recs = records if spec.is_identity else score_dataset(dataset, scorer, opts.batch_size, spec)
            curves[kind][str(level)] = _metrics(recs, opts.video_aggregate)
    if curves:
        report["perturbations"] = curves
    return report, {"records": records}


def evaluate_model(model, dataset, options: EvalOptions | None = None, meta: dict | None = None):
    opts = options or EvalOptions()
    embeddings: list = []
    scorer = model_scorer(model, embeddings if opts.embeddings else None)
    # embeddings are only collected on the clean pass
    report, artifacts = evaluate(dataset, scorer, EvalOptions(
        opts.batch_size, opts.video_aggregate, [], opts.levels, opts.perturb_seed, opts.embeddings), meta)
    if opts.embeddings:
        artifacts["embeddings"] = np.concatenate(embeddings) if embeddings else np.zeros((0, 0), np.float32)
    if opts.perturbations:
        curves, _ = evaluate(dataset, model_scorer(model), EvalOptions(
            opts.batch_size, opts.video_aggregate, opts.perturbations, opts.levels, opts.perturb_seed), meta)
        report["perturbations"] = curves["perturbations"]
    return report, artifacts


def write_report(report: dict, artifacts: dict, out_dir, name: str = "eval") -> dict[str, Path]:
    """Write ``<name>_report.json``, metric/score CSVs and the optional embedding dump."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / f"{name}_report.json"}
    paths["report"].write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

    paths["metrics"] = out / f"{name}_metrics.csv"
    with paths["metrics"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["perturbation", "level", "granularity", "auc", "ap", "eer", "n"])
        rows = [("none", 0, report)]
        for kind, levels in report.get("perturbations", {}).items():
            rows += [(kind, int(lv), m) for lv, m in levels.items()]
        for kind, lv, m in rows:
            for gran in ("frame", "video"):
                r = m[gran]
                w.writerow([kind, lv, gran, r.get("auc", ""), r.get("ap", ""), r.get("eer", ""), r["n"]])

    paths["scores"] = out / f"{name}_scores.csv"
    with paths["scores"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "video_id", "frame_index", "label", "score"])
        for i, r in enumerate(artifacts["records"]):
            w.writerow([i, r.video_id, r.frame_index, r.label, repr(r.score)])

    if "embeddings" in artifacts:
        paths["embeddings"] = out / f"{name}_embeddings.npy"
        np.save(paths["embeddings"], artifacts["embeddings"])
    return paths
