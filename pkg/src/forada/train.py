"""Training loop, checkpoints and resume."""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np
import torch
from safetensors import safe_open
from safetensors.torch import save_file

from . import config as config_mod
from .config import RunConfig
from .data import FaceDataset, stratified_indices
from .eval.metrics import MetricError, auc
from .losses import TERMS, LossBreakdown
from .model import ForgeryDetector

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
META_KEY = "forada"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, step: int):
        super().__init__(f"loss term {term} is not finite at step {step}")
        self.term = term
        self.step = step


class CheckpointError(RuntimeError):
    pass


def configure_determinism(cfg: RunConfig) -> None:
    torch.use_deterministic_algorithms(cfg.deterministic)
    torch.backends.cudnn.benchmark = False


def build_model(cfg: RunConfig) -> ForgeryDetector:
    """Fresh model whose trainable initialisation depends only on ``cfg.seed``."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(cfg.seed)
    try:
        return ForgeryDetector(cfg)
    finally:
        torch.random.set_rng_state(gen_state)


def make_optimizer(cfg: RunConfig, params) -> torch.optim.Optimizer:
    o = cfg.optim
    if o.name == "adam":
        return torch.optim.Adam(params, lr=o.lr, weight_decay=o.weight_decay)
    if o.name == "adamw":
        return torch.optim.AdamW(params, lr=o.lr, weight_decay=o.weight_decay)
    raise config_mod.ConfigError(f"unknown optimizer {o.name!r}")


# ------------------------------------------------------------------ checkpoints

def checkpoint_tensors(model: ForgeryDetector, optimizer=None) -> dict[str, torch.Tensor]:
    out = {f"model.{n}": p.detach().clone().contiguous() for n, p in model.trainable_named_parameters()}
    if optimizer is not None:
        for name, p in model.trainable_named_parameters():
            for key, value in optimizer.state.get(p, {}).items():
                out[f"optim.{name}.{key}"] = value.detach().clone().contiguous()
    return out


def save_checkpoint(path, model: ForgeryDetector, optimizer=None, step: int = 0, extra=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = model.cfg
    meta = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "step": int(step),
        "extra": extra or {},
    }
    # a single metadata entry keeps the header byte-stable
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_file(checkpoint_tensors(model, optimizer), str(tmp),
              metadata={META_KEY: json.dumps(meta, sort_keys=True)})
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    with safe_open(str(path), framework="pt") as f:
        header = f.metadata() or {}
        if META_KEY not in header:
            raise CheckpointError(f"{path} is not a detector checkpoint (no '{META_KEY}' metadata)")
        meta = json.loads(header[META_KEY])
        tensors = {k: f.get_tensor(k) for k in f.keys()}
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema version {meta.get('schema_version')}")
    return meta, tensors


def load_into(model: ForgeryDetector, tensors: dict, optimizer=None) -> None:
    named = dict(model.trainable_named_parameters())
    missing = [n for n in named if f"model.{n}" not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks trainable tensors: {missing[:10]}")
    with torch.no_grad():
        for name, p in named.items():
            src = tensors[f"model.{name}"]
            if src.shape != p.shape:
                raise CheckpointError(f"{name}: checkpoint shape {tuple(src.shape)} != model {tuple(p.shape)}")
            p.copy_(src)
    if optimizer is not None:
        for name, p in named.items():
            state = {k.rsplit(".", 1)[1]: v.clone() for k, v in tensors.items()
                     if k.startswith(f"optim.{name}.") and k.count(".") == name.count(".") + 2}
            if state:
                optimizer.state[p] = state


def load_model(path, strict_hash_against: RunConfig | None = None) -> tuple[ForgeryDetector, dict]:
    """Rebuild a model from a checkpoint's embedded config and weights."""
    meta, tensors = read_checkpoint(path)
    cfg = config_mod.from_dict(meta["config"])
    if strict_hash_against is not None and strict_hash_against.config_hash() != meta["config_hash"]:
        log.warning("checkpoint config differs from the requested config:\n  %s",
                    "\n  ".join(config_mod.diff(meta["config"], strict_hash_against.to_dict())))
    model = build_model(cfg)
    load_into(model, tensors)
    model.eval()
    return model, meta


# --------------------------------------------------------------------- trainer

class Trainer:
    def __init__(self, cfg: RunConfig, train_set: FaceDataset, val_set: FaceDataset | None = None):
        configure_determinism(cfg)
        self.cfg = cfg
        self.train_set = train_set
        self.val_set = val_set
        self.model = build_model(cfg)
        self.optimizer = make_optimizer(cfg, self.model.trainable_parameters())
        self.step = 0

    def batch(self, step: int) -> dict:
        idx = stratified_indices(self.train_set.labels, self.cfg.batch_size, self.cfg.seed, step)
        return self.train_set.collate(idx)

    def train_step(self, batch: dict) -> LossBreakdown:
        model = self.model
        model.train()
        out = model(batch["images"])
        bd = model.compute_losses(out, batch)
        for name in TERMS:
            if name in bd.values and not torch.isfinite(bd.values[name]).all():
                raise NonFiniteLossError(name, self.step + 1)
        if not torch.isfinite(bd.total):
            raise NonFiniteLossError("total", self.step + 1)
        self.optimizer.zero_grad(set_to_none=False)
        if bd.total.requires_grad:
            bd.total.backward()
        clip = self.cfg.optim.grad_clip
        if clip:
            torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), clip)
        self.optimizer.step()
        self.step += 1
        return bd

    def log_record(self, bd: LossBreakdown) -> dict:
        rec = {"step": self.step, **bd.as_floats(), "lr": self.optimizer.param_groups[0]["lr"]}
        rec["skipped"] = sorted(k for k, v in bd.skipped.items() if v)
        return rec

    @torch.no_grad()
    def validate(self, batch_size: int = 32) -> float | None:
        if self.val_set is None or len(self.val_set) == 0:
            return None
        self.model.eval()
        scores = []
        for start in range(0, len(self.val_set), batch_size):
            idx = range(start, min(start + batch_size, len(self.val_set)))
            scores.append(self.model.score(self.val_set.images(idx)).numpy())
        try:
            return auc(np.concatenate(scores), self.val_set.labels)
        except MetricError:
            return None

    def save(self, path, extra=None) -> Path:
        return save_checkpoint(path, self.model, self.optimizer, self.step, extra)

    def restore(self, path) -> dict:
        meta, tensors = read_checkpoint(path)
        if meta["config_hash"] != self.cfg.config_hash():
            lines = config_mod.diff(
                {k: v for k, v in meta["config"].items() if k not in RunConfig._SCHEDULE_KEYS},
                self.cfg.trajectory_dict())
            raise CheckpointError("refusing to resume: config hash mismatch "
                                  f"({meta['config_hash']} vs {self.cfg.config_hash()})\n  " + "\n  ".join(lines))
        load_into(self.model, tensors, self.optimizer)
        self.step = int(meta["step"])
        return meta


@torch.no_grad()
def heldout_losses(model: ForgeryDetector, dataset: FaceDataset, batch_size: int = 64) -> dict[str, float]:
    """Per-sample loss terms (l0, l1, l4) averaged over a whole dataset.

    The contrastive terms depend on batch composition and are left out.
    """
    model.eval()
    sums: dict[str, float] = {}
    n = 0
    for start in range(0, len(dataset), batch_size):
        idx = list(range(start, min(start + batch_size, len(dataset))))
        batch = dataset.collate(idx)
        bd = model.compute_losses(model(batch["images"]), batch)
        for k in ("l0", "l1", "l4"):
            if k in bd.values:
                sums[k] = sums.get(k, 0.0) + float(bd.values[k]) * len(idx)
        n += len(idx)
    return {k: v / n for k, v in sums.items()}


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line and json.loads(line)["step"] <= step]
    path.write_text("".join(line + "\n" for line in keep))


def fit(cfg: RunConfig, train_set: FaceDataset, out_dir, val_set: FaceDataset | None = None,
        resume: str | Path | None = None, steps: int | None = None, progress=None) -> Path:
    """Train for ``cfg.steps`` (or ``steps``) and return the selected checkpoint.

    Writes ``train_log.jsonl`` (one record per step), ``last.safetensors``,
    periodic ``step_XXXXXX.safetensors`` and, with a validation set and
    ``eval_every > 0``, ``best.safetensors`` chosen by validation AUC.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    total = cfg.steps if steps is None else steps
    trainer = Trainer(cfg, train_set, val_set)
    log_path = out / "train_log.jsonl"
    best = {"auc": -math.inf, "step": None}
    if resume:
        meta = trainer.restore(resume)
        best = meta.get("extra", {}).get("best", best)
        _truncate_log(log_path, trainer.step)
    else:
        log_path.write_text("")
    if trainer.step == 0:
        trainer.save(out / "step_000000.safetensors")

    with log_path.open("a") as fh:
        while trainer.step < total:
            bd = trainer.train_step(trainer.batch(trainer.step))
            rec = trainer.log_record(bd)
            if cfg.eval_every and trainer.step % cfg.eval_every == 0:
                val_auc = trainer.validate()
                rec["val_auc"] = val_auc
                if val_auc is not None and val_auc > best["auc"]:
                    best = {"auc": val_auc, "step": trainer.step}
                    trainer.save(out / "best.safetensors", {"best": best})
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            if progress is not None:
                progress(rec)
            if cfg.checkpoint_every and trainer.step % cfg.checkpoint_every == 0:
                trainer.save(out / f"step_{trainer.step:06d}.safetensors", {"best": best})
    last = trainer.save(out / "last.safetensors", {"best": best})
    best_path = out / "best.safetensors"
    return best_path if best["step"] is not None and best_path.exists() else last
