"""Training objectives L0..L4 and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .config import ConfigError, LossWeights

TERMS = ("l0", "l1", "l2_adapter", "l2_clip", "l3", "l4")


@dataclass
class LossBreakdown:
    values: dict[str, torch.Tensor] = field(default_factory=dict)
    skipped: dict[str, bool] = field(default_factory=dict)
    total: torch.Tensor | None = None

    def as_floats(self) -> dict[str, float]:
        out = {k: float(self.values[k].detach()) if k in self.values else 0.0 for k in TERMS}
        out["total"] = float(self.total.detach()) if self.total is not None else 0.0
        return out


def _broadcast_patches(patch_mask: torch.Tensor, shape) -> torch.Tensor:
    """Repeat a (..., g, g) patch mask up to the (..., H, W) pixel grid."""
    gh, gw = patch_mask.shape[-2:]
    h, w = shape[-2:]
    if h % gh or w % gw:
        raise ValueError(f"pixel grid {h}x{w} is not a multiple of patch grid {gh}x{gw}")
    return patch_mask.repeat_interleave(h // gh, dim=-2).repeat_interleave(w // gw, dim=-1)


def loss_masked_boundary(pred, target, patch_mask=None):
    """MSE(pred * B, target); with ``patch_mask`` None this is the plain MSE."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ in shape")
    if patch_mask is not None:
        pred = pred * _broadcast_patches(patch_mask.to(pred.dtype), pred.shape)
    return F.mse_loss(pred, target.to(pred.dtype))


def _pair_infonce(features, anchor_ids, positive_set, negative_set, tau: float):
    """Mean over anchors of the mean over their positives of
    -log(e^{s_ij} / (e^{s_ij} + sum_k e^{s_ik})), with s = cos / tau.

    ``anchor_ids`` index the anchors inside ``positive_set``.
    Returns None when no anchor has a positive partner.
    """
    z = F.normalize(features, dim=-1)
    pos = z[positive_set]
    neg = z[negative_set]
    anchors = pos[anchor_ids]
    s_pos = anchors @ pos.T / tau  # (A, P)
    if neg.shape[0]:
        neg_lse = torch.logsumexp(anchors @ neg.T / tau, dim=1, keepdim=True)
    else:
        neg_lse = torch.full((anchors.shape[0], 1), float("-inf"), dtype=z.dtype, device=z.device)
    per_pair = F.softplus(neg_lse - s_pos) if neg.shape[0] else torch.zeros_like(s_pos)
    valid = torch.ones_like(s_pos, dtype=torch.bool)
    valid[torch.arange(len(anchor_ids)), anchor_ids] = False
    counts = valid.sum(dim=1)
    keep = counts > 0
    if not keep.any():
        return None
    per_anchor = (per_pair * valid).sum(dim=1)[keep] / counts[keep]
    return per_anchor.mean()


def loss_patchwise_contrastive(features, patch_labels, tau: float = 0.07):
    """Contrastive loss between real (0) and fake (1) patch features.

    ``features``: (M, d) patch vectors pooled over the batch; ``patch_labels``: (M,).
    Both sets act as anchors. Returns (loss, skipped).
    """
    labels = patch_labels.reshape(-1).bool()
    features = features.reshape(labels.shape[0], -1)
    real, fake = (~labels).nonzero().squeeze(1), labels.nonzero().squeeze(1)
    if real.numel() == 0 or fake.numel() == 0:
        return features.sum() * 0.0, True
    terms, weights = [], []
    for same, other in ((real, fake), (fake, real)):
        if same.numel() < 2:
            continue
        val = _pair_infonce(features, torch.arange(same.numel()), same, other, tau)
        if val is not None:
            terms.append(val)
            weights.append(same.numel())
    if not terms:
        return features.sum() * 0.0, True
    w = torch.tensor(weights, dtype=features.dtype, device=features.device)
    return (torch.stack(terms) * w).sum() / w.sum(), False


def loss_samplewise_contrastive(sample_features, labels, tau: float = 0.07):
    """Real samples are anchors and positives; fakes only appear as negatives."""
    labels = labels.reshape(-1).bool()
    real, fake = (~labels).nonzero().squeeze(1), labels.nonzero().squeeze(1)
    if real.numel() < 2:
        return sample_features.sum() * 0.0, True
    val = _pair_infonce(sample_features, torch.arange(real.numel()), real, fake, tau)
    return val, False


def loss_classification(logits, labels):
    return F.cross_entropy(logits, labels.long())


def loss_text_alignment(visual_feature, text_embeddings, prompt_class, scale: float = 1.0):
    """Cross-entropy over ``scale * cos(visual, text_i)`` for all prompt classes."""
    prompt_class = prompt_class.reshape(-1).long()
    n = text_embeddings.shape[0]
    if (prompt_class < 0).any() or (prompt_class >= n).any():
        raise ValueError(f"prompt class outside [0, {n - 1}]")
    cos = F.normalize(visual_feature, dim=-1) @ F.normalize(text_embeddings, dim=-1).T
    return F.cross_entropy(scale * cos, prompt_class)


def total_loss(breakdown: LossBreakdown, weights: LossWeights, mode: str = "forada"):
    for name in ("l0", "l1", "l2_adapter", "l2_clip", "l3", "l4"):
        if getattr(weights, name) < 0:
            raise ConfigError(f"negative loss weight {name}")
    total = None
    for name in TERMS:
        if name == "l4" and mode != "forada++":
            continue
        if breakdown.skipped.get(name) or name not in breakdown.values:
            continue
        term = getattr(weights, name) * breakdown.values[name]
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros(())
    breakdown.total = total
    return total
