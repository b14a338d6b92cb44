"""Full detector: frozen backbone, side adapter, CLS* probes and classifier."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .adapter import AdapterState, BoundaryPrediction, ForensicsAdapter, upsample_map
from .backbone import CLIP_MEAN, CLIP_STD, ClipBackbone, ClipState
from .config import RunConfig
from .dataprep.regions import all_prompt_prefixes
from .losses import (LossBreakdown, loss_classification, loss_masked_boundary,
                     loss_patchwise_contrastive, loss_samplewise_contrastive,
                     loss_text_alignment, total_loss)

ADAPTER_MEAN = (0.5, 0.5, 0.5)
ADAPTER_STD = (0.5, 0.5, 0.5)


@dataclass
class ForwardOutput:
    clip: ClipState
    adapter: AdapterState
    heads: BoundaryPrediction
    cls_star: torch.Tensor  # (B, N, embed_dim) after ln_post/proj
    feature: torch.Tensor  # (B, embed_dim) pooled probe feature
    logits: torch.Tensor  # (B, 2)

    @property
    def fake_prob(self) -> torch.Tensor:
        return self.logits.softmax(-1)[:, 1]


def normalize_images(images: torch.Tensor, side: int, mean, std) -> torch.Tensor:
    """uint8-range (B, 3, H, W) float images -> resized, normalised model input."""
    x = images.float() / 255.0
    if x.shape[-1] != side or x.shape[-2] != side:
        x = F.interpolate(x, size=(side, side), mode="bilinear", align_corners=False, antialias=True)
    m = torch.tensor(mean, dtype=x.dtype).view(1, 3, 1, 1)
    s = torch.tensor(std, dtype=x.dtype).view(1, 3, 1, 1)
    return (x - m) / s


class ForgeryDetector(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.plus = cfg.mode == "forada++"
        vcfg = cfg.backbone.visual
        self.backbone = ClipBackbone(cfg.backbone, with_text=self.plus)
        self.adapter = ForensicsAdapter(cfg.adapter, vcfg.width)
        self.head = nn.Linear(vcfg.embed_dim, 2)
        self.prompt_prefixes = all_prompt_prefixes()

    # ------------------------------------------------------------ parameters
    def trainable_named_parameters(self):
        out = [(f"adapter.{n}", p) for n, p in self.adapter.named_parameters()]
        out += [(f"head.{n}", p) for n, p in self.head.named_parameters()]
        vb = self.backbone.vision
        out += [(f"refine.{n}", p) for n, p in vb.refine.named_parameters()]
        if vb.refine_sample is not None:
            out += [(f"refine_sample.{n}", p) for n, p in vb.refine_sample.named_parameters()]
        if self.backbone.prompt_suffix is not None:
            out.append(("prompt_suffix", self.backbone.prompt_suffix))
        return out

    def trainable_parameters(self):
        return [p for _, p in self.trainable_named_parameters()]

    def frozen_named_tensors(self) -> dict[str, torch.Tensor]:
        return self.backbone.frozen_state()

    def count_trainable(self) -> dict[str, int]:
        groups: dict[str, int] = {}
        for name, p in self.trainable_named_parameters():
            key = name.split(".")[0] if not name.startswith("adapter.") else "adapter." + name.split(".")[1]
            groups[key] = groups.get(key, 0) + p.numel()
        groups["total"] = sum(v for k, v in groups.items())
        return groups

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen towers stay in eval mode
        self.backbone.vision.visual.eval()
        if self.backbone.text is not None:
            self.backbone.text.eval()
        return self

    # --------------------------------------------------------------- forward
    def preprocess(self, images: torch.Tensor):
        v, a = self.cfg.backbone.visual, self.cfg.adapter
        return (normalize_images(images, v.input_side, CLIP_MEAN, CLIP_STD),
                normalize_images(images, a.input_side, ADAPTER_MEAN, ADAPTER_STD))

    def classify(self, cls_star: torch.Tensor) -> torch.Tensor:
        """Average-pool the probe tokens and apply the linear head."""
        return self.head(cls_star.mean(dim=1))

    def forward(self, images: torch.Tensor, keep_attention: bool = False) -> ForwardOutput:
        x_clip, x_adapter = self.preprocess(images)
        vb = self.backbone.vision
        state = vb.encode_visual(x_clip)
        astate = self.adapter(x_adapter, state.taps)
        heads = self.adapter.heads(astate)
        probes = vb.run_probes(state, heads.attention_bias, self.cfg.adapter.num_query, keep_attention)
        cls_star = vb.visual.output_features(probes)
        feature = cls_star.mean(dim=1)
        return ForwardOutput(state, astate, heads, cls_star, feature, self.head(feature))

    @torch.no_grad()
    def score(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward(images).fake_prob

    def text_embeddings(self) -> torch.Tensor:
        return self.backbone.encode_prompts(self.prompt_prefixes)

    def align_scale(self) -> float:
        s = self.cfg.loss.align_scale
        return self.backbone.logit_scale() if s == "clip" else float(s)

    # ----------------------------------------------------------------- loss
    def compute_losses(self, out: ForwardOutput, batch: dict) -> LossBreakdown:
        """Assemble every loss term for one batch.

        ``batch`` keys: labels (B,), boundary (B, S, S), patch_mask (B, g, g),
        adapter_patch_labels (B, g, g), clip_patch_labels (B, g', g'),
        region_mask (B, S, S) and prompt_class (B,) in ForAda++ mode.
        """
        cfg = self.cfg
        tau = cfg.loss.tau
        labels = batch["labels"]
        bd = LossBreakdown()
        bd.values["l0"] = loss_classification(out.logits, labels)

        pred = out.heads.boundary_map
        if self.plus:
            target = batch["region_mask"].float().unsqueeze(1)
            bd.values["l1"] = loss_masked_boundary(upsample_map(pred, target.shape[-1]), target)
        else:
            target = batch["boundary"].float().unsqueeze(1)
            bd.values["l1"] = loss_masked_boundary(upsample_map(pred, target.shape[-1]), target,
                                                   batch["patch_mask"].unsqueeze(1))

        apl = batch["adapter_patch_labels"].reshape(-1)
        terms = []
        for layer in cfg.adapter.contrastive_tap_layers:
            feats = out.adapter.intermediate[layer]
            val, skipped = loss_patchwise_contrastive(feats.reshape(-1, feats.shape[-1]), apl, tau)
            if not skipped:
                terms.append(val)
        if terms:
            bd.values["l2_adapter"] = torch.stack(terms).mean()
        else:
            bd.values["l2_adapter"], bd.skipped["l2_adapter"] = out.logits.sum() * 0.0, True

        refined = out.clip.refined
        cpl = batch["clip_patch_labels"].reshape(-1)
        bd.values["l2_clip"], bd.skipped["l2_clip"] = loss_patchwise_contrastive(
            refined.reshape(-1, refined.shape[-1]), cpl, tau)

        sample = out.clip.refined_sample.mean(dim=1)
        bd.values["l3"], bd.skipped["l3"] = loss_samplewise_contrastive(sample, labels, tau)

        if self.plus:
            text = self.text_embeddings()
            bd.values["l4"] = loss_text_alignment(out.feature, text, batch["prompt_class"], self.align_scale())
        total_loss(bd, cfg.loss, cfg.mode)
        return bd
