"""Lightweight side adapter: plain ViT over patches + N learnable query tokens."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import AdapterConfig, ConfigError


@dataclass
class AdapterState:
    vis_tokens: torch.Tensor  # (B, hw, d)
    query_tokens: torch.Tensor  # (B, N, d)
    intermediate: dict[int, torch.Tensor]  # layer -> (B, hw, d)
    h: int
    w: int


@dataclass
class BoundaryPrediction:
    boundary_map: torch.Tensor  # (B, 1, h, w) in (0, 1)
    attention_bias: torch.Tensor  # (B, hw, N)
    logits_map: torch.Tensor  # pre-conv V_bb Q^T, (B, hw, N)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


def _mlp(dim_in: int, dim_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim_in, dim_in), nn.GELU(), nn.Linear(dim_in, dim_out))


class ForensicsAdapter(nn.Module):
    def __init__(self, cfg: AdapterConfig, backbone_width: int):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        g = cfg.grid
        self.patch_embed = nn.Conv2d(3, d, cfg.patch_size, cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, g * g, d))
        self.query = nn.Parameter(torch.zeros(1, cfg.num_query, d))
        self.blocks = nn.ModuleList([Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.num_layers)])
        self.norm = nn.LayerNorm(d)
        # 1x1 convs aligning backbone taps to the adapter width
        self.fusion = nn.ModuleDict({str(src): nn.Conv2d(backbone_width, d, 1) for src in cfg.fusion_map})
        self.query_mlp = _mlp(d, cfg.head_dim)
        self.boundary_mlp = _mlp(d, cfg.head_dim)
        self.bias_mlp = _mlp(d, cfg.head_dim)
        self.boundary_conv = nn.Sequential(
            nn.Conv2d(cfg.num_query, cfg.conv_hidden, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(cfg.conv_hidden, 1, 3, padding=1),
        )
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.normal_(self.query, std=cfg.query_init_std)
        if cfg.fusion_init == "zero":
            for conv in self.fusion.values():
                nn.init.zeros_(conv.weight)
                nn.init.zeros_(conv.bias)

    def _fuse(self, tap: torch.Tensor, src: int) -> torch.Tensor:
        b, t, c = tap.shape
        g = self.cfg.grid
        x = tap.transpose(1, 2).reshape(b, c, g, g)
        return self.fusion[str(src)](x).flatten(2).transpose(1, 2)

    def forward(self, image: torch.Tensor, taps: dict[int, torch.Tensor] | None) -> AdapterState:
        cfg = self.cfg
        taps = taps or {}
        missing = [src for src in cfg.fusion_map if src not in taps]
        if missing:
            raise ConfigError(f"adapter expects backbone taps at layers {sorted(cfg.fusion_map)}, "
                              f"missing {missing}")
        by_target = {tgt: src for src, tgt in cfg.fusion_map.items()}
        vis = self.patch_embed(image).flatten(2).transpose(1, 2) + self.pos_embed
        hw = vis.shape[1]
        x = torch.cat([vis, self.query.expand(vis.shape[0], -1, -1)], dim=1)
        intermediate = {}
        for i, block in enumerate(self.blocks, start=1):
            if i in by_target:
                src = by_target[i]
                x = torch.cat([x[:, :hw] + self._fuse(taps[src], src), x[:, hw:]], dim=1)
            x = block(x)
            if i in cfg.contrastive_tap_layers:
                intermediate[i] = x[:, :hw]
        x = self.norm(x)
        g = cfg.grid
        return AdapterState(x[:, :hw], x[:, hw:], intermediate, g, g)

    def project_queries(self, state: AdapterState) -> torch.Tensor:
        return self.query_mlp(state.query_tokens)

    def predict_boundary_map(self, vis_tokens, q, h: int, w: int):
        """sigmoid(Conv(V_bb Q^T)); returns (map (B,1,h,w), pre-conv product (B,hw,N))."""
        v_bb = self.boundary_mlp(vis_tokens)
        prod = torch.matmul(v_bb, q.transpose(-2, -1))
        x = prod.transpose(1, 2).reshape(prod.shape[0], prod.shape[2], h, w)
        return torch.sigmoid(self.boundary_conv(x)), prod

    def predict_attention_bias(self, vis_tokens, q) -> torch.Tensor:
        """Delta = V_ab Q^T with shape (B, hw, N)."""
        return torch.matmul(self.bias_mlp(vis_tokens), q.transpose(-2, -1))

    def heads(self, state: AdapterState) -> BoundaryPrediction:
        q = self.project_queries(state)
        bmap, prod = self.predict_boundary_map(state.vis_tokens, q, state.h, state.w)
        return BoundaryPrediction(bmap, self.predict_attention_bias(state.vis_tokens, q), prod)


def upsample_map(bmap: torch.Tensor, side: int) -> torch.Tensor:
    if bmap.shape[-1] == side:
        return bmap
    return F.interpolate(bmap, size=(side, side), mode="bilinear", align_corners=False)
