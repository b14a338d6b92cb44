"""Frozen CLIP-style vision/text encoders with the CLS* probe stream.

Parameter names follow the OpenAI CLIP ``state_dict`` layout
(``visual.transformer.resblocks.{i}.attn.in_proj_weight`` etc.), so a converted
checkpoint in a safetensors archive loads directly. Without a weights file the
encoders are initialised from ``init_seed`` and stay frozen.

Evaluation order: the visual stream runs once (the 1x1 refinement is applied
to the output tokens of ``refine_layer``), the adapter turns the taps into one
attention bias, and the CLS* probes then replay over the cached per-layer
inputs. The probes only read visual keys/values, so nothing in the visual
stream depends on them.
"""
from __future__ import annotations

import hashlib
import math
import os
import re
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import WEIGHTS_ENV, BackboneConfig, TextEncoderConfig, VisualEncoderConfig
from .dataprep.regions import REGION_NAMES

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class WeightsError(RuntimeError):
    pass


class QuickGELU(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(1.702 * x)


class LayerNorm(nn.LayerNorm):
    def forward(self, x):
        return super().forward(x.float()).type(x.dtype)


def biased_attention(q, k, v, bias=None, scale: float | None = None):
    """softmax(scale * q k^T + bias) v over the last two dims.

    ``bias`` broadcasts against the ``(..., Lq, Lk)`` logits.
    Returns (output, attention weights).
    """
    scale = q.shape[-1] ** -0.5 if scale is None else scale
    logits = torch.matmul(q, k.transpose(-2, -1)) * scale
    if bias is not None:
        logits = logits + bias
    weights = logits.softmax(dim=-1)
    return torch.matmul(weights, v), weights


class MultiheadSelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.in_proj_weight = nn.Parameter(torch.empty(3 * width, width))
        self.in_proj_bias = nn.Parameter(torch.zeros(3 * width))
        self.out_proj = nn.Linear(width, width)
        nn.init.normal_(self.in_proj_weight, std=width ** -0.5)

    def _split(self, x):
        b, t, c = x.shape
        return x.view(b, t, self.heads, c // self.heads).transpose(1, 2)

    def _merge(self, x):
        b, h, t, d = x.shape
        return x.transpose(1, 2).reshape(b, t, h * d)

    def project(self, x, which: str):
        w, b = self.in_proj_weight.chunk(3), self.in_proj_bias.chunk(3)
        i = "qkv".index(which)
        return self._split(F.linear(x, w[i], b[i]))

    def forward(self, x, attn_mask=None):
        q, k, v = self.project(x, "q"), self.project(x, "k"), self.project(x, "v")
        out, _ = biased_attention(q, k, v, attn_mask)
        return self.out_proj(self._merge(out))


class ResidualAttentionBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.attn = MultiheadSelfAttention(width, heads)
        self.ln_1 = LayerNorm(width)
        self.mlp = nn.Sequential(OrderedDict([
            ("c_fc", nn.Linear(width, width * 4)),
            ("gelu", QuickGELU()),
            ("c_proj", nn.Linear(width * 4, width)),
        ]))
        self.ln_2 = LayerNorm(width)

    def forward(self, x, attn_mask=None):
        x = x + self.attn(self.ln_1(x), attn_mask)
        return x + self.mlp(self.ln_2(x))


class Transformer(nn.Module):
    def __init__(self, width: int, layers: int, heads: int):
        super().__init__()
        self.resblocks = nn.Sequential(*[ResidualAttentionBlock(width, heads) for _ in range(layers)])


@dataclass
class ClipState:
    """Visual-stream results for a batch.

    ``layer_inputs[l]`` holds the full token sequence ``[CLS, vis...]`` fed to
    layer ``l + 1``; ``taps`` maps 1-based layer ids to visual tokens after
    that layer; ``refined`` is the 1x1-conv output X' at the refine layer.
    """
    layer_inputs: list[torch.Tensor]
    taps: dict[int, torch.Tensor]
    refined: torch.Tensor | None
    refined_sample: torch.Tensor | None
    output: torch.Tensor
    cls_star: torch.Tensor | None = None
    attn_weights: list[torch.Tensor] = field(default_factory=list)

    @property
    def vis_tokens(self) -> list[torch.Tensor]:
        return [x[:, 1:] for x in self.layer_inputs] + [self.output[:, 1:]]

    @property
    def cls_token(self) -> list[torch.Tensor]:
        return [x[:, 0] for x in self.layer_inputs] + [self.output[:, 0]]


class VisionTransformer(nn.Module):
    def __init__(self, cfg: VisualEncoderConfig):
        super().__init__()
        self.cfg = cfg
        width = cfg.width
        scale = width ** -0.5
        self.conv1 = nn.Conv2d(3, width, cfg.patch_size, cfg.patch_size, bias=False)
        self.class_embedding = nn.Parameter(scale * torch.randn(width))
        self.positional_embedding = nn.Parameter(scale * torch.randn(cfg.grid ** 2 + 1, width))
        self.ln_pre = LayerNorm(width)
        self.transformer = Transformer(width, cfg.num_layers, cfg.heads)
        self.ln_post = LayerNorm(width)
        self.proj = nn.Parameter(scale * torch.randn(width, cfg.embed_dim))

    @property
    def blocks(self):
        return self.transformer.resblocks

    def embed(self, image):
        x = self.conv1(image).flatten(2).transpose(1, 2)
        cls = self.class_embedding.to(x.dtype).expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.positional_embedding.to(x.dtype)
        return self.ln_pre(x)

    def output_features(self, tokens):
        return self.ln_post(tokens) @ self.proj


class RefineConv(nn.Module):
    """Trainable 1x1 conv over visual tokens (a per-token linear map)."""

    def __init__(self, width: int, init: str = "normal"):
        super().__init__()
        self.conv = nn.Conv2d(width, width, 1)
        if init == "zero":
            nn.init.zeros_(self.conv.weight)
            nn.init.zeros_(self.conv.bias)

    def forward(self, tokens):
        b, t, c = tokens.shape
        g = math.isqrt(t)
        x = tokens.transpose(1, 2).reshape(b, c, g, g)
        return self.conv(x).flatten(2).transpose(1, 2)


class VisualBackbone(nn.Module):
    """Frozen vision tower plus the trainable layer-``refine_layer`` refinement."""

    def __init__(self, cfg: VisualEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.visual = VisionTransformer(cfg)
        self.refine = RefineConv(cfg.width, cfg.refine_init)
        self.refine_sample = RefineConv(cfg.width, cfg.refine_init) if cfg.separate_refine else None

    def encode_visual(self, image) -> ClipState:
        cfg = self.cfg
        v = self.visual
        refine_at = cfg.refine_layer
        layer_inputs, taps = [], {}
        refined = refined_sample = None
        # layers before the refinement see no trainable parameter
        with torch.no_grad():
            x = v.embed(image)
        for i, block in enumerate(v.blocks, start=1):
            layer_inputs.append(x)
            if i <= refine_at:
                with torch.no_grad():
                    x = block(x)
            else:
                x = block(x)
            if i == refine_at:
                vis = x[:, 1:]
                refined = self.refine(vis)
                delta = refined
                if self.refine_sample is not None:
                    refined_sample = self.refine_sample(vis)
                    delta = refined + refined_sample
                x = torch.cat([x[:, :1], vis + cfg.refine_blend * delta], dim=1)
            if i in cfg.tap_layers:
                taps[i] = x[:, 1:]
        return ClipState(layer_inputs, taps, refined,
                         refined if refined_sample is None else refined_sample, x)

    def cls_star_step(self, block: ResidualAttentionBlock, cls_star, layer_input, delta,
                      return_weights: bool = False):
        """One layer of probe update: attention of CLS* over this layer's visual tokens.

        ``delta`` has shape (B, hw, N) (or (hw, N)); it is transposed and added
        to the (N, hw) attention logits of every head.
        """
        vis = layer_input[:, 1:]
        hw, n = vis.shape[1], cls_star.shape[1]
        if delta is not None:
            if delta.dim() == 2:
                delta = delta.unsqueeze(0)
            if tuple(delta.shape[-2:]) != (hw, n):
                raise ValueError(f"attention bias must have shape (hw, N) = ({hw}, {n}), "
                                 f"got {tuple(delta.shape[-2:])}")
            bias = delta.transpose(-2, -1).unsqueeze(1)
        else:
            bias = None
        attn = block.attn
        h = block.ln_1(vis)
        k, v = attn.project(h, "k"), attn.project(h, "v")
        q = attn.project(block.ln_1(cls_star), "q")
        out, weights = biased_attention(q, k, v, bias)
        out = attn.out_proj(attn._merge(out))
        if self.cfg.probe_mlp:
            x = cls_star + out
            x = x + block.mlp(block.ln_2(x))
        else:
            x = out
        return (x, weights) if return_weights else x

    def run_probes(self, state: ClipState, delta, num_probes: int, keep_weights: bool = False):
        """Replay the probe stream over cached layer inputs; returns (B, N, width)."""
        first = state.layer_inputs[0]
        cls_star = first[:, :1].expand(-1, num_probes, -1)
        for block, layer_input in zip(self.visual.blocks, state.layer_inputs):
            if keep_weights:
                cls_star, w = self.cls_star_step(block, cls_star, layer_input, delta, True)
                state.attn_weights.append(w)
            else:
                cls_star = self.cls_star_step(block, cls_star, layer_input, delta)
        state.cls_star = cls_star
        return cls_star

    def forward_joint(self, image, delta, num_probes: int):
        """Single-pass reference: [CLS, vis, CLS*] in one sequence with a structured mask.

        Only used to check that the two-pass replay is equivalent.
        """
        cfg = self.cfg
        v = self.visual
        x = v.embed(image)
        b, t, _ = x.shape
        probes = x[:, :1].expand(-1, num_probes, -1)
        seq = torch.cat([x, probes], dim=1)
        total = t + num_probes
        mask = torch.zeros(b, total, total, dtype=x.dtype)
        mask[:, :t, t:] = float("-inf")  # nothing attends to probes
        mask[:, t:, :1] = float("-inf")  # probes ignore CLS
        mask[:, t:, t:] = float("-inf")  # probes ignore each other
        mask[:, t:, 1:t] = delta.transpose(-2, -1)
        mask = mask.unsqueeze(1)
        for i, block in enumerate(v.blocks, start=1):
            base, probes = seq[:, :t], seq[:, t:]
            attn_out = block.attn(block.ln_1(seq), mask)
            if cfg.probe_mlp:
                seq = seq + attn_out
                seq = seq + block.mlp(block.ln_2(seq))
            else:
                base = base + attn_out[:, :t]
                base = base + block.mlp(block.ln_2(base))
                seq = torch.cat([base, attn_out[:, t:]], dim=1)
            if i == cfg.refine_layer:
                vis = seq[:, 1:t]
                d = self.refine(vis)
                if self.refine_sample is not None:
                    d = d + self.refine_sample(vis)
                seq = torch.cat([seq[:, :1], vis + cfg.refine_blend * d, seq[:, t:]], dim=1)
        return seq[:, :t], seq[:, t:]


# ---------------------------------------------------------------- text side

class WordTokenizer:
    """Whitespace/punctuation tokenizer over the fixed prompt vocabulary."""

    PAD, SOT, EOT = 0, 1, 2
    WORDS = ("real", "the", "fake", "regions", "are", ",") + REGION_NAMES

    def __init__(self):
        self.vocab = {w: i + 3 for i, w in enumerate(self.WORDS)}
        self.sot_id, self.eot_id, self.pad_id = self.SOT, self.EOT, self.PAD

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) + 3

    def encode(self, text: str) -> list[int]:
        words = re.findall(r"[a-z]+|,", text.lower())
        try:
            return [self.vocab[w] for w in words]
        except KeyError as exc:
            raise ValueError(f"word {exc.args[0]!r} is not in the prompt vocabulary") from None


class ClipBpeTokenizer:
    """CLIP's byte-pair tokenizer loaded from a local directory (via transformers)."""

    def __init__(self, path: str):
        from transformers import CLIPTokenizer

        self._tok = CLIPTokenizer.from_pretrained(path, local_files_only=True)
        self.sot_id = self._tok.bos_token_id
        self.eot_id = self._tok.eos_token_id
        self.pad_id = 0

    @property
    def vocab_size(self) -> int:
        return len(self._tok)

    def encode(self, text: str) -> list[int]:
        return self._tok.encode(text, add_special_tokens=False)


def make_tokenizer(cfg: TextEncoderConfig):
    if cfg.tokenizer == "clip-bpe":
        if not cfg.tokenizer_path:
            raise ValueError("text.tokenizer=clip-bpe needs text.tokenizer_path")
        return ClipBpeTokenizer(cfg.tokenizer_path)
    return WordTokenizer()


class TextEncoder(nn.Module):
    """Frozen causal text transformer; prompts get K learnable suffix vectors."""

    def __init__(self, cfg: TextEncoderConfig, embed_dim: int):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = make_tokenizer(cfg)
        width = cfg.width
        self.token_embedding = nn.Embedding(cfg.vocab_size, width)
        self.positional_embedding = nn.Parameter(torch.empty(cfg.context_length, width))
        self.transformer = Transformer(width, cfg.num_layers, cfg.heads)
        self.ln_final = LayerNorm(width)
        self.text_projection = nn.Parameter(torch.empty(width, embed_dim))
        self.logit_scale = nn.Parameter(torch.ones([]) * math.log(1 / 0.07))
        nn.init.normal_(self.token_embedding.weight, std=0.02)
        nn.init.normal_(self.positional_embedding, std=0.01)
        nn.init.normal_(self.text_projection, std=width ** -0.5)
        causal = torch.full((cfg.context_length, cfg.context_length), float("-inf")).triu_(1)
        self.register_buffer("causal_mask", causal, persistent=False)

    def tokenize(self, prefixes: list[str]):
        """Token ids with K placeholder slots after each prefix.

        Returns (ids (P, ctx), suffix_slot (P, ctx) bool, eot_pos (P,)).
        """
        ctx, k = self.cfg.context_length, self.cfg.suffix_len
        tok = self.tokenizer
        ids = torch.full((len(prefixes), ctx), tok.pad_id, dtype=torch.long)
        slot = torch.zeros((len(prefixes), ctx), dtype=torch.bool)
        eot = torch.zeros(len(prefixes), dtype=torch.long)
        for i, text in enumerate(prefixes):
            body = tok.encode(text)
            if 1 + len(body) + k + 1 > ctx:
                raise ValueError(f"prompt {text!r} with {k} suffix tokens exceeds context length {ctx}")
            seq = [tok.sot_id] + body
            ids[i, : len(seq)] = torch.tensor(seq)
            slot[i, len(seq): len(seq) + k] = True
            eot[i] = len(seq) + k
            ids[i, eot[i]] = tok.eot_id
            if max(seq + [tok.eot_id]) >= self.cfg.vocab_size:
                raise ValueError("token id exceeds text.vocab_size")
        return ids, slot, eot

    def encode_prompts(self, prefixes: list[str], suffix: torch.Tensor) -> torch.Tensor:
        """Unit-norm embeddings (P, embed_dim) of ``prefix + suffix`` prompts."""
        ids, slot, eot = self.tokenize(prefixes)
        ids, slot, eot = ids.to(suffix.device), slot.to(suffix.device), eot.to(suffix.device)
        x = self.token_embedding(ids)
        k = suffix.shape[0]
        start = slot.float().argmax(dim=1, keepdim=True)
        pos = (torch.arange(ids.shape[1], device=ids.device)[None] - start).clamp(0, k - 1)
        x = torch.where(slot[..., None], suffix[pos].to(x.dtype), x)
        x = x + self.positional_embedding
        for block in self.transformer.resblocks:
            x = block(x, self.causal_mask)
        x = self.ln_final(x)
        x = x[torch.arange(x.shape[0]), eot] @ self.text_projection
        return F.normalize(x, dim=-1)


class ClipBackbone(nn.Module):
    """Frozen CLIP visual (+ optional text) encoder with its trainable extras.

    Trainable parameters: the refinement conv(s) and, when the text tower is
    present, the prompt suffix.
    """

    def __init__(self, cfg: BackboneConfig, with_text: bool = True):
        super().__init__()
        self.cfg = cfg
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(cfg.init_seed)
        try:
            self.vision = VisualBackbone(cfg.visual)
            self.text = TextEncoder(cfg.text, cfg.visual.embed_dim) if with_text else None
        finally:
            torch.random.set_rng_state(gen_state)
        if self.text is not None:
            self.prompt_suffix = nn.Parameter(torch.empty(cfg.text.suffix_len, cfg.text.width))
            nn.init.normal_(self.prompt_suffix, std=0.02)
        else:
            self.prompt_suffix = None
        if cfg.weights:
            self.load_weights(cfg.weights, cfg.weights_sha256)
        self.freeze()

    # names of frozen tensors, OpenAI layout
    def frozen_state(self) -> dict[str, torch.Tensor]:
        out = {f"visual.{k}": t for k, t in self.vision.visual.state_dict().items()}
        if self.text is not None:
            out.update(self.text.state_dict())
        return out

    def expected_manifest(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(t.shape) for k, t in self.frozen_state().items()}

    def freeze(self) -> None:
        for p in self.vision.visual.parameters():
            p.requires_grad_(False)
        if self.text is not None:
            for p in self.text.parameters():
                p.requires_grad_(False)

    def trainable_parameters(self):
        params = list(self.vision.refine.parameters())
        if self.vision.refine_sample is not None:
            params += list(self.vision.refine_sample.parameters())
        if self.prompt_suffix is not None:
            params.append(self.prompt_suffix)
        return params

    def load_weights(self, path, sha256: str | None = None) -> None:
        from safetensors.torch import load_file

        path = Path(path)
        if not path.is_absolute() and not path.exists() and os.environ.get(WEIGHTS_ENV):
            path = Path(os.environ[WEIGHTS_ENV]) / path
        if not path.exists():
            raise WeightsError(f"backbone weights {path} not found (expected sha256: {sha256 or 'unspecified'})")
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        if sha256 and digest != sha256:
            raise WeightsError(f"checksum mismatch for {path}: expected {sha256}, got {digest}")
        tensors = load_file(str(path))
        expected = self.expected_manifest()
        missing = sorted(set(expected) - set(tensors))
        bad = sorted(k for k in expected if k in tensors and tuple(tensors[k].shape) != expected[k])
        if missing or bad:
            lines = [f"weights {path} (sha256 {digest}) do not match the configured backbone"]
            lines += [f"  missing: {k} {expected[k]}" for k in missing[:20]]
            lines += [f"  shape: {k} expected {expected[k]} got {tuple(tensors[k].shape)}" for k in bad[:20]]
            raise WeightsError("\n".join(lines))
        target = self.frozen_state()
        with torch.no_grad():
            for k, t in target.items():
                t.copy_(tensors[k].to(t.dtype))

    def save_weights(self, path) -> None:
        from safetensors.torch import save_file

        save_file({k: t.contiguous() for k, t in self.frozen_state().items()}, str(path))

    def logit_scale(self) -> float:
        if self.text is None:
            return 1.0 / 0.07
        return float(self.text.logit_scale.exp())

    def encode_prompts(self, prefixes: list[str]) -> torch.Tensor:
        if self.text is None:
            raise RuntimeError("backbone was built without the text tower")
        return self.text.encode_prompts(prefixes, self.prompt_suffix)
