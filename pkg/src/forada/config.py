"""Run configuration: nested dataclasses, YAML I/O, dotted overrides and hashing.

Precedence when resolving a config is file < environment < command line.
Environment overrides use the ``FORADA__`` prefix with ``__`` as the key
separator, e.g. ``FORADA__OPTIM__LR=1e-4``.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

MODES = ("forada", "forada++")
ENV_PREFIX = "FORADA__"
# directory holding backbone weight archives / tokenizer files
WEIGHTS_ENV = "FORADA_WEIGHTS_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class VisualEncoderConfig:
    num_layers: int = 24
    width: int = 1024
    heads: int = 16
    patch_size: int = 14
    input_side: int = 224
    embed_dim: int = 768
    tap_layers: list[int] = field(default_factory=lambda: [1, 8, 16])
    refine_layer: int = 13
    refine_blend: float = 0.05
    # "normal" or "zero"; see README for why zero is not the default
    refine_init: str = "normal"
    # one 1x1 conv shared by the patch-wise and sample-wise terms, or two
    separate_refine: bool = False
    # CLS* probes go through the frozen out-proj + MLP + residuals (True)
    # or take the bare attention output (False)
    probe_mlp: bool = True

    @property
    def grid(self) -> int:
        return self.input_side // self.patch_size

    def validate(self) -> None:
        if self.input_side % self.patch_size:
            raise ConfigError("visual.input_side must be divisible by visual.patch_size")
        if self.width % self.heads:
            raise ConfigError("visual.width must be divisible by visual.heads")
        for layer in self.tap_layers:
            if not 1 <= layer <= self.num_layers:
                raise ConfigError(f"tap layer {layer} outside [1, {self.num_layers}]")
        if not 1 <= self.refine_layer <= self.num_layers:
            raise ConfigError(f"refine_layer {self.refine_layer} outside [1, {self.num_layers}]")
        if self.refine_init not in ("normal", "zero"):
            raise ConfigError("visual.refine_init must be 'normal' or 'zero'")


@dataclass
class TextEncoderConfig:
    num_layers: int = 12
    width: int = 768
    heads: int = 12
    context_length: int = 77
    vocab_size: int = 49408
    suffix_len: int = 8
    # "word" (built-in vocabulary) or "clip-bpe" (needs tokenizer_path)
    tokenizer: str = "word"
    tokenizer_path: str | None = None

    def validate(self) -> None:
        if self.width % self.heads:
            raise ConfigError("text.width must be divisible by text.heads")
        if self.tokenizer not in ("word", "clip-bpe"):
            raise ConfigError("text.tokenizer must be 'word' or 'clip-bpe'")


@dataclass
class BackboneConfig:
    visual: VisualEncoderConfig = field(default_factory=VisualEncoderConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    # safetensors archive with OpenAI-CLIP tensor names; None -> seeded random init
    weights: str | None = None
    weights_sha256: str | None = None
    init_seed: int = 0


@dataclass
class AdapterConfig:
    num_layers: int = 8
    patch_size: int = 16
    input_side: int = 256
    embed_dim: int = 192
    heads: int = 3
    mlp_ratio: float = 4.0
    num_query: int = 128
    head_dim: int = 128
    conv_hidden: int = 64
    # backbone tap layer -> adapter layer (both 1-based)
    fusion_map: dict[int, int] = field(default_factory=lambda: {1: 1, 8: 2, 16: 3})
    contrastive_tap_layers: list[int] = field(default_factory=lambda: [4, 5, 6])
    fusion_init: str = "normal"
    query_init_std: float = 0.02

    @property
    def grid(self) -> int:
        return self.input_side // self.patch_size

    def validate(self) -> None:
        if self.input_side % self.patch_size:
            raise ConfigError("adapter.input_side must be divisible by adapter.patch_size")
        if self.embed_dim % self.heads:
            raise ConfigError("adapter.embed_dim must be divisible by adapter.heads")
        for layer in self.fusion_map.values():
            if not 1 <= layer <= self.num_layers // 2:
                raise ConfigError(f"fusion target layer {layer} is not in the shallow half of the adapter")
        for layer in self.contrastive_tap_layers:
            if not 1 <= layer <= self.num_layers:
                raise ConfigError(f"contrastive tap {layer} outside [1, {self.num_layers}]")
        if self.fusion_init not in ("normal", "zero"):
            raise ConfigError("adapter.fusion_init must be 'normal' or 'zero'")


@dataclass
class LossWeights:
    l0: float = 10.0
    l1: float = 200.0
    l2_adapter: float = 20.0
    l2_clip: float = 10.0
    l3: float = 10.0
    l4: float = 1.5
    tau: float = 0.07
    # multiplier on the text-alignment cosines: a number, or "clip" to use
    # the backbone's logit scale
    align_scale: Any = 1.0

    def validate(self) -> None:
        for name in ("l0", "l1", "l2_adapter", "l2_clip", "l3", "l4"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")
        if self.tau <= 0:
            raise ConfigError("loss.tau must be positive")
        if not (self.align_scale == "clip" or isinstance(self.align_scale, (int, float))):
            raise ConfigError("loss.align_scale must be a number or 'clip'")


@dataclass
class DataConfig:
    mask_threshold: float = 127.0
    blur_kernel: int = 5
    blur_sigma: float = 1.0
    area_threshold: float = 0.10
    beta: float = 20.0
    nu: float = 0.15
    landmark_scheme: str = "68"
    # "landmarks" or "grid" (landmark-free zones)
    region_mode: str = "landmarks"
    forehead_frac: float = 0.25
    # side at which prepare writes target sidecars; 0 -> adapter.input_side
    target_side: int = 0

    def validate(self) -> None:
        if self.blur_kernel < 3 or self.blur_kernel % 2 == 0:
            raise ConfigError("data.blur_kernel must be an odd integer >= 3")
        if not 0 < self.mask_threshold < 255:
            raise ConfigError("data.mask_threshold must lie in (0, 255)")
        if self.region_mode not in ("landmarks", "grid"):
            raise ConfigError("data.region_mode must be 'landmarks' or 'grid'")


@dataclass
class OptimConfig:
    name: str = "adam"
    lr: float = 2e-4
    weight_decay: float = 5e-4
    grad_clip: float | None = None


@dataclass
class RunConfig:
    mode: str = "forada"
    seed: int = 0
    steps: int = 2000
    batch_size: int = 16
    frames_per_video: int = 32
    checkpoint_every: int = 500
    eval_every: int = 0
    video_aggregate: str = "mean"
    deterministic: bool = True
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    # fields that do not change the optimisation trajectory
    _SCHEDULE_KEYS = ("steps", "checkpoint_every", "eval_every", "video_aggregate")

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.video_aggregate not in ("mean", "max"):
            raise ConfigError("video_aggregate must be 'mean' or 'max'")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        self.backbone.visual.validate()
        self.backbone.text.validate()
        self.adapter.validate()
        self.loss.validate()
        self.data.validate()
        v, a = self.backbone.visual, self.adapter
        if v.grid != a.grid:
            raise ConfigError(
                f"backbone grid {v.grid}x{v.grid} and adapter grid {a.grid}x{a.grid} must match"
            )
        missing = [k for k in a.fusion_map if k not in v.tap_layers]
        if missing:
            raise ConfigError(f"fusion_map sources {missing} are not backbone tap layers {v.tap_layers}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def trajectory_dict(self) -> dict:
        d = self.to_dict()
        for k in self._SCHEDULE_KEYS:
            d.pop(k, None)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.trajectory_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def target_side(self) -> int:
        return self.data.target_side or self.adapter.input_side


def _build(cls, data: dict | None):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {cls.__name__}.{key}")
        sub = _NESTED.get((cls.__name__, key))
        if sub is not None:
            kwargs[key] = _build(sub, value)
        elif key == "fusion_map":
            kwargs[key] = {int(k): int(v) for k, v in value.items()}
        elif isinstance(value, tuple):
            kwargs[key] = list(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


_NESTED = {
    ("RunConfig", "backbone"): BackboneConfig,
    ("RunConfig", "adapter"): AdapterConfig,
    ("RunConfig", "loss"): LossWeights,
    ("RunConfig", "data"): DataConfig,
    ("RunConfig", "optim"): OptimConfig,
    ("BackboneConfig", "visual"): VisualEncoderConfig,
    ("BackboneConfig", "text"): TextEncoderConfig,
}


def from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data).validate()


def set_dotted(data: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a mapping")
    node[keys[-1]] = value


def parse_value(raw: str) -> Any:
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads "1e-3" as a string
        try:
            return float(value)
        except ValueError:
            pass
    return value


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    return key.strip(), parse_value(raw)


def env_overrides(environ=None) -> list[tuple[str, Any]]:
    environ = os.environ if environ is None else environ
    out = []
    for name, raw in sorted(environ.items()):
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower().replace("__", ".")
            out.append((key, parse_value(raw)))
    return out


PRESET_DIR = Path(__file__).parent / "configs"


def load_preset(name: str) -> dict:
    path = PRESET_DIR / f"{name}.yaml"
    if not path.exists():
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(p.stem for p in PRESET_DIR.glob('*.yaml'))}")
    return yaml.safe_load(path.read_text()) or {}


def resolve(path: str | os.PathLike | None = None, overrides=(), environ=None,
            preset: str | None = None) -> RunConfig:
    """Merge preset/file, environment and CLI overrides into a validated RunConfig."""
    data: dict = {}
    if preset:
        data = load_preset(preset)
    if path is not None:
        file_data = yaml.safe_load(Path(path).read_text()) or {}
        data = _deep_merge(data, file_data)
    for key, value in env_overrides(environ):
        set_dotted(data, key, value)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        set_dotted(data, key, value)
    return from_dict(data)


def _deep_merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def dump(cfg: RunConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    """Human-readable list of differing dotted keys between two config dicts."""
    lines = []
    for key in sorted(set(a) | set(b), key=str):
        name = f"{prefix}{key}"
        va, vb = a.get(key, "<missing>"), b.get(key, "<missing>")
        if isinstance(va, dict) and isinstance(vb, dict):
            lines.extend(diff(va, vb, name + "."))
        elif va != vb:
            lines.append(f"{name}: {va!r} != {vb!r}")
    return lines
