"""Architecture hyperparameters pulled out of container metadata.

The container makes the architecture data-driven: decoder and encoder
shapes, rotary base, head tying, and the chat template all come from
metadata so differently shaped backbones run through the same code.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

DEFAULT_TEMPLATE = "USER: <image>\n{prompt} ASSISTANT:"
DEFAULT_ROPE_THETA = 10000.0
IMAGE_PLACEHOLDER = "<image>"


def _require(meta: dict, key: str) -> int:
    if key not in meta:
        raise ConfigError(f"metadata missing required key {key!r}")
    return int(meta[key])


@dataclass(frozen=True)
class VitConfig:
    d_model: int
    n_layers: int
    n_heads: int
    patch_size: int
    image_res: int
    mlp_dim: int
    feature_layer: int

    @classmethod
    def from_metadata(cls, meta: dict) -> "VitConfig":
        d_model = _require(meta, "vit.d_model")
        n_layers = _require(meta, "vit.n_layers")
        cfg = cls(
            d_model=d_model,
            n_layers=n_layers,
            n_heads=_require(meta, "vit.n_heads"),
            patch_size=_require(meta, "vit.patch_size"),
            image_res=_require(meta, "vit.image_res"),
            mlp_dim=int(meta.get("vit.mlp_dim", 4 * d_model)),
            feature_layer=int(meta.get("vit.feature_layer", n_layers)),
        )
        _check_heads(cfg.d_model, cfg.n_heads, "vit")
        if not 1 <= cfg.feature_layer <= cfg.n_layers:
            raise ConfigError(
                f"vit.feature_layer {cfg.feature_layer} outside 1..{cfg.n_layers}"
            )
        if cfg.image_res < cfg.patch_size:
            raise ConfigError(
                f"vit.image_res {cfg.image_res} smaller than patch size {cfg.patch_size}"
            )
        return cfg


@dataclass(frozen=True)
class DecoderConfig:
    d_model: int
    n_layers: int
    n_heads: int
    vocab_size: int
    context_len: int
    mlp_dim: int
    rope_theta: float
    tied_head: bool
    template: str

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def from_metadata(cls, meta: dict) -> "DecoderConfig":
        d_model = _require(meta, "llm.d_model")
        cfg = cls(
            d_model=d_model,
            n_layers=_require(meta, "llm.n_layers"),
            n_heads=_require(meta, "llm.n_heads"),
            vocab_size=_require(meta, "llm.vocab_size"),
            context_len=_require(meta, "llm.context_len"),
            mlp_dim=int(meta.get("llm.mlp_dim", 4 * d_model)),
            rope_theta=float(meta.get("llm.rope_theta", DEFAULT_ROPE_THETA)),
            tied_head=bool(int(meta.get("llm.tied_head", 0))),
            template=str(meta.get("llm.template", DEFAULT_TEMPLATE)),
        )
        _check_heads(cfg.d_model, cfg.n_heads, "llm")
        if cfg.head_dim % 2 != 0:
            raise ConfigError(f"llm head dimension {cfg.head_dim} must be even for rotary embedding")
        return cfg


@dataclass(frozen=True)
class ConnectorConfig:
    d_in: int
    hidden_dim: int
    d_out: int

    @classmethod
    def from_metadata(cls, meta: dict) -> "ConnectorConfig":
        return cls(
            d_in=_require(meta, "vit.d_model"),
            hidden_dim=_require(meta, "connector.hidden_dim"),
            d_out=_require(meta, "llm.d_model"),
        )


def image_norm_constants(meta: dict) -> tuple[list[float], list[float]]:
    mean = [float(meta.get(f"image.mean.{i}", 0.5)) for i in range(3)]
    std = [float(meta.get(f"image.std.{i}", 0.5)) for i in range(3)]
    return mean, std


def _check_heads(d_model: int, n_heads: int, what: str) -> None:
    if n_heads < 1 or d_model % n_heads != 0:
        raise ConfigError(f"{what}.d_model {d_model} not divisible by n_heads {n_heads}")
