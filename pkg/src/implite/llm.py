"""Decoder-only LLM: multimodal connector, prompt assembly, KV-cached forward, sampling.

The decoder is a pre-norm transformer with rotary position embeddings,
GELU MLP, and an optionally weight-tied output head. Prefill runs the
whole prompt in one causal pass and fills the cache; decode_step extends
the cache one token at a time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import CapacityError, ConsistencyError, TemplateError
from .model_config import ConnectorConfig, DecoderConfig
from .vision import VisualTokens
from .weights import WeightSet


def project_visual(tokens: VisualTokens, weights: WeightSet, cfg: ConnectorConfig) -> np.ndarray:
    """Two-layer MLP mapping [N_v, d_v] visual features into the word embedding space."""
    fc1 = weights.linear("connector.fc1")
    fc2 = weights.linear("connector.fc2")
    if fc1.in_dim != cfg.d_in or fc1.out_dim != cfg.hidden_dim:
        raise ConsistencyError(
            f"connector.fc1 is [{fc1.out_dim}x{fc1.in_dim}], expected "
            f"[{cfg.hidden_dim}x{cfg.d_in}]"
        )
    if fc2.in_dim != cfg.hidden_dim or fc2.out_dim != cfg.d_out:
        raise ConsistencyError(
            f"connector.fc2 is [{fc2.out_dim}x{fc2.in_dim}], expected "
            f"[{cfg.d_out}x{cfg.hidden_dim}]"
        )
    return fc2(ops.gelu(fc1(tokens.features)))


def assemble_prompt(
    token_ids: list[int],
    visual: np.ndarray | None,
    embed_table: np.ndarray,
    image_token_id: int,
) -> tuple[np.ndarray, int]:
    """Embed prompt ids, splicing projected visual embeddings at the placeholder.

    Returns (embeddings [N_prompt, d_model], N_prompt) where N_prompt counts
    text tokens plus visual embeddings; the placeholder itself is replaced.
    """
    positions = [i for i, t in enumerate(token_ids) if t == image_token_id]
    if visual is None:
        if positions:
            raise TemplateError("prompt contains an image placeholder but no image was supplied")
        emb = embed_table[np.asarray(token_ids, dtype=np.int64)] if token_ids else np.zeros(
            (0, embed_table.shape[1]), dtype=np.float32
        )
        return emb.astype(np.float32), len(token_ids)
    if len(positions) != 1:
        raise TemplateError(
            f"template must contain exactly one image placeholder, found {len(positions)}"
        )
    at = positions[0]
    before = embed_table[np.asarray(token_ids[:at], dtype=np.int64)]
    after = embed_table[np.asarray(token_ids[at + 1 :], dtype=np.int64)]
    emb = np.concatenate([before, visual, after], axis=0).astype(np.float32)
    n_prompt = (len(token_ids) - 1) + visual.shape[0]
    return emb, n_prompt


class KVCache:
    """Preallocated per-layer key/value history; all layers share one length."""

    def __init__(self, cfg: DecoderConfig):
        self.cfg = cfg
        shape = (cfg.n_layers, cfg.n_heads, cfg.context_len, cfg.head_dim)
        self.k = np.zeros(shape, dtype=np.float32)
        self.v = np.zeros(shape, dtype=np.float32)
        self.length = 0

    def reserve(self, n_new: int) -> int:
        """Check capacity for n_new positions; returns the start position."""
        if self.length + n_new > self.cfg.context_len:
            raise CapacityError(
                f"context window full: {self.length} cached + {n_new} new tokens "
                f"exceeds context_len {self.cfg.context_len}"
            )
        return self.length

    def put(self, layer: int, start: int, k_new: np.ndarray, v_new: np.ndarray) -> None:
        n = k_new.shape[1]
        self.k[layer, :, start : start + n] = k_new
        self.v[layer, :, start : start + n] = v_new

    def view(self, layer: int, upto: int) -> tuple[np.ndarray, np.ndarray]:
        return self.k[layer, :, :upto], self.v[layer, :, :upto]

    def advance(self, n_new: int) -> None:
        self.length += n_new


class Decoder:
    """Weight-driven decoder; one instance is shared read-only across sessions."""

    def __init__(self, weights: WeightSet, cfg: DecoderConfig):
        self.cfg = cfg
        self.w = weights
        embed = weights.array("llm.embed.weight")
        if embed.shape != (cfg.vocab_size, cfg.d_model):
            raise ConsistencyError(
                f"llm.embed.weight shape {embed.shape} does not match vocab "
                f"{cfg.vocab_size} x d_model {cfg.d_model}"
            )
        if not cfg.tied_head and "llm.lm_head.weight" not in weights:
            raise ConsistencyError("model has no llm.lm_head.weight and llm.tied_head is 0")

    @property
    def embed_table(self) -> np.ndarray:
        return self.w.array("llm.embed.weight")

    def new_cache(self) -> KVCache:
        return KVCache(self.cfg)

    def embed(self, token_ids) -> np.ndarray:
        return self.embed_table[np.asarray(token_ids, dtype=np.int64)].astype(np.float32)

    def _logits(self, x: np.ndarray) -> np.ndarray:
        x = ops.layer_norm(x, self.w.array("llm.ln_f.weight"), self.w.array("llm.ln_f.bias"))
        if self.cfg.tied_head:
            return ops.linear(x, self.embed_table)
        return self.w.linear("llm.lm_head")(x)

    def forward(self, embeddings: np.ndarray, cache: KVCache) -> np.ndarray:
        """Causal pass over new embeddings [T, d], extending the cache; logits [T, vocab]."""
        cfg = self.cfg
        t = embeddings.shape[0]
        start = cache.reserve(t)
        positions = np.arange(start, start + t)
        cos, sin = ops.rope_angles(positions, cfg.head_dim, cfg.rope_theta)
        x = ops.as_f32(embeddings)
        for layer in range(cfg.n_layers):
            x = self._block(x, layer, cache, start, cos, sin)
        cache.advance(t)
        return self._logits(x)

    def _block(self, x, layer: int, cache: KVCache, start: int, cos, sin) -> np.ndarray:
        cfg = self.cfg
        w = self.w
        prefix = f"llm.blocks.{layer}"
        t = x.shape[0]
        h = ops.layer_norm(x, w.array(f"{prefix}.ln1.weight"), w.array(f"{prefix}.ln1.bias"))

        def heads(a):
            return a.reshape(t, cfg.n_heads, cfg.head_dim).transpose(1, 0, 2)

        q = heads(w.linear(f"{prefix}.attn.wq")(h))
        k = heads(w.linear(f"{prefix}.attn.wk")(h))
        v = heads(w.linear(f"{prefix}.attn.wv")(h))
        # rotate per absolute position; cos/sin rows line up with the new positions
        q = ops.rope_rotate(q, cos[None, :, :], sin[None, :, :])
        k = ops.rope_rotate(k, cos[None, :, :], sin[None, :, :])
        cache.put(layer, start, k, v)
        k_all, v_all = cache.view(layer, start + t)
        att = ops.attention(q, k_all, v_all, causal=True)
        att = att.transpose(1, 0, 2).reshape(t, cfg.d_model)
        x = x + w.linear(f"{prefix}.attn.wo")(att)
        h2 = ops.layer_norm(x, w.array(f"{prefix}.ln2.weight"), w.array(f"{prefix}.ln2.bias"))
        x = x + w.linear(f"{prefix}.mlp.fc2")(ops.gelu(w.linear(f"{prefix}.mlp.fc1")(h2)))
        return x

    def prefill(self, embeddings: np.ndarray, cache: KVCache | None = None):
        """Full causal pass over a prompt; returns (cache, last-position logits)."""
        if cache is None:
            cache = self.new_cache()
        logits = self.forward(embeddings, cache)
        return cache, logits[-1]

    def decode_step(self, cache: KVCache, token_id: int) -> np.ndarray:
        """Single-position forward using and extending the cache."""
        emb = self.embed([int(token_id)])
        return self.forward(emb, cache)[0]

    def full_logits(self, embeddings: np.ndarray) -> np.ndarray:
        """Logits at every position from one fresh full-sequence pass."""
        return self.forward(embeddings, self.new_cache())


@dataclass
class GenerationConfig:
    max_new_tokens: int = 64
    temperature: float = 0.0  # 0 = greedy
    top_p: float = 1.0
    seed: int = 0
    stop_ids: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        self.stop_ids = frozenset(int(t) for t in self.stop_ids)


def sample_token(logits, temperature: float, top_p: float, rng: np.random.Generator) -> int:
    """Greedy argmax at temperature 0 (ties -> lowest id), else top-p sampling."""
    z = np.asarray(logits, dtype=np.float64)
    if temperature == 0:
        return int(np.argmax(z))
    z = z / temperature
    z = z - z.max()
    p = np.exp(z)
    p = p / p.sum()
    order = np.argsort(-p, kind="stable")
    cumulative = np.cumsum(p[order])
    cut = int(np.searchsorted(cumulative, top_p, side="left")) + 1
    keep = order[:cut]
    kept = p[keep]
    return int(rng.choice(keep, p=kept / kept.sum()))


@dataclass
class GenerationResult:
    token_ids: list[int]
    timestamps: list[float]  # perf_counter at each emitted token
    elapsed: float  # wall seconds spent in the decode loop

    @property
    def n_gen(self) -> int:
        return len(self.token_ids)


def generate(
    decoder: Decoder,
    cache: KVCache,
    first_logits: np.ndarray,
    cfg: GenerationConfig,
    on_token=None,
) -> GenerationResult:
    """Sample up to max_new_tokens, stepping each sampled token into the cache.

    Every emitted token costs exactly one single-position forward, so the
    decode loop wall time divided by the token count is the generation
    speed. Stops early on stop ids or a full context window.
    """
    rng = np.random.default_rng(cfg.seed)
    tokens: list[int] = []
    stamps: list[float] = []
    logits = first_logits
    started = time.perf_counter()
    for _ in range(cfg.max_new_tokens):
        tok = sample_token(logits, cfg.temperature, cfg.top_p, rng)
        tokens.append(tok)
        stamps.append(time.perf_counter())
        if on_token is not None:
            on_token(tok)
        if cache.length >= decoder.cfg.context_len:
            break
        logits = decoder.decode_step(cache, tok)
        if tok in cfg.stop_ids:
            break
    return GenerationResult(tokens, stamps, time.perf_counter() - started)
