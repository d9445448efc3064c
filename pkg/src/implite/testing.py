"""Tiny randomly initialized models for tests, demos, and benchmarks.

Builds fully valid containers (a few hundred KB) whose decoder, encoder,
and tokenizer run the exact same code paths as full-size models. The
tokenizer content is a fixed byte-level vocab with a small hand-written
merge list, so fixtures are deterministic for a given seed.
"""

from __future__ import annotations

import argparse

import numpy as np
from PIL import Image

from .container import ModelManifest, write_container
from .lora import LoraAdapter, default_lora_targets
from .model_config import DEFAULT_TEMPLATE
from .tensor import Tensor
from .tokenizer import render_merges_blob, render_vocab_blob
from .vision import n_visual_tokens

# ordered byte-pair merges over common English bigrams; later merges may
# reference the results of earlier ones
DEFAULT_MERGES: list[tuple[bytes, bytes]] = [
    (b" ", b"t"),
    (b"h", b"e"),
    (b"i", b"n"),
    (b"a", b"n"),
    (b"r", b"e"),
    (b"o", b"n"),
    (b"e", b"r"),
    (b" ", b"a"),
    (b" t", b"he"),
    (b"o", b"u"),
    (b"s", b"t"),
    (b"e", b"n"),
    (b" ", b"s"),
    (b" ", b"w"),
    (b"i", b"t"),
    (b"o", b"r"),
    (b"e", b"s"),
    (b" a", b"n"),
    (b"in", b"g"),
    (b"a", b"r"),
    (b"a", b"l"),
    (b" ", b"c"),
    (b" ", b"o"),
    (b"l", b"l"),
]


def build_tokenizer_blobs(merges=None):
    """(vocab blob, merges blob, special ids, vocab_size) for a byte-level BPE."""
    merges = DEFAULT_MERGES if merges is None else merges
    vocab: dict[int, bytes] = {b: bytes([b]) for b in range(256)}
    seen = {bytes([b]) for b in range(256)}
    next_id = 256
    for left, right in merges:
        result = left + right
        if left not in seen or right not in seen or result in seen:
            raise ValueError(f"invalid merge ({left!r}, {right!r})")
        vocab[next_id] = result
        seen.add(result)
        next_id += 1
    specials = {}
    for name in ("bos", "eos", "image"):
        vocab[next_id] = b""
        specials[name] = next_id
        next_id += 1
    return render_vocab_blob(vocab), render_merges_blob(merges), specials, next_id


def tiny_metadata(
    *,
    name: str = "tiny",
    d_model: int = 64,
    n_layers: int = 2,
    n_heads: int = 4,
    context_len: int = 1024,
    mlp_dim: int | None = None,
    tied_head: bool = False,
    template: str = DEFAULT_TEMPLATE,
    d_vit: int = 32,
    vit_layers: int = 2,
    vit_heads: int = 4,
    patch_size: int = 14,
    image_res: int = 196,
    vit_mlp_dim: int | None = None,
    connector_hidden: int = 48,
) -> dict:
    vocab_blob, merges_blob, specials, vocab_size = build_tokenizer_blobs()
    meta: dict = {
        "model.name": name,
        "llm.d_model": d_model,
        "llm.n_layers": n_layers,
        "llm.n_heads": n_heads,
        "llm.vocab_size": vocab_size,
        "llm.context_len": context_len,
        "llm.mlp_dim": 4 * d_model if mlp_dim is None else mlp_dim,
        "llm.rope_theta": 10000.0,
        "llm.tied_head": int(tied_head),
        "llm.template": template,
        "vit.d_model": d_vit,
        "vit.n_layers": vit_layers,
        "vit.n_heads": vit_heads,
        "vit.patch_size": patch_size,
        "vit.image_res": image_res,
        "vit.mlp_dim": 4 * d_vit if vit_mlp_dim is None else vit_mlp_dim,
        "vit.feature_layer": vit_layers,
        "connector.hidden_dim": connector_hidden,
    }
    for i, (m, s) in enumerate(zip((0.48, 0.46, 0.41), (0.27, 0.26, 0.28))):
        meta[f"image.mean.{i}"] = m
        meta[f"image.std.{i}"] = s
    meta["tokenizer.vocab"] = vocab_blob
    meta["tokenizer.merges"] = merges_blob
    meta["tokenizer.bos_id"] = specials["bos"]
    meta["tokenizer.eos_id"] = specials["eos"]
    meta["tokenizer.image_id"] = specials["image"]
    return meta


def _proj(rng, out_dim, in_dim):
    return rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(out_dim, in_dim)).astype(np.float32)


def _block_tensors(rng, prefix: str, d: int, mlp: int) -> dict[str, np.ndarray]:
    t = {}
    for ln in ("ln1", "ln2"):
        t[f"{prefix}.{ln}.weight"] = (1.0 + 0.1 * rng.normal(size=d)).astype(np.float32)
        t[f"{prefix}.{ln}.bias"] = (0.05 * rng.normal(size=d)).astype(np.float32)
    for proj in ("wq", "wk", "wv", "wo"):
        t[f"{prefix}.attn.{proj}.weight"] = _proj(rng, d, d)
        t[f"{prefix}.attn.{proj}.bias"] = (0.01 * rng.normal(size=d)).astype(np.float32)
    t[f"{prefix}.mlp.fc1.weight"] = _proj(rng, mlp, d)
    t[f"{prefix}.mlp.fc1.bias"] = (0.01 * rng.normal(size=mlp)).astype(np.float32)
    t[f"{prefix}.mlp.fc2.weight"] = _proj(rng, d, mlp)
    t[f"{prefix}.mlp.fc2.bias"] = (0.01 * rng.normal(size=d)).astype(np.float32)
    return t


def tiny_weights(meta: dict, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d = meta["llm.d_model"]
    mlp = meta["llm.mlp_dim"]
    vocab = meta["llm.vocab_size"]
    d_v = meta["vit.d_model"]
    vit_mlp = meta["vit.mlp_dim"]
    patch = meta["vit.patch_size"]
    n_v = n_visual_tokens(meta["vit.image_res"], patch)
    arrays: dict[str, np.ndarray] = {}

    arrays["llm.embed.weight"] = rng.normal(0.0, 1.0, size=(vocab, d)).astype(np.float32)
    for i in range(meta["llm.n_layers"]):
        arrays.update(_block_tensors(rng, f"llm.blocks.{i}", d, mlp))
    arrays["llm.ln_f.weight"] = (1.0 + 0.1 * rng.normal(size=d)).astype(np.float32)
    arrays["llm.ln_f.bias"] = (0.05 * rng.normal(size=d)).astype(np.float32)
    if not meta["llm.tied_head"]:
        arrays["llm.lm_head.weight"] = _proj(rng, vocab, d)

    arrays["vit.patch_embed.weight"] = _proj(rng, d_v, 3 * patch * patch)
    arrays["vit.patch_embed.bias"] = (0.01 * rng.normal(size=d_v)).astype(np.float32)
    arrays["vit.pos_embed"] = (0.02 * rng.normal(size=(n_v, d_v))).astype(np.float32)
    for i in range(meta["vit.n_layers"]):
        arrays.update(_block_tensors(rng, f"vit.blocks.{i}", d_v, vit_mlp))
    arrays["vit.ln_f.weight"] = (1.0 + 0.1 * rng.normal(size=d_v)).astype(np.float32)
    arrays["vit.ln_f.bias"] = (0.05 * rng.normal(size=d_v)).astype(np.float32)

    hidden = meta["connector.hidden_dim"]
    arrays["connector.fc1.weight"] = _proj(rng, hidden, d_v)
    arrays["connector.fc1.bias"] = (0.01 * rng.normal(size=hidden)).astype(np.float32)
    arrays["connector.fc2.weight"] = _proj(rng, d, hidden)
    arrays["connector.fc2.bias"] = (0.01 * rng.normal(size=d)).astype(np.float32)

    return {name: Tensor.from_numpy(a) for name, a in arrays.items()}


def build_tiny_model(path, seed: int = 0, **meta_overrides) -> str:
    """Write a complete runnable tiny container to `path`."""
    meta = tiny_metadata(**meta_overrides)
    tensors = tiny_weights(meta, seed=seed)
    write_container(ModelManifest(meta), tensors, path)
    return str(path)


def random_rgb(seed: int = 0, width: int = 64, height: int = 48) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)


def save_png(path, image: np.ndarray) -> str:
    Image.fromarray(image, mode="RGB").save(path, format="PNG")
    return str(path)


def random_adapters(
    manifest: ModelManifest,
    targets: list[str] | None = None,
    rank: int = 4,
    alpha: float = 8.0,
    seed: int = 0,
    scale: float = 0.05,
) -> dict[str, LoraAdapter]:
    """Random low-rank adapters over the default (or given) target weights."""
    rng = np.random.default_rng(seed)
    if targets is None:
        targets = default_lora_targets(manifest)
    entries = {e.name: e for e in manifest.tensor_index}
    adapters = {}
    for name in targets:
        d_out, d_in = entries[name].shape
        adapters[name] = LoraAdapter(
            name=name,
            a=(scale * rng.normal(size=(rank, d_in))).astype(np.float32),
            b=(scale * rng.normal(size=(d_out, rank))).astype(np.float32),
            alpha=alpha,
        )
    return adapters


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="write a tiny runnable model container")
    parser.add_argument("out")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--image-res", type=int, default=196)
    args = parser.parse_args(argv)
    path = build_tiny_model(args.out, seed=args.seed, image_res=args.image_res)
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
