"""Image preprocessing and the ViT-style visual encoder.

Two preprocessing strategies are supported: resize-to-square (stretch both
sides to the target resolution) and resize-then-pad (scale the longest side,
center the content, fill the border with the dataset mean color so padded
pixels normalize to exactly zero).
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import ops
from .errors import ConsistencyError
from .model_config import VitConfig
from .weights import WeightSet

MODE_SQUARE = "resize_to_square"
MODE_PAD = "resize_then_pad"
MODES = (MODE_SQUARE, MODE_PAD)


@dataclass
class PreprocessedImage:
    pixels: np.ndarray  # [3, R, R] float32, normalized
    source_size: tuple[int, int]  # (width, height)
    pad_box: tuple[int, int, int, int]  # (left, top, right, bottom) pad widths
    mode: str


@dataclass
class VisualTokens:
    features: np.ndarray  # [n_tokens, d_model]

    @property
    def n_tokens(self) -> int:
        return self.features.shape[0]


def load_image_rgb(src) -> np.ndarray:
    """Decode PNG/JPEG (path or bytes) to an [H, W, 3] uint8 RGB bitmap."""
    if isinstance(src, (bytes, bytearray)):
        img = Image.open(io.BytesIO(src))
    else:
        img = Image.open(Path(src))
    return np.asarray(img.convert("RGB"), dtype=np.uint8)


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers, edges clamped."""
    src = img.astype(np.float64)
    in_h, in_w = src.shape[:2]

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0.0, n_in - 1)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, wy = coords(out_h, in_h)
    x0, x1, wx = coords(out_w, in_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def preprocess_image(image, mode: str, target_res: int, mean, std) -> PreprocessedImage:
    """Resize, pad (mode-dependent), and per-channel normalize (x/255 - mean)/std."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an [H, W, 3] RGB bitmap, got shape {img.shape}")
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise ValueError("zero-size image")
    if mode not in MODES:
        raise ValueError(f"unknown preprocessing mode {mode!r}, expected one of {MODES}")
    mean = np.asarray(mean, dtype=np.float64).reshape(3)
    std = np.asarray(std, dtype=np.float64).reshape(3)
    if (std <= 0).any():
        raise ValueError("std components must be > 0")

    r = int(target_res)
    if mode == MODE_SQUARE or h == w:
        content = _resize_bilinear(img, r, r)
        cw = ch = r
        left = top = 0
    else:
        if w >= h:
            cw, ch = r, max(1, round(h * r / w))
        else:
            cw, ch = max(1, round(w * r / h)), r
        content = _resize_bilinear(img, ch, cw)
        left = (r - cw) // 2
        top = (r - ch) // 2
    pad_box = (left, top, r - cw - left, r - ch - top)

    # padding stays at the mean fill color, i.e. exactly 0 after normalization
    out = np.zeros((3, r, r), dtype=np.float32)
    norm = (content / 255.0 - mean) / std
    out[:, top : top + ch, left : left + cw] = norm.transpose(2, 0, 1).astype(np.float32)
    return PreprocessedImage(out, (w, h), pad_box, mode)


def patchify(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """Non-overlapping patches of a [3, R, R] image as [grid^2, 3*p*p] rows.

    The grid is floor(R / patch) per side; trailing pixels that do not fill
    a whole patch are dropped, exactly as a stride-p convolution would.
    """
    c, hh, ww = pixels.shape
    p = patch_size
    gh, gw = hh // p, ww // p
    if gh < 1 or gw < 1:
        raise ValueError(f"resolution {hh}x{ww} smaller than patch size {p}")
    cropped = pixels[:, : gh * p, : gw * p]
    view = cropped.reshape(c, gh, p, gw, p)
    return view.transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * p * p)


def n_visual_tokens(image_res: int, patch_size: int) -> int:
    return (image_res // patch_size) ** 2


class VisionEncoder:
    """Pre-norm bidirectional transformer over linear patch embeddings."""

    def __init__(self, weights: WeightSet, cfg: VitConfig):
        self.cfg = cfg
        self.w = weights
        self.n_tokens = n_visual_tokens(cfg.image_res, cfg.patch_size)
        pe = weights.array("vit.pos_embed")
        if pe.shape != (self.n_tokens, cfg.d_model):
            raise ConsistencyError(
                f"vit.pos_embed shape {pe.shape} does not match "
                f"{self.n_tokens} tokens x {cfg.d_model} dims"
            )

    def __call__(self, img: PreprocessedImage) -> VisualTokens:
        cfg = self.cfg
        patches = patchify(img.pixels, cfg.patch_size)
        x = self.w.linear("vit.patch_embed")(patches)
        if x.shape != (self.n_tokens, cfg.d_model):
            raise ConsistencyError(
                f"patch embedding produced {x.shape}, expected "
                f"({self.n_tokens}, {cfg.d_model})"
            )
        x = x + self.w.array("vit.pos_embed")
        for i in range(cfg.feature_layer):
            x = self._block(x, f"vit.blocks.{i}")
        if cfg.feature_layer == cfg.n_layers:
            x = ops.layer_norm(x, self.w.array("vit.ln_f.weight"), self.w.array("vit.ln_f.bias"))
        return VisualTokens(x)

    def _block(self, x: np.ndarray, prefix: str) -> np.ndarray:
        cfg = self.cfg
        w = self.w
        h = ops.layer_norm(x, w.array(f"{prefix}.ln1.weight"), w.array(f"{prefix}.ln1.bias"))
        t = h.shape[0]
        hd = cfg.d_model // cfg.n_heads

        def heads(a):
            return a.reshape(t, cfg.n_heads, hd).transpose(1, 0, 2)

        q = heads(w.linear(f"{prefix}.attn.wq")(h))
        k = heads(w.linear(f"{prefix}.attn.wk")(h))
        v = heads(w.linear(f"{prefix}.attn.wv")(h))
        att = ops.attention(q, k, v, causal=False)
        att = att.transpose(1, 0, 2).reshape(t, cfg.d_model)
        x = x + w.linear(f"{prefix}.attn.wo")(att)
        h2 = ops.layer_norm(x, w.array(f"{prefix}.ln2.weight"), w.array(f"{prefix}.ln2.bias"))
        x = x + w.linear(f"{prefix}.mlp.fc2")(ops.gelu(w.linear(f"{prefix}.mlp.fc1")(h2)))
        return x
