"""Blockwise 8-bit and 4-bit weight quantization and the matching matvec kernel.

Both formats work on blocks of 32 weights along the last dimension:

    q8_0: f16 scale + 32 signed byte codes            -> 34 bytes/block
    q4_0: f16 scale + 16 bytes of packed nibble pairs -> 18 bytes/block

Scales are amax/127 (q8_0) or amax/7 (q4_0), rounded *toward zero* when
stored as f16 so the per-weight reconstruction bounds amax/254 and amax/14
hold exactly; codes are round-to-nearest. Nibbles store code+8, low nibble
first within each adjacent pair.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError, ShapeError
from .tensor import QBLOCK_BYTES, QUANT_BLOCK, Tensor, dtype_nbytes
from . import ops

_QMAX = {"q8_0": 127, "q4_0": 7}


def _f16_round_down(scale: np.ndarray) -> np.ndarray:
    """Round positive f32 scales to f16 without ever rounding up."""
    s16 = scale.astype(np.float16)
    over = s16.astype(np.float32) > scale
    if over.any():
        s16[over] = np.nextafter(s16[over], np.float16(0.0))
    return s16


def quantize_tensor(t, dtype: str) -> Tensor:
    """Quantize a float tensor to q8_0 or q4_0 per-block symmetric codes."""
    if dtype not in _QMAX:
        raise ValueError(f"quantization target must be q8_0 or q4_0, got {dtype!r}")
    arr = ops.as_f32(t)
    if arr.ndim < 1 or arr.shape[-1] % QUANT_BLOCK != 0:
        raise ShapeError(
            f"last dimension must be a multiple of {QUANT_BLOCK} to quantize, "
            f"got shape {tuple(arr.shape)}"
        )
    w = np.ascontiguousarray(arr, dtype=np.float32).reshape(-1, QUANT_BLOCK)
    nblocks = w.shape[0]
    amax = np.abs(w).max(axis=1)
    scale16 = _f16_round_down((amax / _QMAX[dtype]).astype(np.float32))
    sf = scale16.astype(np.float32)
    codes = np.zeros_like(w)
    np.divide(w, sf[:, None], out=codes, where=sf[:, None] > 0)
    codes = np.round(codes)
    scale_bytes = np.frombuffer(scale16.tobytes(), dtype=np.uint8).reshape(nblocks, 2)
    if dtype == "q8_0":
        codes = np.clip(codes, -127, 127).astype(np.int8)
        blocks = np.empty((nblocks, 34), dtype=np.uint8)
        blocks[:, :2] = scale_bytes
        blocks[:, 2:] = codes.view(np.uint8)
    else:
        codes = np.clip(codes, -8, 7).astype(np.int8)
        u = (codes.astype(np.int16) + 8).astype(np.uint8)
        blocks = np.empty((nblocks, 18), dtype=np.uint8)
        blocks[:, :2] = scale_bytes
        blocks[:, 2:] = u[:, 0::2] | (u[:, 1::2] << 4)
    return Tensor(tuple(arr.shape), dtype, blocks.tobytes())


def _unpack_blocks(t: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """(scales f32 [nblocks], codes f32 [nblocks, 32]) from a quantized tensor."""
    if t.dtype not in _QMAX:
        raise ValueError(f"not a quantized tensor: dtype {t.dtype}")
    block_bytes = QBLOCK_BYTES[t.dtype]
    expected = dtype_nbytes(t.dtype, t.shape)
    if len(t.data) != expected or expected % block_bytes != 0:
        raise FormatError(
            f"corrupt {t.dtype} data: {len(t.data)} bytes for shape {t.shape}, "
            f"expected {expected}"
        )
    blocks = np.frombuffer(t.data, dtype=np.uint8).reshape(-1, block_bytes)
    scales = blocks[:, :2].copy().view(np.float16).reshape(-1).astype(np.float32)
    if t.dtype == "q8_0":
        codes = blocks[:, 2:].view(np.int8).astype(np.float32)
    else:
        packed = blocks[:, 2:]
        codes = np.empty((blocks.shape[0], QUANT_BLOCK), dtype=np.float32)
        codes[:, 0::2] = (packed & 0x0F).astype(np.int8) - 8
        codes[:, 1::2] = (packed >> 4).astype(np.int8) - 8
    return scales, codes


def dequantize_tensor(t: Tensor) -> Tensor:
    """Reconstruct scale * code per element as an f32 tensor."""
    scales, codes = _unpack_blocks(t)
    w = (codes * scales[:, None]).reshape(t.shape).astype(np.float32)
    return Tensor.from_numpy(w)


def dequantize_array(t: Tensor) -> np.ndarray:
    scales, codes = _unpack_blocks(t)
    return (codes * scales[:, None]).reshape(t.shape).astype(np.float32)


def quantized_matmul(w: Tensor, x) -> np.ndarray:
    """y = x @ dequant(W).T computed blockwise: per-block code dot times scale.

    W is a quantized [m, k] tensor; x is [k] or [..., k] float32.
    """
    if len(w.shape) != 2:
        raise ShapeError(f"quantized matmul needs a 2-D weight, got shape {w.shape}")
    m, k = w.shape
    xa = ops.as_f32(x)
    if xa.shape[-1] != k:
        raise ShapeError(f"input {tuple(xa.shape)} does not match weight [{m}x{k}]")
    nb = k // QUANT_BLOCK
    scales, codes = _unpack_blocks(w)
    codes = codes.reshape(m, nb, QUANT_BLOCK).astype(np.float64)
    scales = scales.reshape(m, nb).astype(np.float64)
    lead = xa.shape[:-1]
    xb = xa.reshape(-1, nb, QUANT_BLOCK).astype(np.float64)
    dots = np.einsum("tbk,mbk->tmb", xb, codes)
    y = (dots * scales[None, :, :]).sum(axis=2)
    return y.astype(np.float32).reshape(*lead, m)


def quantized_matvec(w: Tensor, x) -> np.ndarray:
    """Quantized [m, k] weight times float32 vector [k] -> [m]."""
    xa = ops.as_f32(x)
    if xa.ndim != 1:
        raise ShapeError(f"matvec needs a 1-D vector, got shape {tuple(xa.shape)}")
    return quantized_matmul(w, xa)


# tensors that stay in float even when a model is quantized: embeddings and
# position tables are lookup semantics, norms/biases are 1-D and tiny
def _quantizable(name: str, t: Tensor, include_embeddings: bool) -> bool:
    if t.dtype != "f32" and t.dtype != "f16":
        return False
    if len(t.shape) != 2 or t.shape[-1] % QUANT_BLOCK != 0:
        return False
    if not include_embeddings and "embed" in name:
        return False
    return True


def quantize_model(
    manifest,
    tensors: dict[str, Tensor],
    dtype: str,
    include_embeddings: bool = False,
):
    """Quantize every eligible 2-D weight of a model; returns (manifest, tensors).

    Norm weights, biases, and (by default) embedding-like tables keep their
    float storage, which is why whole-file ratios sit above the pure
    per-dtype byte ratios.
    """
    from .container import ModelManifest

    out = {}
    for name, t in tensors.items():
        if _quantizable(name, t, include_embeddings):
            src = t if t.dtype == "f32" else Tensor.from_numpy(t.to_numpy().astype(np.float32))
            out[name] = quantize_tensor(src, dtype)
        else:
            out[name] = t
    metadata = dict(manifest.metadata)
    metadata["quant.dtype"] = dtype
    return ModelManifest(metadata), out
