"""Dense float kernels: matmul, softmax, layer norm, GELU, rotary embedding, attention.

Inputs may be numpy arrays or storage Tensors; outputs are float32 arrays.
Reductions accumulate in float64 (storage stays float32), so long dot
products do not drift.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ShapeError
from .tensor import Tensor

_SQRT2 = float(np.sqrt(2.0))


def as_f32(x, name: str = "operand") -> np.ndarray:
    """Coerce a Tensor or array-like to a float32 ndarray."""
    if isinstance(x, Tensor):
        x = x.to_numpy()
    arr = np.asarray(x)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    return arr


def matmul(a, b) -> np.ndarray:
    """C = A @ B for 2-D float32 operands."""
    a = as_f32(a)
    b = as_f32(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def linear(x, weight, bias=None) -> np.ndarray:
    """y = x @ W.T (+ b) with W stored [out_features, in_features]."""
    x = as_f32(x)
    w = as_f32(weight)
    if x.shape[-1] != w.shape[-1]:
        raise ShapeError(f"linear input {x.shape} does not match weight {w.shape}")
    y = x.astype(np.float64) @ w.astype(np.float64).T
    if bias is not None:
        y = y + np.asarray(bias, dtype=np.float64)
    return y.astype(np.float32)


def softmax(x, axis: int = -1) -> np.ndarray:
    """Stable softmax (max subtraction) along an axis."""
    arr = as_f32(x)
    if arr.size == 0:
        raise ValueError("softmax of empty input")
    z = arr.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """y = gamma * (x - mean) / sqrt(var + eps) + beta, population variance over the last axis."""
    arr = as_f32(x)
    g = as_f32(gamma)
    b = as_f32(beta)
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if g.shape != (arr.shape[-1],) or b.shape != (arr.shape[-1],):
        raise ShapeError(
            f"gamma {g.shape} / beta {b.shape} do not match feature size {arr.shape[-1]}"
        )
    z = arr.astype(np.float64)
    mu = z.mean(axis=-1, keepdims=True)
    var = z.var(axis=-1, keepdims=True)
    y = g * ((z - mu) / np.sqrt(var + eps)) + b
    return y.astype(np.float32)


def gelu(x):
    """Exact GELU x * Phi(x) using the normal CDF (no tanh approximation)."""
    arr = np.asarray(x, dtype=np.float64)
    y = 0.5 * arr * (1.0 + erf(arr / _SQRT2))
    if arr.ndim == 0:
        return float(y)
    return y.astype(np.float32)


def rope_angles(positions, head_dim: int, theta_base: float = 10000.0):
    """(cos, sin) tables of shape [len(positions), head_dim//2]."""
    if head_dim % 2 != 0:
        raise ConfigError(f"rotary embedding needs an even head dimension, got {head_dim}")
    half = head_dim // 2
    inv = theta_base ** (-2.0 * np.arange(half, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def rope_rotate(x, cos, sin) -> np.ndarray:
    """Rotate adjacent pairs (x[2i], x[2i+1]) by the given per-pair angles."""
    arr = as_f32(x).astype(np.float64)
    x0 = arr[..., 0::2]
    x1 = arr[..., 1::2]
    out = np.empty_like(arr)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out.astype(np.float32)


def rope_apply(x, position: int, theta_base: float = 10000.0) -> np.ndarray:
    """Rotary position embedding of one position applied to [n_heads, head_dim]."""
    arr = as_f32(x)
    if position < 0:
        raise ValueError(f"position must be >= 0, got {position}")
    cos, sin = rope_angles([position], arr.shape[-1], theta_base)
    return rope_rotate(arr, cos[0], sin[0])


def attention(q, k, v, causal: bool = False) -> np.ndarray:
    """softmax(q k^T / sqrt(d) [+ causal mask]) v over [n_heads, seq, head_dim].

    2-D inputs are treated as a single head. With a causal mask and
    Tq < Tk (cached decoding), query i sits at absolute position
    Tk - Tq + i and may attend up to itself.
    """
    q3, k3, v3 = (as_f32(t) for t in (q, k, v))
    squeeze = q3.ndim == 2
    if squeeze:
        q3, k3, v3 = q3[None], k3[None], v3[None]
    if q3.ndim != 3 or k3.ndim != 3 or v3.ndim != 3:
        raise ShapeError(
            f"attention needs [heads, seq, dim] inputs, got {q3.shape}/{k3.shape}/{v3.shape}"
        )
    if not (q3.shape[0] == k3.shape[0] == v3.shape[0]):
        raise ShapeError(f"head counts differ: {q3.shape[0]}/{k3.shape[0]}/{v3.shape[0]}")
    if q3.shape[2] != k3.shape[2] or k3.shape[1] != v3.shape[1]:
        raise ShapeError(f"incompatible attention shapes {q3.shape}/{k3.shape}/{v3.shape}")
    tq, tk = q3.shape[1], k3.shape[1]
    scale = 1.0 / np.sqrt(q3.shape[2])
    scores = q3.astype(np.float64) @ k3.astype(np.float64).transpose(0, 2, 1) * scale
    if causal:
        i = np.arange(tq)[:, None]
        j = np.arange(tk)[None, :]
        scores = np.where(j <= (tk - tq) + i, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w = w / w.sum(axis=-1, keepdims=True)
    out = (w @ v3.astype(np.float64)).astype(np.float32)
    return out[0] if squeeze else out
