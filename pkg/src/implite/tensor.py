"""Storage tensor: shape + dtype + raw little-endian bytes.

Compute happens on numpy arrays; this type is the carrier the container
format and the quantized weight layouts use. Quantized payloads (q8_0,
q4_0) are opaque here, their block layout is defined in `quant`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

DTYPES = ("f32", "f16", "q8_0", "q4_0")

QUANT_BLOCK = 32
# bytes per 32-element block: f16 scale + 32 int8 codes / 16 packed nibble pairs
QBLOCK_BYTES = {"q8_0": 34, "q4_0": 18}

_NP_DTYPE = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2")}

MAX_RANK = 4


def numel(shape) -> int:
    n = 1
    for d in shape:
        n *= int(d)
    return n


def dtype_nbytes(dtype: str, shape) -> int:
    """Payload byte size for a tensor of the given dtype and shape."""
    n = numel(shape)
    if dtype == "f32":
        return 4 * n
    if dtype == "f16":
        return 2 * n
    if dtype in QBLOCK_BYTES:
        if shape[-1] % QUANT_BLOCK != 0:
            raise ShapeError(
                f"{dtype} needs a last dimension divisible by {QUANT_BLOCK}, "
                f"got shape {tuple(shape)}"
            )
        return QBLOCK_BYTES[dtype] * (n // QUANT_BLOCK)
    raise ValueError(f"unknown dtype {dtype!r}")


@dataclass(frozen=True)
class Tensor:
    """Contiguous row-major tensor data with an explicit storage dtype."""

    shape: tuple[int, ...]
    dtype: str
    data: bytes

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}, expected one of {DTYPES}")
        shape = tuple(int(d) for d in self.shape)
        object.__setattr__(self, "shape", shape)
        if not 1 <= len(shape) <= MAX_RANK:
            raise ShapeError(f"rank must be 1..{MAX_RANK}, got shape {shape}")
        if any(d < 1 for d in shape):
            raise ShapeError(f"dimensions must be >= 1, got shape {shape}")
        expected = dtype_nbytes(self.dtype, shape)
        if len(self.data) != expected:
            raise ShapeError(
                f"{self.dtype} tensor of shape {shape} needs {expected} bytes, "
                f"got {len(self.data)}"
            )

    @property
    def nbytes(self) -> int:
        return len(self.data)

    @property
    def numel(self) -> int:
        return numel(self.shape)

    @classmethod
    def from_numpy(cls, arr) -> "Tensor":
        arr = np.asarray(arr)
        if arr.dtype == np.float64:
            arr = arr.astype(np.float32)
        if arr.dtype == np.float32:
            dtype = "f32"
        elif arr.dtype == np.float16:
            dtype = "f16"
        else:
            raise ValueError(f"cannot store dtype {arr.dtype}, expected float16/32/64")
        arr = np.ascontiguousarray(arr.astype(_NP_DTYPE[dtype], copy=False))
        return cls(tuple(arr.shape), dtype, arr.tobytes())

    def to_numpy(self) -> np.ndarray:
        """View as a numpy array; only float dtypes are directly viewable."""
        if self.dtype not in _NP_DTYPE:
            raise TypeError(
                f"{self.dtype} tensor cannot be viewed directly; "
                "use quant.dequantize_tensor()"
            )
        return np.frombuffer(self.data, dtype=_NP_DTYPE[self.dtype]).reshape(self.shape)
