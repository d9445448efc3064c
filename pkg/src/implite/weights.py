"""Weight access for forward passes: float views, projections, runtime adapters.

A WeightSet holds the raw tensors of a loaded model. Embedding-like tables
are always materialized as float32; 2-D projection weights may stay in
their quantized block form, in which case the blockwise kernel runs the
projection. Low-rank adapters attached to the set are applied at call
time on top of the frozen base weight (the unmerged serving path).
"""

from __future__ import annotations

import numpy as np

from . import ops, quant
from .errors import ConsistencyError
from .tensor import Tensor


class Linear:
    """y = x @ W.T + b where W is a float array or a quantized tensor."""

    def __init__(self, name, weight, bias=None, adapter=None):
        self.name = name
        if isinstance(weight, Tensor) and weight.dtype in ("q8_0", "q4_0"):
            self.qweight = weight
            self.weight = None
            self.out_dim, self.in_dim = weight.shape
        else:
            self.qweight = None
            self.weight = ops.as_f32(weight)
            if self.weight.ndim != 2:
                raise ConsistencyError(f"{name}: projection weight must be 2-D, got {self.weight.shape}")
            self.out_dim, self.in_dim = self.weight.shape
        self.bias = None if bias is None else ops.as_f32(bias)
        if self.bias is not None and self.bias.shape != (self.out_dim,):
            raise ConsistencyError(
                f"{name}: bias shape {self.bias.shape} does not match out dim {self.out_dim}"
            )
        self.adapter = adapter

    def __call__(self, x) -> np.ndarray:
        if self.qweight is not None:
            y = quant.quantized_matmul(self.qweight, x)
        else:
            y = ops.linear(x, self.weight)
        if self.adapter is not None:
            y = y + self.adapter.apply(x)
        if self.bias is not None:
            y = y + self.bias
        return y


class WeightSet:
    """Named tensors with cached float views and projection objects."""

    def __init__(self, tensors: dict, adapters: dict | None = None):
        self._tensors = dict(tensors)
        self._adapters = adapters or {}
        self._arrays: dict[str, np.ndarray] = {}
        self._linears: dict[str, Linear] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def raw(self, name: str):
        try:
            return self._tensors[name]
        except KeyError:
            raise ConsistencyError(f"model is missing tensor {name!r}") from None

    def array(self, name: str) -> np.ndarray:
        """Tensor as float32, dequantizing block formats if needed."""
        cached = self._arrays.get(name)
        if cached is None:
            t = self.raw(name)
            if isinstance(t, Tensor):
                if t.dtype in ("q8_0", "q4_0"):
                    cached = quant.dequantize_array(t)
                else:
                    cached = ops.as_f32(t.to_numpy())
            else:
                cached = ops.as_f32(t)
            self._arrays[name] = cached
        return cached

    def linear(self, prefix: str) -> Linear:
        """Projection for `{prefix}.weight` (+ `.bias` when present)."""
        lin = self._linears.get(prefix)
        if lin is None:
            wname = f"{prefix}.weight"
            weight = self.raw(wname)
            if isinstance(weight, Tensor) and weight.dtype in ("f32", "f16"):
                weight = self.array(wname)
            bias = self.array(f"{prefix}.bias") if f"{prefix}.bias" in self._tensors else None
            lin = Linear(wname, weight, bias, adapter=self._adapters.get(wname))
            self._linears[prefix] = lin
        return lin
