"""Low-rank adapters: loading, runtime application, and merging into base weights.

An adapter for target weight W [d_out, d_in] holds A [r, d_in] and
B [d_out, r]; the effective weight is W + (alpha/r) * B @ A. Adapter sets
travel as .npz files with arrays "{target}.A" / "{target}.B" and scalars
"{target}.alpha".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import ModelManifest
from .errors import ConsistencyError
from .tensor import Tensor


@dataclass
class LoraAdapter:
    name: str  # target tensor name, e.g. "llm.blocks.0.attn.wq.weight"
    a: np.ndarray  # [r, d_in]
    b: np.ndarray  # [d_out, r]
    alpha: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float32)
        self.b = np.asarray(self.b, dtype=np.float32)
        if self.a.ndim != 2 or self.b.ndim != 2 or self.b.shape[1] != self.a.shape[0]:
            raise ConsistencyError(
                f"adapter {self.name!r}: A {self.a.shape} and B {self.b.shape} are not rank-consistent"
            )
        if self.rank < 1:
            raise ConsistencyError(f"adapter {self.name!r}: rank must be >= 1")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        """Dense weight delta (alpha/r) * B @ A."""
        d = self.b.astype(np.float64) @ self.a.astype(np.float64)
        return (self.scaling * d).astype(np.float32)

    def apply(self, x) -> np.ndarray:
        """Runtime low-rank path (alpha/r) * ((x @ A.T) @ B.T) for unmerged serving."""
        xa = np.asarray(x, dtype=np.float64) @ self.a.astype(np.float64).T
        return (self.scaling * (xa @ self.b.astype(np.float64).T)).astype(np.float32)

    def negated(self) -> "LoraAdapter":
        return LoraAdapter(self.name, self.a, -self.b, self.alpha)


def save_adapters(path, adapters: dict[str, LoraAdapter]) -> None:
    arrays = {}
    for name, ad in adapters.items():
        arrays[f"{name}.A"] = ad.a
        arrays[f"{name}.B"] = ad.b
        arrays[f"{name}.alpha"] = np.float64(ad.alpha)
    np.savez(path, **arrays)


def load_adapters(path) -> dict[str, LoraAdapter]:
    data = np.load(path)
    targets = sorted({k[: -len(".A")] for k in data.files if k.endswith(".A")})
    adapters = {}
    for name in targets:
        adapters[name] = LoraAdapter(
            name=name,
            a=data[f"{name}.A"],
            b=data[f"{name}.B"],
            alpha=float(data[f"{name}.alpha"]),
        )
    return adapters


def default_lora_targets(manifest: ModelManifest) -> list[str]:
    """All decoder attention and MLP projection weights."""
    n_layers = int(manifest.metadata["llm.n_layers"])
    names = []
    for i in range(n_layers):
        for proj in ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.fc1", "mlp.fc2"):
            names.append(f"llm.blocks.{i}.{proj}.weight")
    return names


def merge_lora(
    manifest: ModelManifest,
    tensors: dict[str, Tensor],
    adapters: dict[str, LoraAdapter],
) -> tuple[ModelManifest, dict[str, Tensor]]:
    """Fold adapters into their targets; everything else passes through untouched."""
    out = dict(tensors)
    for name, ad in adapters.items():
        base = tensors.get(name)
        if base is None:
            raise ConsistencyError(f"adapter targets absent tensor {name!r}")
        if base.dtype not in ("f32", "f16"):
            raise ConsistencyError(
                f"adapter target {name!r} is {base.dtype}; merge before quantizing"
            )
        w = base.to_numpy().astype(np.float32)
        if w.ndim != 2 or w.shape != (ad.b.shape[0], ad.a.shape[1]):
            raise ConsistencyError(
                f"adapter {name!r} dims A {ad.a.shape} x B {ad.b.shape} do not match "
                f"base weight {w.shape}"
            )
        merged = w + ad.delta()
        out[name] = Tensor.from_numpy(merged.astype(np.float16) if base.dtype == "f16" else merged)
    metadata = dict(manifest.metadata)
    previous = metadata.get("lora.merged_targets", "")
    merged_names = ",".join(sorted(adapters))
    metadata["lora.merged_targets"] = f"{previous},{merged_names}" if previous else merged_names
    return ModelManifest(metadata), out
