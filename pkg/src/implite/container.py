"""Single-file "IMPB" model container: metadata, tensor index, aligned tensor data.

Layout (all integers little-endian):

    magic "IMPB" | u32 version=1
    | u64 metadata_count
    | per entry: u32 key_len, key utf-8, u8 type_tag, payload
        tag 0 str:      u32 byte_len, utf-8 bytes
        tag 1 i64:      8 bytes signed
        tag 2 f64:      8 bytes IEEE double
        tag 3 i64 list: u64 count, count * 8 bytes signed
    | u64 tensor_count
    | per entry: u32 name_len, name, u8 rank, u64 dims[rank], u8 dtype_tag, u64 offset
        dtype tags {0: f32, 1: f16, 2: q8_0, 3: q4_0}
    | zero padding to a 32-byte boundary
    | tensor data section

Tensor offsets are relative to the start of the data section, ascending,
32-byte aligned; each payload is zero-padded to the next 32-byte boundary.
"""

from __future__ import annotations

import io
import os
import struct
import threading
from dataclasses import dataclass, field

from .errors import BoundsError, ConsistencyError, FormatError
from .tensor import DTYPES, Tensor, dtype_nbytes

MAGIC = b"IMPB"
VERSION = 1
ALIGN = 32

TYPE_STR, TYPE_I64, TYPE_F64, TYPE_I64_LIST = 0, 1, 2, 3

DTYPE_TAG = {"f32": 0, "f16": 1, "q8_0": 2, "q4_0": 3}
TAG_DTYPE = {v: k for k, v in DTYPE_TAG.items()}

REQUIRED_KEYS = (
    "llm.d_model",
    "llm.n_layers",
    "llm.n_heads",
    "llm.vocab_size",
    "llm.context_len",
    "vit.d_model",
    "vit.n_layers",
    "vit.patch_size",
    "vit.image_res",
    "connector.hidden_dim",
)

MetadataValue = str | int | float | list[int]


@dataclass(frozen=True)
class TensorEntry:
    name: str
    shape: tuple[int, ...]
    dtype: str
    offset: int


@dataclass
class ModelManifest:
    """Container header: architecture metadata plus the tensor index."""

    metadata: dict[str, MetadataValue]
    tensor_index: list[TensorEntry] = field(default_factory=list)
    format_version: int = VERSION

    def validate(self) -> None:
        missing = [k for k in REQUIRED_KEYS if k not in self.metadata]
        if missing:
            raise FormatError(f"manifest missing required metadata keys: {missing}")
        names = [e.name for e in self.tensor_index]
        if len(names) != len(set(names)):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise FormatError(f"duplicate tensor names in index: {dupes}")
        prev_end = 0
        for e in self.tensor_index:
            if e.offset % ALIGN != 0:
                raise FormatError(f"tensor {e.name!r} offset {e.offset} not {ALIGN}-byte aligned")
            if e.offset < prev_end:
                raise FormatError(f"tensor {e.name!r} overlaps the previous tensor")
            prev_end = e.offset + dtype_nbytes(e.dtype, e.shape)

    def tensor_names(self) -> list[str]:
        return [e.name for e in self.tensor_index]


def _pad_to(n: int, align: int = ALIGN) -> int:
    return (align - n % align) % align


def _encode_metadata_value(buf: io.BytesIO, value: MetadataValue) -> None:
    if isinstance(value, bool):
        raise FormatError("bool metadata values are not supported; use 0/1 integers")
    if isinstance(value, str):
        raw = value.encode("utf-8")
        buf.write(struct.pack("<B", TYPE_STR))
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    elif isinstance(value, int):
        buf.write(struct.pack("<B", TYPE_I64))
        buf.write(struct.pack("<q", value))
    elif isinstance(value, float):
        buf.write(struct.pack("<B", TYPE_F64))
        buf.write(struct.pack("<d", value))
    elif isinstance(value, list) and all(isinstance(v, int) for v in value):
        buf.write(struct.pack("<B", TYPE_I64_LIST))
        buf.write(struct.pack("<Q", len(value)))
        for v in value:
            buf.write(struct.pack("<q", v))
    else:
        raise FormatError(f"unsupported metadata value type {type(value).__name__}")


def build_index(tensors: dict[str, Tensor]) -> list[TensorEntry]:
    """Lay tensors out in insertion order with aligned, ascending offsets."""
    entries = []
    offset = 0
    for name, t in tensors.items():
        entries.append(TensorEntry(name, t.shape, t.dtype, offset))
        offset += t.nbytes + _pad_to(t.nbytes)
    return entries


def write_container(manifest: ModelManifest, tensors: dict[str, Tensor], path) -> None:
    """Serialize a manifest and its tensors; byte-identical for identical inputs."""
    if manifest.tensor_index:
        for e in manifest.tensor_index:
            t = tensors.get(e.name)
            if t is None:
                raise ConsistencyError(f"manifest references absent tensor {e.name!r}")
            if t.shape != e.shape or t.dtype != e.dtype:
                raise ConsistencyError(
                    f"tensor {e.name!r} is {t.dtype}{list(t.shape)} but the index "
                    f"declares {e.dtype}{list(e.shape)}"
                )
        extra = set(tensors) - {e.name for e in manifest.tensor_index}
        if extra:
            raise ConsistencyError(f"tensors not in manifest index: {sorted(extra)}")
        ordered = {e.name: tensors[e.name] for e in manifest.tensor_index}
    else:
        ordered = dict(tensors)

    index = build_index(ordered)
    manifest.tensor_index = index
    manifest.validate()

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<Q", len(manifest.metadata)))
    for key, value in manifest.metadata.items():
        raw = key.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        _encode_metadata_value(buf, value)
    buf.write(struct.pack("<Q", len(index)))
    for e in index:
        raw = e.name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", len(e.shape)))
        for d in e.shape:
            buf.write(struct.pack("<Q", d))
        buf.write(struct.pack("<B", DTYPE_TAG[e.dtype]))
        buf.write(struct.pack("<Q", e.offset))
    buf.write(b"\x00" * _pad_to(buf.tell()))
    for e in index:
        t = ordered[e.name]
        buf.write(t.data)
        buf.write(b"\x00" * _pad_to(t.nbytes))

    with open(path, "wb") as f:
        f.write(buf.getvalue())


class _Reader:
    """Cursor over header bytes that never reads past the declared length."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise BoundsError(f"file truncated while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))[0]


def _parse_header(data: bytes) -> tuple[ModelManifest, int]:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"bad magic: not an {MAGIC.decode()} container")
    version = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    metadata: dict[str, MetadataValue] = {}
    for _ in range(r.unpack("<Q", "metadata count")):
        key = r.take(r.unpack("<I", "metadata key length"), "metadata key").decode("utf-8")
        tag = r.unpack("<B", f"type tag of {key!r}")
        if tag == TYPE_STR:
            value: MetadataValue = r.take(
                r.unpack("<I", f"length of {key!r}"), f"value of {key!r}"
            ).decode("utf-8")
        elif tag == TYPE_I64:
            value = r.unpack("<q", f"value of {key!r}")
        elif tag == TYPE_F64:
            value = r.unpack("<d", f"value of {key!r}")
        elif tag == TYPE_I64_LIST:
            count = r.unpack("<Q", f"list length of {key!r}")
            value = [r.unpack("<q", f"value of {key!r}") for _ in range(count)]
        else:
            raise FormatError(f"unknown metadata type tag {tag} for key {key!r}")
        metadata[key] = value
    index = []
    for _ in range(r.unpack("<Q", "tensor count")):
        name = r.take(r.unpack("<I", "tensor name length"), "tensor name").decode("utf-8")
        rank = r.unpack("<B", f"rank of {name!r}")
        shape = tuple(r.unpack("<Q", f"dims of {name!r}") for _ in range(rank))
        tag = r.unpack("<B", f"dtype of {name!r}")
        if tag not in TAG_DTYPE:
            raise FormatError(f"unknown dtype tag {tag} for tensor {name!r}")
        offset = r.unpack("<Q", f"offset of {name!r}")
        index.append(TensorEntry(name, shape, TAG_DTYPE[tag], offset))
    data_start = r.pos + _pad_to(r.pos)
    return ModelManifest(metadata, index, format_version=version), data_start


class TensorLoader:
    """Lazy by-name tensor access over an open container file.

    Reads use pread at absolute offsets, so concurrent loads from one open
    loader are safe.
    """

    def __init__(self, path, manifest: ModelManifest, data_start: int):
        self.path = str(path)
        self.manifest = manifest
        self._data_start = data_start
        self._entries = {e.name: e for e in manifest.tensor_index}
        self._fd = os.open(self.path, os.O_RDONLY)
        self._closed = False
        self._lock = threading.Lock()

    def names(self) -> list[str]:
        return list(self._entries)

    def load(self, name: str) -> Tensor:
        entry = self._entries.get(name)
        if entry is None:
            raise KeyError(f"no tensor named {name!r} in {self.path}")
        size = dtype_nbytes(entry.dtype, entry.shape)
        data = os.pread(self._fd, size, self._data_start + entry.offset)
        if len(data) != size:
            raise BoundsError(f"file truncated inside tensor {name!r}")
        return Tensor(entry.shape, entry.dtype, data)

    def load_all(self) -> dict[str, Tensor]:
        return {name: self.load(name) for name in self._entries}

    def close(self) -> None:
        with self._lock:
            if not self._closed:
                os.close(self._fd)
                self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except OSError:
            pass


def read_container(path) -> tuple[ModelManifest, TensorLoader]:
    """Parse and validate a container; tensors load lazily by name."""
    file_size = os.path.getsize(path)
    with open(path, "rb") as f:
        head = f.read(_header_budget(file_size))
    manifest, data_start = _parse_header(head)
    manifest.validate()
    for e in manifest.tensor_index:
        end = data_start + e.offset + dtype_nbytes(e.dtype, e.shape)
        if end > file_size:
            raise BoundsError(
                f"file truncated inside tensor {e.name!r}: needs bytes up to {end}, "
                f"file has {file_size}"
            )
    return manifest, TensorLoader(path, manifest, data_start)


def _header_budget(file_size: int) -> int:
    # Headers are small; reading the whole file is fine at desk scale but
    # wasteful for multi-GB containers, so parse from a capped prefix.
    return min(file_size, 64 * 1024 * 1024)


@dataclass
class ContainerSummary:
    path: str
    rows: list[tuple[str, tuple[int, ...], str, int]]  # name, shape, dtype, bytes
    dtype_bytes: dict[str, int]
    dtype_counts: dict[str, int]
    header_bytes: int
    padding_bytes: int
    data_bytes: int
    total_bytes: int

    def render(self) -> str:
        lines = [f"{self.path}"]
        name_w = max([len(r[0]) for r in self.rows] + [6])
        shape_w = max([len("x".join(map(str, r[1]))) for r in self.rows] + [5])
        lines.append(f"{'tensor':<{name_w}}  {'shape':>{shape_w}}  dtype  {'bytes':>12}")
        for name, shape, dtype, nbytes in self.rows:
            dims = "x".join(map(str, shape))
            lines.append(f"{name:<{name_w}}  {dims:>{shape_w}}  {dtype:<5}  {nbytes:>12}")
        lines.append("")
        for dtype in DTYPES:
            if self.dtype_counts.get(dtype):
                lines.append(
                    f"{dtype}: {self.dtype_counts[dtype]} tensors, {self.dtype_bytes[dtype]} bytes"
                )
        lines.append(
            f"header {self.header_bytes} + padding {self.padding_bytes} "
            f"+ tensor data {self.data_bytes} = {self.total_bytes} bytes"
        )
        return "\n".join(lines)


def inspect_container(path) -> ContainerSummary:
    """Per-tensor and per-dtype size accounting for a container file."""
    manifest, loader = read_container(path)
    data_start = loader._data_start
    loader.close()
    file_size = os.path.getsize(path)
    rows = []
    dtype_bytes: dict[str, int] = {}
    dtype_counts: dict[str, int] = {}
    data_bytes = 0
    for e in manifest.tensor_index:
        nbytes = dtype_nbytes(e.dtype, e.shape)
        rows.append((e.name, e.shape, e.dtype, nbytes))
        dtype_bytes[e.dtype] = dtype_bytes.get(e.dtype, 0) + nbytes
        dtype_counts[e.dtype] = dtype_counts.get(e.dtype, 0) + 1
        data_bytes += nbytes
    padding = (file_size - data_start) - data_bytes
    return ContainerSummary(
        path=str(path),
        rows=rows,
        dtype_bytes=dtype_bytes,
        dtype_counts=dtype_counts,
        header_bytes=data_start,
        padding_bytes=padding,
        data_bytes=data_bytes,
        total_bytes=file_size,
    )
