"""Byte-level BPE tokenizer with special tokens and a streaming decoder.

Tokenizer content travels inside the model container as two text blobs:
the vocab ("id<TAB>base64(bytes)" per line) and the merge list
("base64(left)<SPACE>base64(right)" per line, rank order). Special tokens
(bos/eos/image) are vocab entries with empty byte strings, so decoding
them yields nothing and plain text can never encode to them.
"""

from __future__ import annotations

import base64
import codecs
from dataclasses import dataclass, field

from .errors import ConsistencyError, FormatError

VOCAB_KEY = "tokenizer.vocab"
MERGES_KEY = "tokenizer.merges"
SPECIAL_KEYS = {"bos": "tokenizer.bos_id", "eos": "tokenizer.eos_id", "image": "tokenizer.image_id"}


@dataclass
class TokenizerSpec:
    vocab: dict[int, bytes]
    merges: list[tuple[bytes, bytes]]
    special_tokens: dict[str, int]
    # derived lookup tables
    byte_to_id: dict[int, int] = field(default_factory=dict, repr=False)
    merge_table: dict[tuple[int, int], tuple[int, int]] = field(default_factory=dict, repr=False)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def __post_init__(self):
        ids = sorted(self.vocab)
        if ids != list(range(len(ids))):
            raise FormatError("vocab ids must be dense in [0, vocab_size)")
        special_ids = set(self.special_tokens.values())
        if len(special_ids) != len(self.special_tokens):
            raise FormatError("special token ids must be distinct")
        bytes_to_id: dict[bytes, int] = {}
        for tid, raw in self.vocab.items():
            if tid in special_ids:
                continue
            if raw in bytes_to_id:
                raise FormatError(f"duplicate vocab byte sequence for ids {bytes_to_id[raw]} and {tid}")
            bytes_to_id[raw] = tid
        for b in range(256):
            tid = bytes_to_id.get(bytes([b]))
            if tid is None:
                raise FormatError(f"vocab is missing the base token for byte {b}")
            self.byte_to_id[b] = tid
        for rank, (left, right) in enumerate(self.merges):
            lid = bytes_to_id.get(left)
            rid = bytes_to_id.get(right)
            mid = bytes_to_id.get(left + right)
            if lid is None or rid is None or mid is None:
                raise FormatError(f"merge #{rank} ({left!r}, {right!r}) has no matching vocab entry")
            self.merge_table[(lid, rid)] = (rank, mid)
        for name in ("bos", "eos", "image"):
            if name not in self.special_tokens:
                raise FormatError(f"missing special token {name!r}")
            tid = self.special_tokens[name]
            if not 0 <= tid < len(self.vocab):
                raise FormatError(f"special token {name!r} id {tid} out of range")
            if self.vocab[tid] != b"":
                raise FormatError(
                    f"special token {name!r} id {tid} collides with a byte-level token"
                )


def render_vocab_blob(vocab: dict[int, bytes]) -> str:
    lines = [f"{tid}\t{base64.b64encode(vocab[tid]).decode('ascii')}" for tid in sorted(vocab)]
    return "\n".join(lines)


def render_merges_blob(merges: list[tuple[bytes, bytes]]) -> str:
    return "\n".join(
        f"{base64.b64encode(l).decode('ascii')} {base64.b64encode(r).decode('ascii')}"
        for l, r in merges
    )


def parse_vocab_blob(blob: str) -> dict[int, bytes]:
    vocab: dict[int, bytes] = {}
    for lineno, line in enumerate(blob.splitlines(), 1):
        if not line:
            continue
        try:
            tid_s, b64 = line.split("\t")
            tid = int(tid_s)
            raw = base64.b64decode(b64, validate=True)
        except (ValueError, TypeError) as e:
            raise FormatError(f"malformed vocab line {lineno}: {e}") from e
        if tid in vocab:
            raise FormatError(f"duplicate vocab id {tid} at line {lineno}")
        vocab[tid] = raw
    return vocab


def parse_merges_blob(blob: str) -> list[tuple[bytes, bytes]]:
    merges = []
    for lineno, line in enumerate(blob.splitlines(), 1):
        if not line:
            continue
        try:
            left_s, right_s = line.split(" ")
            merges.append(
                (base64.b64decode(left_s, validate=True), base64.b64decode(right_s, validate=True))
            )
        except (ValueError, TypeError) as e:
            raise FormatError(f"malformed merges line {lineno}: {e}") from e
    return merges


def load_tokenizer(manifest) -> TokenizerSpec:
    """Build a validated TokenizerSpec from container metadata blobs."""
    meta = manifest.metadata
    for key in (VOCAB_KEY, MERGES_KEY, *SPECIAL_KEYS.values()):
        if key not in meta:
            raise FormatError(f"container metadata missing {key!r}")
    spec = TokenizerSpec(
        vocab=parse_vocab_blob(meta[VOCAB_KEY]),
        merges=parse_merges_blob(meta[MERGES_KEY]),
        special_tokens={name: int(meta[key]) for name, key in SPECIAL_KEYS.items()},
    )
    declared = meta.get("llm.vocab_size")
    if declared is not None and int(declared) != spec.vocab_size:
        raise ConsistencyError(
            f"tokenizer has {spec.vocab_size} tokens but llm.vocab_size is {declared}"
        )
    return spec


def encode(spec: TokenizerSpec, text: str) -> list[int]:
    """Greedy lowest-rank-first merge over the UTF-8 bytes of `text`."""
    ids = [spec.byte_to_id[b] for b in text.encode("utf-8")]
    while len(ids) >= 2:
        best_rank = None
        best_pair = None
        for pair in zip(ids, ids[1:]):
            hit = spec.merge_table.get(pair)
            if hit is not None and (best_rank is None or hit[0] < best_rank):
                best_rank, best_pair = hit[0], pair
        if best_pair is None:
            break
        merged_id = spec.merge_table[best_pair][1]
        out = []
        i = 0
        while i < len(ids):
            if i + 1 < len(ids) and (ids[i], ids[i + 1]) == best_pair:
                out.append(merged_id)
                i += 2
            else:
                out.append(ids[i])
                i += 1
        ids = out
    return ids


def decode(spec: TokenizerSpec, ids) -> str:
    """Concatenated token bytes as UTF-8; special tokens contribute nothing."""
    parts = []
    for tid in ids:
        raw = spec.vocab.get(int(tid))
        if raw is None:
            raise ValueError(f"unknown token id {tid}")
        parts.append(raw)
    return b"".join(parts).decode("utf-8", errors="replace")


class TokenStream:
    """Incremental decoder that only ever emits complete UTF-8 characters.

    Bytes of a partially received multi-byte character stay buffered until
    the character completes, so streamed fragments are always valid text.
    """

    def __init__(self, spec: TokenizerSpec):
        self.spec = spec
        self._decoder = codecs.getincrementaldecoder("utf-8")("replace")

    def feed(self, token_id: int) -> str:
        raw = self.spec.vocab.get(int(token_id))
        if raw is None:
            raise ValueError(f"unknown token id {token_id}")
        return self._decoder.decode(raw, False)

    def flush(self) -> str:
        return self._decoder.decode(b"", True)
