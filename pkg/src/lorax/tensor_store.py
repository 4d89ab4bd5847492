"""Named-tensor bundles and module-key parsing.

The on-disk layout is the length-prefixed JSON header format used by most
diffusion checkpoints:

    bytes 0..7      little-endian u64 header length N
    bytes 8..8+N    UTF-8 JSON: name -> {"dtype", "shape", "data_offsets"}
    bytes 8+N..     payload, little-endian, row-major

Only F16 and F32 tensors of rank 1 or 2 are accepted.
"""
from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import FormatError, InvalidBundle, IoError, UnsupportedTensor

_DTYPES = {"F16": np.dtype("<f2"), "F32": np.dtype("<f4")}
_DTYPE_NAMES = {"float16": "F16", "float32": "F32", "F16": "F16", "F32": "F32"}
METADATA_KEY = "__metadata__"


@dataclass(frozen=True)
class TensorEntry:
    key: str
    dtype: str  # "F16" or "F32"
    shape: tuple[int, ...]
    data: np.ndarray  # float32, already reshaped

    def __post_init__(self):
        if self.dtype not in _DTYPES:
            raise UnsupportedTensor(f"{self.key}: dtype {self.dtype!r} not supported")
        if len(self.shape) not in (1, 2):
            raise UnsupportedTensor(f"{self.key}: rank-{len(self.shape)} tensor not supported")
        if int(np.prod(self.shape)) != self.data.size:
            raise InvalidBundle(f"{self.key}: shape {self.shape} does not match {self.data.size} values")

    def as_float64(self) -> np.ndarray:
        return np.asarray(self.data, dtype=np.float64).reshape(self.shape)

    def payload(self) -> bytes:
        return np.ascontiguousarray(self.data, dtype=_DTYPES[self.dtype]).tobytes()


class TensorBundle(Mapping[str, TensorEntry]):
    """Ordered, read-only mapping of tensor name to :class:`TensorEntry`."""

    def __init__(self, entries: Iterable[TensorEntry] = (), metadata: Mapping[str, str] | None = None):
        self._entries: dict[str, TensorEntry] = {}
        for e in entries:
            if e.key in self._entries:
                raise InvalidBundle(f"duplicate key {e.key!r}")
            if e.key == METADATA_KEY:
                raise InvalidBundle(f"{METADATA_KEY!r} is reserved")
            self._entries[e.key] = e
        self.metadata: dict[str, str] = dict(metadata or {})
        for k, v in self.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise InvalidBundle("metadata must map text to text")

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype="F32", metadata=None) -> "TensorBundle":
        dtype = _DTYPE_NAMES.get(dtype, dtype)
        entries = []
        for key, arr in arrays.items():
            arr = np.asarray(arr)
            narrowed = arr.astype(_DTYPES.get(dtype, np.float32)).astype(np.float32)
            entries.append(TensorEntry(key, dtype, tuple(arr.shape), narrowed))
        return cls(entries, metadata)

    def __getitem__(self, key: str) -> TensorEntry:
        return self._entries[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other):
        if not isinstance(other, TensorBundle):
            return NotImplemented
        if list(self) != list(other) or self.metadata != other.metadata:
            return False
        for k, e in self.items():
            o = other[k]
            if e.dtype != o.dtype or e.shape != o.shape or e.payload() != o.payload():
                return False
        return True

    __hash__ = None

    def matrix(self, key: str) -> np.ndarray:
        """Entry ``key`` widened to float64."""
        return self._entries[key].as_float64()

    def matrix_keys(self) -> list[str]:
        return [k for k, e in self._entries.items() if len(e.shape) == 2]

    def content_hash(self) -> str:
        """SHA-256 over names, dtypes, shapes and payload bytes (metadata excluded)."""
        h = hashlib.sha256()
        for k, e in self._entries.items():
            h.update(json.dumps([k, e.dtype, list(e.shape)]).encode())
            h.update(e.payload())
        return h.hexdigest()


def serialize_bundle(bundle: TensorBundle) -> bytes:
    header: dict[str, object] = {}
    if bundle.metadata:
        header[METADATA_KEY] = dict(bundle.metadata)
    payloads = []
    offset = 0
    for key, e in bundle.items():
        raw = e.payload()
        header[key] = {"dtype": e.dtype, "shape": list(e.shape), "data_offsets": [offset, offset + len(raw)]}
        payloads.append(raw)
        offset += len(raw)
    text = json.dumps(header, separators=(",", ":")).encode("utf-8")
    # pad so the payload starts 8-byte aligned
    text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text + b"".join(payloads)


def write_bundle(bundle: TensorBundle, path) -> None:
    data = serialize_bundle(bundle)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def parse_bundle(data: bytes, skip_unsupported: bool = False) -> TensorBundle:
    """Decode container bytes.

    With ``skip_unsupported`` tensors of unsupported dtype or rank are dropped
    instead of raising :class:`UnsupportedTensor` (useful on full checkpoints
    that carry convolution kernels).
    """
    if len(data) < 8:
        raise FormatError("file shorter than the 8-byte header length prefix", offset=0)
    (n,) = struct.unpack("<Q", data[:8])
    if 8 + n > len(data):
        raise FormatError(f"header length {n} exceeds file size {len(data)}", offset=0)
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", getattr(exc, "start", 0))
        raise FormatError(f"header is not valid JSON: {exc}", offset=8 + pos) from exc
    if not isinstance(header, dict):
        raise FormatError("header is not a JSON object", offset=8)

    base = 8 + n
    payload_len = len(data) - base
    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise FormatError("__metadata__ must map text to text", offset=8)

    entries = []
    spans = []
    for key, info in header.items():
        try:
            dtype = info["dtype"]
            shape = tuple(int(d) for d in info["shape"])
            begin, end = (int(x) for x in info["data_offsets"])
        except (TypeError, KeyError, ValueError) as exc:
            raise FormatError(f"bad header entry for {key!r}: {exc}", offset=8) from exc
        if any(d < 0 for d in shape) or begin < 0 or end < begin:
            raise FormatError(f"{key!r}: negative dimension or inverted data range", offset=8)
        if end > payload_len:
            raise FormatError(f"{key!r}: data range [{begin}, {end}) past end of payload ({payload_len} bytes)",
                              offset=base + min(begin, payload_len))
        spans.append((begin, end, key))
        if dtype not in _DTYPES or len(shape) not in (1, 2):
            if skip_unsupported:
                continue
            what = f"dtype {dtype!r}" if dtype not in _DTYPES else f"rank-{len(shape)} tensor"
            raise UnsupportedTensor(f"{key!r}: {what} not supported")
        dt = _DTYPES[dtype]
        count = int(np.prod(shape))
        if end - begin != count * dt.itemsize:
            raise FormatError(f"{key!r}: data range holds {end - begin} bytes, shape needs {count * dt.itemsize}",
                              offset=base + begin)
        arr = np.frombuffer(data, dtype=dt, count=count, offset=base + begin).astype(np.float32)
        entries.append(TensorEntry(key, dtype, shape, arr.reshape(shape)))

    spans.sort()
    for (b0, e0, k0), (b1, e1, k1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise FormatError(f"data ranges of {k0!r} and {k1!r} overlap", offset=base + b1)
    return TensorBundle(entries, metadata)


def read_bundle(path, skip_unsupported: bool = False) -> TensorBundle:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return parse_bundle(data, skip_unsupported=skip_unsupported)


# ---------------------------------------------------------------------------
# module keys

NETWORK_PARTS = ("down", "mid", "up", "text_encoder", "other")
OP_KINDS = ("to_q", "to_k", "to_v", "to_out", "other")

DEFAULT_ALIASES = {
    "db": "down", "down": "down", "down_blocks": "down", "down_block": "down",
    "ub": "up", "up": "up", "up_blocks": "up", "up_block": "up",
    "mb": "mid", "mid": "mid", "mid_block": "mid", "mid_blocks": "mid",
    "te": "text_encoder", "text_encoder": "text_encoder", "text_model": "text_encoder",
    "attentions": "attentions", "att": "attentions",
    "tb": "tb", "transformer_blocks": "tb", "transformer_block": "tb", "layers": "tb",
    "to_q": "to_q", "q_proj": "to_q",
    "to_k": "to_k", "k_proj": "to_k",
    "to_v": "to_v", "v_proj": "to_v",
    "to_out": "to_out", "out_proj": "to_out",
}

_SLOT = re.compile(r"^(attn\d*|self_attn|cross_attn)$")


@dataclass(frozen=True)
class ModuleKey:
    network_part: str
    block_index: int | None
    attention_index: int | None
    transformer_block: int | None
    op_kind: str
    raw: str
    slot: str | None = field(default=None, compare=False)

    @property
    def locator(self) -> tuple:
        """Naming-scheme independent position, used to pair modules across models."""
        if self.network_part == "other":
            return ("other", self.raw)
        return (self.network_part, self.block_index, self.attention_index,
                self.transformer_block, self.slot, self.op_kind)

    @property
    def group(self) -> tuple | None:
        """Locator without the transformer block: the alternate-block search scope."""
        if self.network_part == "other" or self.transformer_block is None:
            return None
        return (self.network_part, self.block_index, self.attention_index, self.slot, self.op_kind)

    def short_name(self) -> str:
        abbrev = {"down": "db", "up": "up", "mid": "mid", "text_encoder": "te", "other": "other"}
        parts = [abbrev[self.network_part]]
        if self.block_index is not None:
            parts.append(str(self.block_index))
        if self.attention_index is not None:
            parts += ["attentions", str(self.attention_index)]
        if self.transformer_block is not None:
            parts += ["tb", str(self.transformer_block)]
        if self.op_kind != "other":
            parts.append(self.op_kind)
        return ".".join(parts)

    def __str__(self):
        return self.raw


def _int_after(tokens, i):
    if i + 1 < len(tokens) and tokens[i + 1].isdigit():
        return int(tokens[i + 1])
    return None


def parse_module_key(raw: str, aliases: Mapping[str, str] | None = None) -> ModuleKey:
    """Best-effort structured parse of a checkpoint tensor name. Never raises."""
    table = dict(DEFAULT_ALIASES)
    if aliases:
        table.update(aliases)
    tokens = raw.split(".")
    part, block, attn, tb, op, slot = "other", None, None, None, "other", None
    for i, tok in enumerate(tokens):
        canon = table.get(tok)
        if canon in ("down", "mid", "up", "text_encoder") and part == "other":
            part = canon
            if canon != "mid":
                block = _int_after(tokens, i)
        elif canon == "attentions" and attn is None:
            attn = _int_after(tokens, i)
        elif canon == "tb" and tb is None:
            tb = _int_after(tokens, i)
        elif canon in ("to_q", "to_k", "to_v", "to_out"):
            op = canon
        elif _SLOT.match(tok):
            slot = tok
    return ModuleKey(part, block, attn, tb, op, raw, slot)


def format_module_key(key: ModuleKey) -> str:
    return key.raw
