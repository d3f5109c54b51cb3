"""Sharded checkpoint I/O in the safetensors container format.

Reading is lazy: opening a checkpoint parses only the shard headers (and
the index file, when present) and records where each tensor's bytes live.
Tensor data is fetched on demand, one tensor at a time, so a merge never
needs a whole model in memory.

Writing is streaming: tensors are appended to the current shard until the
size cap would be exceeded, then the shard is finalized and a new one is
started. Multi-shard outputs get the conventional
``model-%05d-of-%05d.safetensors`` names plus a
``model.safetensors.index.json``; single-shard outputs are written as one
``model.safetensors`` with no index.

A safetensors file is: an 8-byte little-endian header length ``n``, then
``n`` bytes of JSON mapping tensor names to ``{dtype, shape,
data_offsets}`` (offsets relative to the end of the header), then the data
region. An optional ``__metadata__`` entry holds string-to-string
metadata.
"""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

import numpy as np

from .errors import CapacityError, ConfigError, FormatError

logger = logging.getLogger(__name__)

SINGLE_FILE = "model.safetensors"
INDEX_FILE = "model.safetensors.index.json"
MODEL_CONFIG_FILE = "config.json"

DTYPE_SIZES = {"F32": 4, "F16": 2, "BF16": 2}

DEFAULT_MAX_SHARD_BYTES = 5 * 1024**3

# Headers beyond this are rejected as malformed rather than allocated.
_MAX_HEADER_BYTES = 100 * 1024**2

_COPY_CHUNK = 8 * 1024**2

# Auxiliary files carried over verbatim to the merged output when present.
AUX_FILES = (
    "tokenizer.json",
    "tokenizer_config.json",
    "tokenizer.model",
    "special_tokens_map.json",
    "vocab.json",
    "vocab.txt",
    "merges.txt",
    "added_tokens.json",
    "spiece.model",
    "chat_template.json",
    "generation_config.json",
)

_DTYPE_ALIASES = {
    "f32": "F32",
    "fp32": "F32",
    "float32": "F32",
    "float": "F32",
    "f16": "F16",
    "fp16": "F16",
    "float16": "F16",
    "half": "F16",
    "bf16": "BF16",
    "bfloat16": "BF16",
}

Reader = Callable[[Path, int, int], bytes]


def normalize_dtype(name: str) -> str:
    """Map a user-facing dtype spelling to its canonical storage name."""
    if not isinstance(name, str):
        raise ValueError(f"dtype must be a string, got {type(name).__name__}")
    canon = _DTYPE_ALIASES.get(name.strip().lower())
    if canon is None:
        raise ValueError(f"unsupported dtype {name!r} (expected one of float32, float16, bfloat16)")
    return canon


def default_reader(path: Path, offset: int, length: int) -> bytes:
    """Read ``length`` bytes at ``offset``. Opens per call, so it is thread-safe."""
    with open(path, "rb") as f:
        f.seek(offset)
        return f.read(length)


def decode_tensor(raw: bytes, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    """Decode stored little-endian bytes into a writable float32 array."""
    if dtype == "F32":
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    elif dtype == "F16":
        arr = np.frombuffer(raw, dtype="<f2").astype(np.float32)
    elif dtype == "BF16":
        bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32)
        arr = (bits << np.uint32(16)).view(np.float32)
    else:
        raise FormatError(f"unsupported dtype {dtype!r}")
    return arr.reshape(shape)


def encode_tensor(arr: np.ndarray, dtype: str) -> bytes:
    """Encode a float32 array as little-endian bytes in the storage dtype."""
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if dtype == "F32":
        return arr.astype("<f4", copy=False).tobytes()
    if dtype == "F16":
        with np.errstate(over="ignore"):
            return arr.astype("<f2").tobytes()
    if dtype == "BF16":
        return _f32_to_bf16(arr).astype("<u2", copy=False).tobytes()
    raise FormatError(f"unsupported dtype {dtype!r}")


def quantize(arr: np.ndarray, dtype: str) -> np.ndarray:
    """Round-trip an array through the storage dtype, staying float32 in memory."""
    shape = np.asarray(arr).shape
    return decode_tensor(encode_tensor(arr, dtype), dtype, shape)


def _f32_to_bf16(arr: np.ndarray) -> np.ndarray:
    """Narrow float32 to bfloat16 bit patterns with round-to-nearest-even."""
    bits = arr.view(np.uint32)
    # Round to nearest even: add 0x7FFF plus the lowest surviving bit.
    rounded = bits + np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))
    out = (rounded >> np.uint32(16)).astype(np.uint16)
    nan = np.isnan(arr)
    if nan.any():
        # Rounding a NaN payload can carry into the exponent and produce inf;
        # keep the sign and force a quiet NaN instead.
        quiet = ((bits >> np.uint32(16)).astype(np.uint16)) | np.uint16(0x0040)
        out = np.where(nan, quiet, out)
    return out


@dataclass(frozen=True)
class TensorRecord:
    """Location and type of one stored tensor, resolved without reading data."""

    name: str
    dtype: str
    shape: tuple[int, ...]
    byte_offset: int
    byte_length: int
    shard: str


@dataclass
class LazyCheckpoint:
    """An opened checkpoint directory with per-tensor lazy access.

    ``records`` iterates in (shard, physical offset) order. ``metadata`` is
    the parsed model config document, ``{}`` when the directory has none.
    ``file_metadata`` is the ``__metadata__`` block of the first shard.
    """

    root: Path
    records: dict[str, TensorRecord]
    metadata: dict[str, Any]
    tokenizer_files: list[Path]
    file_metadata: dict[str, str]
    _data_start: dict[str, int] = field(repr=False, default_factory=dict)
    _reader: Reader = field(repr=False, default=default_reader)

    def names(self) -> list[str]:
        return list(self.records)

    def __contains__(self, name: str) -> bool:
        return name in self.records

    def data_start(self, shard: str) -> int:
        """Absolute file offset where the named shard's data region begins."""
        return self._data_start[shard]

    def load_raw(self, name: str) -> bytes:
        """Read exactly the stored bytes of one tensor."""
        rec = self.records[name]
        path = self.root / rec.shard
        offset = self._data_start[rec.shard] + rec.byte_offset
        raw = self._reader(path, offset, rec.byte_length)
        if len(raw) != rec.byte_length:
            raise FormatError(
                f"tensor {name!r}: byte range [{offset}, {offset + rec.byte_length})"
                f" extends past the end of {rec.shard}"
            )
        return raw

    def load_tensor(self, name: str) -> np.ndarray:
        """Load one tensor as float32, reading only its own byte range."""
        rec = self.records[name]
        return decode_tensor(self.load_raw(name), rec.dtype, rec.shape)


def open_checkpoint(path: str | Path, reader: Reader | None = None) -> LazyCheckpoint:
    """Open a checkpoint directory, reading headers and the index but no data.

    ``reader`` replaces the byte-range reader used for all file access,
    which lets tests observe exactly which ranges are touched.
    """
    root = Path(path)
    read = reader if reader is not None else default_reader
    if not root.is_dir():
        raise FormatError(f"not a checkpoint directory: {root}")

    single = root / SINGLE_FILE
    index_path = root / INDEX_FILE
    if single.is_file() and index_path.is_file():
        raise FormatError(f"{root}: both {SINGLE_FILE} and {INDEX_FILE} are present")

    records: dict[str, TensorRecord] = {}
    data_start: dict[str, int] = {}
    file_metadata: dict[str, str] = {}

    if index_path.is_file():
        shard_names, weight_map = _parse_index(index_path)
        header_names: dict[str, str] = {}
        for shard in shard_names:
            shard_records, meta, start = _parse_shard(root, shard, read)
            if not file_metadata:
                file_metadata = meta
            data_start[shard] = start
            for rec in shard_records:
                if rec.name in records:
                    raise FormatError(f"tensor {rec.name!r} appears in more than one shard")
                records[rec.name] = rec
                header_names[rec.name] = shard
        for name, shard in weight_map.items():
            if header_names.get(name) != shard:
                raise FormatError(f"index maps {name!r} to {shard} but the shard header disagrees")
        extra = set(header_names) - set(weight_map)
        if extra:
            raise FormatError(f"shard tensors missing from the index: {sorted(extra)[:5]}")
    elif single.is_file():
        shard_records, file_metadata, start = _parse_shard(root, SINGLE_FILE, read)
        data_start[SINGLE_FILE] = start
        for rec in shard_records:
            records[rec.name] = rec
    else:
        raise FormatError(f"{root}: found neither {SINGLE_FILE} nor {INDEX_FILE}")

    metadata: dict[str, Any] = {}
    config_path = root / MODEL_CONFIG_FILE
    if config_path.is_file():
        try:
            metadata = json.loads(config_path.read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{config_path}: invalid model config: {exc}") from exc
        if not isinstance(metadata, dict):
            raise FormatError(f"{config_path}: model config must be a JSON object")

    tokenizer_files = [root / n for n in AUX_FILES if (root / n).is_file()]

    return LazyCheckpoint(
        root=root,
        records=records,
        metadata=metadata,
        tokenizer_files=tokenizer_files,
        file_metadata=file_metadata,
        _data_start=data_start,
        _reader=read,
    )


def _parse_index(index_path: Path) -> tuple[list[str], dict[str, str]]:
    try:
        doc = json.loads(index_path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{index_path}: invalid index: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("weight_map"), dict):
        raise FormatError(f"{index_path}: index must contain a weight_map object")
    weight_map = doc["weight_map"]
    for name, shard in weight_map.items():
        if not isinstance(name, str) or not isinstance(shard, str):
            raise FormatError(f"{index_path}: weight_map must map strings to strings")
    shard_names = sorted(set(weight_map.values()))
    return shard_names, weight_map


def _parse_shard(root: Path, shard: str, read: Reader) -> tuple[list[TensorRecord], dict[str, str], int]:
    """Parse one shard's header. Returns (records by offset, metadata, data start)."""
    path = root / shard
    if not path.is_file():
        raise FormatError(f"missing shard file: {path}")
    file_size = os.stat(path).st_size

    prefix = read(path, 0, 8)
    if len(prefix) != 8:
        raise FormatError(f"{path}: truncated header length")
    (header_len,) = struct.unpack("<Q", prefix)
    if header_len > _MAX_HEADER_BYTES or 8 + header_len > file_size:
        raise FormatError(f"{path}: header length {header_len} exceeds the file")
    raw_header = read(path, 8, header_len)
    if len(raw_header) != header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw_header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header must be a JSON object")

    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise FormatError(f"{path}: __metadata__ must map strings to strings")

    data_start = 8 + header_len
    data_size = file_size - data_start
    records = [_parse_entry(path, name, ent, data_size, shard) for name, ent in header.items()]

    records.sort(key=lambda r: r.byte_offset)
    prev_end = 0
    prev_name = ""
    for rec in records:
        if rec.byte_offset < prev_end:
            raise FormatError(f"{path}: tensors {prev_name!r} and {rec.name!r} overlap")
        prev_end = rec.byte_offset + rec.byte_length
        prev_name = rec.name
    return records, dict(metadata), data_start


def _parse_entry(path: Path, name: str, ent: Any, data_size: int, shard: str) -> TensorRecord:
    if not isinstance(ent, dict):
        raise FormatError(f"{path}: entry for {name!r} must be an object")
    dtype = ent.get("dtype")
    if dtype not in DTYPE_SIZES:
        raise FormatError(f"{path}: tensor {name!r} has unsupported dtype {dtype!r}")
    shape = ent.get("shape")
    if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
        raise FormatError(f"{path}: tensor {name!r} has an invalid shape")
    offsets = ent.get("data_offsets")
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(isinstance(o, int) for o in offsets)
        or not 0 <= offsets[0] <= offsets[1] <= data_size
    ):
        raise FormatError(f"{path}: tensor {name!r} has invalid data_offsets")
    begin, end = offsets
    expected = math.prod(shape) * DTYPE_SIZES[dtype]
    if end - begin != expected:
        raise FormatError(
            f"{path}: tensor {name!r} occupies {end - begin} bytes but"
            f" dtype and shape require {expected}"
        )
    return TensorRecord(
        name=name, dtype=dtype, shape=tuple(shape), byte_offset=begin, byte_length=end - begin, shard=shard
    )


def _shard_file_name(i: int, total: int) -> str:
    if total == 1:
        return SINGLE_FILE
    return f"model-{i:05d}-of-{total:05d}.safetensors"


class _ShardWriter:
    """Accumulates one shard's data region in a temp file next to the output."""

    def __init__(self, out_dir: Path, ordinal: int):
        self.ordinal = ordinal
        self.tmp_path = out_dir / f".data-{ordinal:05d}.tmp"
        self.part_path = out_dir / f".shard-{ordinal:05d}.part"
        self.entries: list[tuple[str, str, tuple[int, ...], int]] = []
        self.data_bytes = 0
        self._tmp = open(self.tmp_path, "wb")

    def add(self, name: str, dtype: str, shape: tuple[int, ...], raw: bytes) -> None:
        self._tmp.write(raw)
        self.entries.append((name, dtype, shape, len(raw)))
        self.data_bytes += len(raw)

    def finalize(self, metadata: Mapping[str, str] | None) -> None:
        """Write header plus data to the .part file and drop the temp file."""
        self._tmp.close()
        header: dict[str, Any] = {}
        if metadata:
            header["__metadata__"] = dict(metadata)
        offset = 0
        for name, dtype, shape, nbytes in self.entries:
            header[name] = {
                "dtype": dtype,
                "shape": list(shape),
                "data_offsets": [offset, offset + nbytes],
            }
            offset += nbytes
        blob = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        if len(blob) % 8:
            blob += b" " * (8 - len(blob) % 8)
        with open(self.part_path, "wb") as out:
            out.write(struct.pack("<Q", len(blob)))
            out.write(blob)
            with open(self.tmp_path, "rb") as src:
                shutil.copyfileobj(src, out, _COPY_CHUNK)
        os.unlink(self.tmp_path)

    def abort(self) -> None:
        try:
            self._tmp.close()
        finally:
            for p in (self.tmp_path, self.part_path):
                try:
                    os.unlink(p)
                except OSError:
                    pass


def write_sharded(
    tensors: Iterable[tuple[str, np.ndarray]],
    out_dir: str | Path,
    *,
    max_shard_bytes: int = DEFAULT_MAX_SHARD_BYTES,
    dtype: str = "F32",
    metadata: Mapping[str, str] | None = None,
) -> dict[str, Any]:
    """Stream (name, float32 array) pairs into sharded safetensors files.

    Packing is greedy in arrival order: a tensor that would push the
    current shard past ``max_shard_bytes`` starts a new shard. Every shard
    carries the same ``__metadata__``. Returns the index document; the
    index file itself is only written when there is more than one shard.

    Raises CapacityError when a single tensor exceeds the cap and
    ConfigError on duplicate tensor names.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if max_shard_bytes <= 0:
        raise ConfigError(f"shard size cap must be positive, got {max_shard_bytes}")
    if dtype not in DTYPE_SIZES:
        raise FormatError(f"unsupported dtype {dtype!r}")
    if metadata is not None and not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise ConfigError("file metadata must map strings to strings")

    shards: list[_ShardWriter] = []
    current: _ShardWriter | None = None
    order: list[tuple[str, int]] = []  # (tensor name, shard ordinal)
    seen: set[str] = set()
    total_size = 0

    try:
        for name, arr in tensors:
            if name in seen:
                raise ConfigError(f"duplicate tensor name in output stream: {name!r}")
            seen.add(name)
            raw = encode_tensor(arr, dtype)
            if len(raw) > max_shard_bytes:
                raise CapacityError(
                    f"tensor {name!r} is {len(raw)} bytes, larger than the"
                    f" shard size cap of {max_shard_bytes}"
                )
            if current is not None and current.data_bytes + len(raw) > max_shard_bytes:
                current.finalize(metadata)
                current = None
            if current is None:
                current = _ShardWriter(out, len(shards))
                shards.append(current)
            current.add(name, dtype, np.asarray(arr).shape, raw)
            order.append((name, current.ordinal))
            total_size += len(raw)
        if current is not None:
            current.finalize(metadata)
        elif not shards:
            # An empty stream still produces a valid (empty) checkpoint file.
            current = _ShardWriter(out, 0)
            shards.append(current)
            current.finalize(metadata)
    except BaseException:
        if current is not None and not current.part_path.exists():
            current.abort()
        for shard in shards:
            for p in (shard.tmp_path, shard.part_path):
                try:
                    os.unlink(p)
                except OSError:
                    pass
        raise

    n = len(shards)
    final_names = {}
    for shard in shards:
        final = _shard_file_name(shard.ordinal + 1, n)
        os.replace(shard.part_path, out / final)
        final_names[shard.ordinal] = final

    weight_map = {name: final_names[ordinal] for name, ordinal in order}
    index_doc = {"metadata": {"total_size": total_size}, "weight_map": weight_map}
    if n > 1:
        (out / INDEX_FILE).write_text(
            json.dumps(index_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    logger.debug("wrote %d tensors (%d bytes) across %d shard(s) to %s", len(order), total_size, n, out)
    return index_doc
