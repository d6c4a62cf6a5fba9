"""Bit-exact serialization: caches, tensors, and evaluation reports.

KVCF cache files (all integers little-endian):

    magic   b"KVCF"
    version u16 (currently 1)
    layers  u32
    kv_heads u32
    head_dim u32
    rows    u32 * layers          per-layer slot count
    payload per layer: K then V, float32, row-major (kv_heads, rows, head_dim)
    provenance per layer: u32 * (kv_heads * rows)   original context index
    crc32   u32 over every preceding byte

Tensor files ("KVCT") hold one named array: dtype byte (0=f32, 1=u32),
ndim byte, dims, payload, crc32. Reports are JSON plus a fixed-column
CSV; identical inputs always produce identical bytes.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .composer import CompressedCache
from .errors import KvcError
from .evaluator import EvalReport
from .model import HeadMaskSet

MAGIC_CACHE = b"KVCF"
MAGIC_TENSOR = b"KVCT"
FORMAT_VERSION = 1

CSV_COLUMNS = ("r_target", "r_achieved", "reward_mean", "reward_std", "epsilon", "kl_mean")


class CacheFormatError(KvcError):
    """Base for malformed cache/tensor files."""


class BadMagicError(CacheFormatError):
    pass


class UnsupportedVersionError(CacheFormatError):
    pass


class TruncatedError(CacheFormatError):
    pass


class TrailingBytesError(CacheFormatError):
    pass


class ChecksumError(CacheFormatError):
    pass


class MalformedHeaderError(CacheFormatError):
    pass


class IoError(KvcError):
    pass


def _header_bytes(layers: int, kv_heads: int, head_dim: int, rows: list[int]) -> bytes:
    return (
        MAGIC_CACHE
        + struct.pack("<H", FORMAT_VERSION)
        + struct.pack("<III", layers, kv_heads, head_dim)
        + struct.pack(f"<{layers}I", *rows)
    )


def cache_to_bytes(cache: CompressedCache) -> bytes:
    if cache.provenance is None:
        raise IoError("cache has no provenance; only compressed caches serialize")
    layers = cache.layer_count
    kv_heads, _, head_dim = cache.keys[0].shape
    rows = [cache.rows(l) for l in range(layers)]
    parts = [_header_bytes(layers, kv_heads, head_dim, rows)]
    for l in range(layers):
        parts.append(cache.keys[l].astype("<f4").tobytes(order="C"))
        parts.append(cache.values[l].astype("<f4").tobytes(order="C"))
    for l in range(layers):
        parts.append(cache.provenance[l].astype("<u4").tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def write_cache(cache: CompressedCache, path: str | Path) -> int:
    """Serialize; rewriting the same cache is byte-identical. Returns byte count."""
    data = cache_to_bytes(cache)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoError(f"cannot write cache to {path}: {exc}") from exc
    return len(data)


def cache_from_bytes(data: bytes) -> CompressedCache:
    if len(data) < 4 or data[:4] != MAGIC_CACHE:
        raise BadMagicError(f"bad magic at byte 0: {data[:4]!r}")
    if len(data) < 6:
        raise TruncatedError(f"file ends at byte {len(data)} inside the version field")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version} at byte 4")
    if len(data) < 18:
        raise TruncatedError(f"file ends at byte {len(data)} inside the fixed header")
    layers, kv_heads, head_dim = struct.unpack_from("<III", data, 6)
    if layers < 1 or kv_heads < 1 or head_dim < 1:
        raise MalformedHeaderError(
            f"non-positive dimension in header at byte 6: "
            f"layers={layers} kv_heads={kv_heads} head_dim={head_dim}"
        )
    rows_end = 18 + 4 * layers
    if len(data) < rows_end:
        raise TruncatedError(
            f"file ends at byte {len(data)}, row table needs {rows_end} bytes"
        )
    rows = list(struct.unpack_from(f"<{layers}I", data, 18))

    total_rows = sum(rows)
    payload = total_rows * kv_heads * head_dim * 4 * 2
    provenance = total_rows * kv_heads * 4
    expected = rows_end + payload + provenance + 4
    if len(data) < expected:
        raise TruncatedError(f"expected {expected} bytes, file has {len(data)}")
    if len(data) > expected:
        raise TrailingBytesError(f"expected {expected} bytes, file has {len(data)}")

    (stored_crc,) = struct.unpack_from("<I", data, expected - 4)
    actual_crc = zlib.crc32(data[: expected - 4])
    if stored_crc != actual_crc:
        raise ChecksumError(
            f"crc mismatch at byte {expected - 4}: "
            f"stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )

    offset = rows_end
    keys, values = [], []
    for n_l in rows:
        count = kv_heads * n_l * head_dim
        k = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        v = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        keys.append(k.reshape(kv_heads, n_l, head_dim).astype(np.float64))
        values.append(v.reshape(kv_heads, n_l, head_dim).astype(np.float64))
    prov = []
    for n_l in rows:
        count = kv_heads * n_l
        p = np.frombuffer(data, dtype="<u4", count=count, offset=offset)
        offset += count * 4
        prov.append(p.reshape(kv_heads, n_l).astype(np.int64))
    # the next free position is one past the newest original token kept anywhere
    next_pos = 1 + max((int(p.max()) for p in prov if p.size), default=-1)
    return CompressedCache(
        keys=keys,
        values=values,
        next_positions=[next_pos] * layers,
        provenance=prov,
    )


def read_cache(path: str | Path) -> CompressedCache:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read cache from {path}: {exc}") from exc
    return cache_from_bytes(data)


def cache_header_size(layers: int) -> int:
    return 18 + 4 * layers


# --- generic tensors ----------------------------------------------------------

_DTYPES = {0: "<f4", 1: "<u4"}
_DTYPE_CODES = {"float32": 0, "uint32": 1}


def write_tensor(array: np.ndarray, path: str | Path) -> int:
    """Store one array as float32 or uint32, shape-tagged and checksummed."""
    if np.issubdtype(array.dtype, np.integer):
        code, payload = 1, array.astype("<u4")
    else:
        code, payload = 0, array.astype("<f4")
    header = (
        MAGIC_TENSOR
        + struct.pack("<H", FORMAT_VERSION)
        + struct.pack("<BB", code, array.ndim)
        + struct.pack(f"<{array.ndim}I", *array.shape)
    )
    body = header + payload.tobytes(order="C")
    data = body + struct.pack("<I", zlib.crc32(body))
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoError(f"cannot write tensor to {path}: {exc}") from exc
    return len(data)


def read_tensor(path: str | Path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read tensor from {path}: {exc}") from exc
    if len(data) < 4 or data[:4] != MAGIC_TENSOR:
        raise BadMagicError(f"bad magic at byte 0: {data[:4]!r}")
    if len(data) < 8:
        raise TruncatedError(f"file ends at byte {len(data)} inside the fixed header")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version} at byte 4")
    code, ndim = struct.unpack_from("<BB", data, 6)
    if code not in _DTYPES:
        raise MalformedHeaderError(f"unknown dtype code {code} at byte 6")
    dims_end = 8 + 4 * ndim
    if len(data) < dims_end:
        raise TruncatedError(f"file ends at byte {len(data)}, dims need {dims_end}")
    dims = struct.unpack_from(f"<{ndim}I", data, 8)
    count = int(np.prod(dims)) if ndim else 1
    expected = dims_end + count * 4 + 4
    if len(data) < expected:
        raise TruncatedError(f"expected {expected} bytes, file has {len(data)}")
    if len(data) > expected:
        raise TrailingBytesError(f"expected {expected} bytes, file has {len(data)}")
    (stored_crc,) = struct.unpack_from("<I", data, expected - 4)
    if stored_crc != zlib.crc32(data[: expected - 4]):
        raise ChecksumError(f"crc mismatch at byte {expected - 4}")
    array = np.frombuffer(data, dtype=_DTYPES[code], count=count, offset=dims_end)
    return array.reshape(dims)


def write_masks(masks: "HeadMaskSet", path: str | Path) -> int:
    """Keep-masks as a 0/1 uint32 tensor (layers, kv_heads, context)."""
    return write_tensor(masks.masks.astype(np.uint32), path)


def read_masks(path: str | Path) -> "HeadMaskSet":
    array = read_tensor(path)
    if array.ndim != 3:
        raise MalformedHeaderError(f"mask tensor must be 3-D, got {array.ndim}-D")
    return HeadMaskSet(masks=array.astype(bool))


# --- reports ------------------------------------------------------------------


def report_to_json(report: EvalReport) -> str:
    payload = {
        "policy": report.policy,
        "auc": report.auc,
        "points": [asdict(p) for p in report.points],
        "tolerances": [asdict(t) for t in report.tolerance_results],
        "seeds": report.seeds,
        "config": report.config,
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def report_to_csv(report: EvalReport) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for p in report.points:
        lines.append(
            ",".join(
                repr(v)
                for v in (
                    p.r_target,
                    p.r_achieved,
                    p.reward_mean,
                    p.reward_std,
                    p.epsilon,
                    p.kl_mean,
                )
            )
        )
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir: str | Path, stem: str = "report") -> dict[str, Path]:
    """Emit <stem>.json and <stem>.csv; identical reports give identical bytes."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        json_path = out / f"{stem}.json"
        csv_path = out / f"{stem}.csv"
        json_path.write_text(report_to_json(report))
        csv_path.write_text(report_to_csv(report))
    except OSError as exc:
        raise IoError(f"cannot write report to {out_dir}: {exc}") from exc
    return {"json": json_path, "csv": csv_path}


def parse_report_json(text: str) -> dict:
    return json.loads(text)
