"""Binary containers for path caches (``OPTE``) and checkpoints (``OPTM``).

All integers and floats are little-endian. Layouts are described in
``docs/formats.md``.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from collections import Counter
from pathlib import Path

import numpy as np

from .model import ModelParams
from .paths import PathStats, PathTable

CACHE_MAGIC = b"OPTE"
CACHE_VERSION = 1
CHECKPOINT_MAGIC = b"OPTM"
CHECKPOINT_VERSION = 1

KIND_PATHS = 1
KIND_STATS = 2

_DTYPES = {b"i": np.dtype("<i8"), b"f": np.dtype("<f8")}


class FormatError(ValueError):
    """Corrupt, foreign or mismatched binary file."""


class FingerprintMismatch(FormatError):
    pass


def atomic_write(path, data: bytes):
    """Write ``data`` next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_array(buf, name: str, arr: np.ndarray):
    arr = np.asarray(arr)
    code = b"f" if arr.dtype.kind == "f" else b"i"
    arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)) + raw + code + struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes())


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("unexpected end of file")
    return data


def _read_array(fh):
    (n,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, n).decode("utf-8")
    code = _read_exact(fh, 1)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code!r}")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
    dtype = _DTYPES[code]
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(_read_exact(fh, count * dtype.itemsize), dtype=dtype).reshape(shape)
    return name, arr.astype(dtype.newbyteorder("="))


def _table_arrays(prefix, table: PathTable):
    return {
        f"{prefix}.queries": table.queries,
        f"{prefix}.offsets": table.offsets,
        f"{prefix}.candidate": table.candidate,
        f"{prefix}.rels": table.rels,
        f"{prefix}.length": table.length,
        f"{prefix}.reliability": table.reliability,
        f"{prefix}.confidence": table.confidence,
    }


def _stats_arrays(stats: PathStats):
    ms = stats.max_steps

    def pad(p):
        return list(p) + [-1] * (ms - len(p))

    pairs = sorted(stats.pair_count.items())
    co = sorted(stats.co_count.items())
    return {
        "stats.pair_paths": np.array([pad(p) for p, _ in pairs], dtype=np.int64).reshape(-1, ms),
        "stats.pair_counts": np.array([c for _, c in pairs], dtype=np.int64),
        "stats.co_relations": np.array([r for (r, _), _ in co], dtype=np.int64),
        "stats.co_paths": np.array([pad(p) for (_, p), _ in co], dtype=np.int64).reshape(-1, ms),
        "stats.co_counts": np.array([c for _, c in co], dtype=np.int64),
    }


def write_cache(path, kind: int, fingerprint: bytes, meta: dict, arrays: dict):
    """Serialize a cache container.

    Layout: magic, u32 version, 32-byte graph fingerprint, u32 kind, u32
    length + UTF-8 JSON metadata, u32 array count, then each array as
    ``u16 name length, name, dtype code ('i' int64 / 'f' float64), u8 ndim,
    ndim x u64 shape, raw data``.
    """
    if len(fingerprint) != 32:
        raise ValueError("fingerprint must be 32 bytes")
    buf = io.BytesIO()
    buf.write(CACHE_MAGIC + struct.pack("<I", CACHE_VERSION) + fingerprint + struct.pack("<I", kind))
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_raw)) + meta_raw)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        _write_array(buf, name, arrays[name])
    atomic_write(path, buf.getvalue())


def read_cache(path, expected_fingerprint: bytes | None = None, kind: int | None = None):
    """Return ``(kind, fingerprint, meta, arrays)``; raise on foreign or mismatched files."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CACHE_MAGIC:
            raise FormatError(f"{path}: not a path cache")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CACHE_VERSION:
            raise FormatError(f"{path}: unsupported cache version {version}")
        fingerprint = _read_exact(fh, 32)
        (found_kind,) = struct.unpack("<I", _read_exact(fh, 4))
        if expected_fingerprint is not None and fingerprint != expected_fingerprint:
            raise FingerprintMismatch(f"{path}: cache was built for a different graph")
        if kind is not None and found_kind != kind:
            raise FormatError(f"{path}: expected cache kind {kind}, found {found_kind}")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = json.loads(_read_exact(fh, n).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays = dict(_read_array(fh) for _ in range(count))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    return found_kind, fingerprint, meta, arrays


def cache_fingerprint(path) -> bytes:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CACHE_MAGIC:
            raise FormatError(f"{path}: not a path cache")
        _read_exact(fh, 4)
        return _read_exact(fh, 32)


def write_path_cache(path, fingerprint: bytes, tables: dict, meta: dict):
    """``tables`` maps section names (``train``, ``eval.test``, ...) to :class:`PathTable`."""
    arrays = {}
    for name, table in tables.items():
        arrays.update(_table_arrays(name, table))
    meta = {**meta, "sections": sorted(tables)}
    write_cache(path, KIND_PATHS, fingerprint, meta, arrays)


def read_path_cache(path, fingerprint: bytes | None = None):
    _, _, meta, arrays = read_cache(path, fingerprint, KIND_PATHS)
    tables = {}
    for name in meta["sections"]:
        tables[name] = PathTable(
            queries=arrays[f"{name}.queries"].reshape(-1, 4),
            offsets=arrays[f"{name}.offsets"],
            candidate=arrays[f"{name}.candidate"],
            rels=arrays[f"{name}.rels"].reshape(-1, meta["max_steps"]),
            length=arrays[f"{name}.length"],
            reliability=arrays[f"{name}.reliability"],
            confidence=arrays[f"{name}.confidence"],
            max_steps=meta["max_steps"],
        )
    return tables, meta


def write_stats(path, fingerprint: bytes, stats: PathStats, meta: dict):
    write_cache(path, KIND_STATS, fingerprint, {**meta, "max_steps": stats.max_steps}, _stats_arrays(stats))


def read_stats(path, fingerprint: bytes | None = None) -> PathStats:
    _, _, meta, a = read_cache(path, fingerprint, KIND_STATS)
    ms = meta["max_steps"]

    def unpad(row):
        return tuple(int(x) for x in row if x >= 0)

    stats = PathStats(max_steps=ms)
    stats.pair_count = Counter({unpad(p): int(c) for p, c in zip(a["stats.pair_paths"].reshape(-1, ms), a["stats.pair_counts"])})
    stats.co_count = Counter(
        {(int(r), unpad(p)): int(c) for r, p, c in zip(a["stats.co_relations"], a["stats.co_paths"].reshape(-1, ms), a["stats.co_counts"])}
    )
    return stats


# ---------------------------------------------------------------------------
# checkpoints

_NORMS = {"L1": 1, "L2": 2}
_M_MODES = {"derived": 0, "learned": 1}


def checkpoint_bytes(params: ModelParams) -> bytes:
    """``OPTM`` layout.

    magic, u32 version, u64 d, u64 entity count, u64 relation count, u64
    learned-transition count, u32 norm (1 = L1, 2 = L2), u32 m_mode
    (0 derived, 1 learned), u64 epoch, then float64 arrays in order:
    entity ``[n_e, d]``, relation ``[n_r, d]``, W1 ``[n_r, d, d]``, W2
    ``[n_r, d, d]``; then for learned transitions int64 keys ``[n_t, 2]``
    followed by float64 matrices ``[n_t, d, d]``.
    """
    keys = sorted(params.transitions)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<4Q", params.dim, params.n_entities, params.n_relations, len(keys)))
    buf.write(struct.pack("<2IQ", _NORMS[params.norm], _M_MODES[params.m_mode], params.epoch))
    for arr in (params.entity, params.relation, params.W1, params.W2):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    if keys:
        buf.write(np.asarray(keys, dtype="<i8").tobytes())
        buf.write(np.ascontiguousarray(np.stack([params.transitions[k] for k in keys]), dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path, params: ModelParams, sidecar: dict | None = None):
    """Write ``path`` and a JSON sidecar ``path + '.json'``."""
    data = checkpoint_bytes(params)
    atomic_write(path, data)
    side = {"sha256": hashlib.sha256(data).hexdigest(), **(sidecar or {})}
    atomic_write(str(path) + ".json", (json.dumps(side, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        d, ne, nr, nt = struct.unpack("<4Q", _read_exact(fh, 32))
        norm_code, mode_code, epoch = struct.unpack("<2IQ", _read_exact(fh, 16))

        def take(shape, dtype="<f8"):
            count = int(np.prod(shape))
            raw = _read_exact(fh, count * 8)
            return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.float64 if dtype == "<f8" else np.int64)

        entity = take((ne, d))
        relation = take((nr, d))
        W1 = take((nr, d, d))
        W2 = take((nr, d, d))
        transitions = {}
        if nt:
            keys = take((nt, 2), "<i8")
            mats = take((nt, d, d))
            transitions = {(int(a), int(b)): m.copy() for (a, b), m in zip(keys, mats)}
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    norm = {v: k for k, v in _NORMS.items()}.get(norm_code)
    m_mode = {v: k for k, v in _M_MODES.items()}.get(mode_code)
    if norm is None or m_mode is None:
        raise FormatError(f"{path}: bad header flags")
    return ModelParams(entity, relation, W1, W2, norm=norm, m_mode=m_mode, transitions=transitions, epoch=int(epoch))


def read_sidecar(path) -> dict:
    with open(str(path) + ".json", encoding="utf-8") as fh:
        return json.load(fh)


def vocab_hash(labels) -> str:
    digest = hashlib.sha256()
    for label in labels:
        digest.update(label.encode("utf-8") + b"\0")
    return digest.hexdigest()


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()
