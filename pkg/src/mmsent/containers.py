"""Binary file formats: parameter checkpoints, per-utterance feature
caches, and embedding tables.  All integers and floats are
little-endian; float payloads are row-major float64.

Checkpoint layout: 8-byte magic, format version byte, entry count, then
a manifest (name, shape, payload offset per entry, names sorted), then
the concatenated payloads.  Sorting makes the bytes a pure function of
the contents.
"""

from __future__ import annotations

import struct

import numpy as np

from .dsp import FeatureSequence
from .errors import FormatError

_CKPT_MAGIC = b"MMSENTCK"
_CACHE_MAGIC = b"MMSENT-FEATCACHE"  # exactly 16 bytes
_VERSION = 1


def save_checkpoint(path, tensors: dict):
    arrays = {}
    for name, t in tensors.items():
        arr = np.asarray(getattr(t, "data", t), dtype=np.float64)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # keeps 0-d entries 0-d
        arrays[name] = arr
    names = sorted(arrays)
    header = [_CKPT_MAGIC, struct.pack("<BI", _VERSION, len(names))]
    offset = 0
    for name in names:
        arr = arrays[name]
        enc = name.encode("utf-8")
        header.append(struct.pack("<H", len(enc)))
        header.append(enc)
        header.append(struct.pack("<B", arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        header.append(struct.pack("<Q", offset))
        offset += arr.nbytes
    payload = [arrays[name].astype("<f8").tobytes() for name in names]
    with open(path, "wb") as fh:
        fh.write(b"".join(header))
        fh.write(b"".join(payload))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic (offset 0)")
    version, count = struct.unpack_from("<BI", blob, 8)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 13
    entries = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            (offset,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            entries.append((name, shape, offset))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint manifest (offset {pos})") from exc
    base = pos
    out = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        start = base + offset
        end = start + 8 * n
        if end > len(blob):
            raise FormatError(f"{path}: truncated payload for '{name}' (offset {start})")
        out[name] = np.frombuffer(blob[start:end], dtype="<f8").reshape(shape).copy()
    return out


def save_feature_cache(path, seq: FeatureSequence):
    frames, dims = seq.data.shape
    kind = seq.kind.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<B", _VERSION))
        fh.write(struct.pack("<B", len(kind)))
        fh.write(kind)
        fh.write(struct.pack("<d", seq.frame_rate))
        fh.write(struct.pack("<II", frames, dims))
        fh.write(np.ascontiguousarray(seq.data, dtype="<f8").tobytes())


def load_feature_cache(path) -> FeatureSequence:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:16] != _CACHE_MAGIC:
        raise FormatError(f"{path}: bad feature cache magic (offset 0)")
    version = blob[16]
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported feature cache version {version}")
    klen = blob[17]
    pos = 18
    kind = blob[pos : pos + klen].decode("utf-8")
    pos += klen
    try:
        (frame_rate,) = struct.unpack_from("<d", blob, pos)
        frames, dims = struct.unpack_from("<II", blob, pos + 8)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated feature cache header (offset {pos})") from exc
    pos += 16
    end = pos + 8 * frames * dims
    if end > len(blob):
        raise FormatError(f"{path}: truncated feature payload (offset {pos})")
    data = np.frombuffer(blob[pos:end], dtype="<f8").reshape(frames, dims).copy()
    return FeatureSequence(data, kind, frame_rate)


def save_embedding_table(path, table: dict, width: int):
    for token, vec in table.items():
        if np.asarray(vec).shape != (width,):
            raise FormatError(
                f"embedding for {token!r} has shape {np.asarray(vec).shape}, want ({width},)"
            )
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", len(table), width))
        for token in sorted(table):
            enc = token.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(np.ascontiguousarray(table[token], dtype="<f8").tobytes())


def load_embedding_table(path) -> tuple:
    """Returns (token -> vector dict, width)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated embedding header (offset 0)")
    count, width = struct.unpack_from("<II", blob, 0)
    pos = 8
    table = {}
    for i in range(count):
        try:
            (tlen,) = struct.unpack_from("<H", blob, pos)
        except struct.error as exc:
            raise FormatError(f"{path}: truncated entry {i} (offset {pos})") from exc
        pos += 2
        token = blob[pos : pos + tlen].decode("utf-8")
        pos += tlen
        end = pos + 8 * width
        if end > len(blob):
            raise FormatError(f"{path}: truncated vector for {token!r} (offset {pos})")
        table[token] = np.frombuffer(blob[pos:end], dtype="<f8").copy()
        pos = end
    return table, width
