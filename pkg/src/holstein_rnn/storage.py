"""Binary containers for trajectories and network weights.

Trajectory blob (little endian)::

    magic  b"HOLSTEIN"      8 bytes
    version                u32
    L                      u32
    n_snapshots            u64
    n_midpoints            u64
    payload                float64, per state [Q(L), P(L), Re rho(L*L), Im rho(L*L)],
                           all snapshots, then all midpoints
    crc                    u64  CRC-64/XZ of everything above

Weights blob::

    magic  b"PARCWGTS"      8 bytes
    version                u32
    n_tensors              u32
    meta_len               u64
    meta                   UTF-8 JSON: config, scaling coefficients, tensor directory
    payload                float32 tensors in directory order
    crc                    u64
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
from fastcrc import crc64

from .errors import ChecksumError, FormatError, IntegrityError, TruncationError, VersionMismatchError

TRAJ_MAGIC = b"HOLSTEIN"
WEIGHTS_MAGIC = b"PARCWGTS"
FORMAT_VERSION = 1
_TRAJ_HEADER = struct.Struct("<8sIIQQ")
_WEIGHTS_HEADER = struct.Struct("<8sIIQ")
_CRC = struct.Struct("<Q")


def checksum(data: bytes) -> int:
    return crc64.xz(bytes(data))


def state_floats(L: int) -> int:
    return 2 * L + 2 * L * L


def _pack_states(Q, P, rho):
    n = Q.shape[0]
    out = np.empty((n, state_floats(Q.shape[1])), dtype="<f8")
    L = Q.shape[1]
    out[:, :L] = Q
    out[:, L : 2 * L] = P
    out[:, 2 * L : 2 * L + L * L] = rho.real.reshape(n, L * L)
    out[:, 2 * L + L * L :] = rho.imag.reshape(n, L * L)
    return out


def _unpack_states(block, L):
    n = block.shape[0]
    Q = np.array(block[:, :L])
    P = np.array(block[:, L : 2 * L])
    rho = block[:, 2 * L : 2 * L + L * L].reshape(n, L, L) + 1j * block[:, 2 * L + L * L :].reshape(n, L, L)
    return Q, P, rho


def encode_trajectory(Q, P, rho, mid=None) -> bytes:
    L = Q.shape[1]
    n_mid = 0 if mid is None else mid[0].shape[0]
    header = _TRAJ_HEADER.pack(TRAJ_MAGIC, FORMAT_VERSION, L, Q.shape[0], n_mid)
    parts = [header, _pack_states(Q, P, rho).tobytes()]
    if mid is not None:
        parts.append(_pack_states(*mid).tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(checksum(body))


def decode_trajectory(buf: bytes, expected_L=None, name="<blob>"):
    """Inverse of :func:`encode_trajectory`; returns (Q, P, rho, mid or None)."""
    if len(buf) < _TRAJ_HEADER.size:
        raise TruncationError(f"{name}: {len(buf)} bytes is shorter than the header")
    magic, version, L, n_snap, n_mid = _TRAJ_HEADER.unpack_from(buf)
    if magic != TRAJ_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{name}: format version {version}, expected {FORMAT_VERSION}")
    if expected_L is not None and L != expected_L:
        raise IntegrityError(f"{name}: header L={L} but dataset L={expected_L}")
    payload_len = (n_snap + n_mid) * state_floats(L) * 8
    expected = _TRAJ_HEADER.size + payload_len + _CRC.size
    if len(buf) < expected:
        raise TruncationError(f"{name}: {len(buf)} bytes, header implies {expected}")
    if len(buf) > expected:
        raise IntegrityError(f"{name}: {len(buf) - expected} trailing bytes beyond the declared payload")
    body = buf[: expected - _CRC.size]
    (stored,) = _CRC.unpack_from(buf, expected - _CRC.size)
    if checksum(body) != stored:
        raise ChecksumError(f"{name}: CRC-64 mismatch")
    block = np.frombuffer(body, dtype="<f8", offset=_TRAJ_HEADER.size).reshape(n_snap + n_mid, state_floats(L))
    Q, P, rho = _unpack_states(block[:n_snap], L)
    mid = _unpack_states(block[n_snap:], L) if n_mid else None
    return Q, P, rho, mid


def write_bytes_atomic(path: Path, data: bytes):
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def encode_weights(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    directory = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    meta = dict(meta, tensors=directory)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    header = _WEIGHTS_HEADER.pack(WEIGHTS_MAGIC, FORMAT_VERSION, len(tensors), len(meta_bytes))
    payload = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in tensors.values())
    body = header + meta_bytes + payload
    return body + _CRC.pack(checksum(body))


def decode_weights(buf: bytes, name="<weights>"):
    if len(buf) < _WEIGHTS_HEADER.size:
        raise TruncationError(f"{name}: shorter than the header")
    magic, version, n_tensors, meta_len = _WEIGHTS_HEADER.unpack_from(buf)
    if magic != WEIGHTS_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{name}: format version {version}, expected {FORMAT_VERSION}")
    start = _WEIGHTS_HEADER.size
    if len(buf) < start + meta_len:
        raise TruncationError(f"{name}: metadata truncated")
    try:
        meta = json.loads(buf[start : start + meta_len].decode())
        directory = meta.pop("tensors")
    except (UnicodeDecodeError, ValueError, KeyError, AttributeError) as exc:
        raise FormatError(f"{name}: unreadable metadata ({exc})") from exc
    if len(directory) != n_tensors:
        raise IntegrityError(f"{name}: header lists {n_tensors} tensors, directory has {len(directory)}")
    sizes = [int(np.prod(d["shape"], dtype=np.int64)) for d in directory]
    expected = start + meta_len + 4 * sum(sizes) + _CRC.size
    if len(buf) < expected:
        raise TruncationError(f"{name}: {len(buf)} bytes, expected {expected}")
    if len(buf) > expected:
        raise IntegrityError(f"{name}: trailing bytes")
    body = buf[: expected - _CRC.size]
    (stored,) = _CRC.unpack_from(buf, expected - _CRC.size)
    if checksum(body) != stored:
        raise ChecksumError(f"{name}: CRC-64 mismatch")
    offset = start + meta_len
    tensors = {}
    for d, n in zip(directory, sizes):
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=offset).reshape(d["shape"])
        tensors[d["name"]] = arr.astype(np.float32)
        offset += 4 * n
    return tensors, meta
