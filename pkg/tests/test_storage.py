import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from holstein_rnn import storage
from holstein_rnn.errors import (
    ChecksumError,
    FormatError,
    IntegrityError,
    StorageError,
    TruncationError,
    VersionMismatchError,
)


def _states(rng, n, L):
    rho = rng.normal(size=(n, L, L)) + 1j * rng.normal(size=(n, L, L))
    return rng.normal(size=(n, L)), rng.normal(size=(n, L)), rho


def test_crc64_xz_check_value():
    # standard check value of CRC-64/XZ
    assert storage.checksum(b"123456789") == 0x995DC9BBDF1939FA


def test_trajectory_header_layout(rng):
    Q, P, rho = _states(rng, 3, 4)
    blob = storage.encode_trajectory(Q, P, rho)
    assert blob[:8] == b"HOLSTEIN"
    assert struct.unpack_from("<IIQQ", blob, 8) == (1, 4, 3, 0)
    assert len(blob) == 32 + 3 * storage.state_floats(4) * 8 + 8
    # first payload value is Q[0, 0], then Im rho last before the CRC
    assert struct.unpack_from("<d", blob, 32)[0] == Q[0, 0]
    assert struct.unpack_from("<d", blob, len(blob) - 16)[0] == rho[-1, -1, -1].imag


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 4), st.integers(0, 2**31 - 1))
def test_trajectory_round_trip(L, n, n_mid, seed):
    rng = np.random.default_rng(seed)
    Q, P, rho = _states(rng, n, L)
    mid = _states(rng, n_mid, L) if n_mid else None
    Q2, P2, rho2, mid2 = storage.decode_trajectory(storage.encode_trajectory(Q, P, rho, mid))
    assert np.array_equal(Q, Q2) and np.array_equal(P, P2) and np.array_equal(rho, rho2)
    if mid is None:
        assert mid2 is None
    else:
        assert all(np.array_equal(a, b) for a, b in zip(mid, mid2))


def test_trajectory_errors(rng):
    Q, P, rho = _states(rng, 2, 4)
    blob = storage.encode_trajectory(Q, P, rho)
    with pytest.raises(TruncationError):
        storage.decode_trajectory(blob[:20])
    with pytest.raises(TruncationError):
        storage.decode_trajectory(blob[:-1])
    with pytest.raises(IntegrityError):
        storage.decode_trajectory(blob + b"\0")
    with pytest.raises(FormatError):
        storage.decode_trajectory(b"XOLSTEIN" + blob[8:])
    with pytest.raises(VersionMismatchError):
        storage.decode_trajectory(blob[:8] + struct.pack("<I", 2) + blob[12:])
    with pytest.raises(IntegrityError):
        storage.decode_trajectory(blob, expected_L=5)
    bad = bytearray(blob)
    bad[40] ^= 1
    with pytest.raises(ChecksumError):
        storage.decode_trajectory(bytes(bad))


def test_every_single_bit_flip_in_payload_is_detected(rng):
    Q, P, rho = _states(rng, 1, 2)
    blob = storage.encode_trajectory(Q, P, rho)
    for pos in range(32, len(blob) - 8, 7):
        bad = bytearray(blob)
        bad[pos] ^= 0x10
        with pytest.raises(StorageError):
            storage.decode_trajectory(bytes(bad))


def test_weights_round_trip_and_errors(rng):
    tensors = {"a.weight": rng.normal(size=(3, 2, 3, 3)).astype(np.float32), "a.bias": np.arange(3, dtype=np.float32)}
    meta = {"config": {"L": 16}, "scaling": {"r": 0.5}}
    blob = storage.encode_weights(tensors, meta)
    assert blob[:8] == b"PARCWGTS"
    back, meta2 = storage.decode_weights(blob)
    assert list(back) == list(tensors) and meta2 == meta
    assert all(np.array_equal(back[k], tensors[k]) and back[k].dtype == np.float32 for k in tensors)
    with pytest.raises(TruncationError):
        storage.decode_weights(blob[:10])
    with pytest.raises(TruncationError):
        storage.decode_weights(blob[:-3])
    with pytest.raises(IntegrityError):
        storage.decode_weights(blob + b"xx")
    with pytest.raises(FormatError):
        storage.decode_weights(b"HOLSTEIN" + blob[8:])
    with pytest.raises(VersionMismatchError):
        storage.decode_weights(blob[:8] + struct.pack("<I", 9) + blob[12:])
    bad = bytearray(blob)
    bad[-12] ^= 0xFF
    with pytest.raises(ChecksumError):
        storage.decode_weights(bytes(bad))
    bad = bytearray(blob)
    bad[24] = 0xFF  # inside the JSON metadata
    with pytest.raises(StorageError):
        storage.decode_weights(bytes(bad))


def test_atomic_write(tmp_path):
    p = tmp_path / "x.bin"
    storage.write_bytes_atomic(p, b"abc")
    storage.write_bytes_atomic(p, b"de")
    assert p.read_bytes() == b"de" and not list(tmp_path.glob("*.tmp"))
