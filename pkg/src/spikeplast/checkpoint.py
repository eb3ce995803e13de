"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes  b"SPKPLST\\x00"
    version    u32
    seed       i64
    spec hash  32 bytes (sha256 of the canonical spec JSON)
    spec       u32 length + UTF-8 JSON
    tensors    u32 count, then per tensor:
                 u16 name length + name, u8 dtype code, u8 ndim,
                 u64 per dimension, raw little-endian data
    crc32      u32 over every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError
from .pipeline import Network, NetworkSpec, VotingTable, build_layers

MAGIC = b"SPKPLST\x00"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


def _tensor_bytes(name: str, arr: np.ndarray) -> bytes:
    kind = np.dtype("<f8") if arr.dtype.kind == "f" else np.dtype("<i8")
    arr = np.ascontiguousarray(arr, dtype=kind)
    raw = name.encode()
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", _CODES[kind], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def dumps(net: Network) -> bytes:
    spec_json = json.dumps(net.spec.to_dict(), sort_keys=True).encode()
    tensors = {"conv.weights": net.conv.weights, "fc.weights": net.fc.weights,
               "fc.theta_plus": net.fc.theta_plus}
    if net.votes is not None:
        tensors["votes.assignment"] = net.votes.assignment
        tensors["votes.response"] = net.votes.response_matrix
    body = bytearray(MAGIC)
    body += struct.pack("<Iq", VERSION, int(net.seed))
    body += bytes.fromhex(net.spec.hash())
    body += struct.pack("<I", len(spec_json)) + spec_json
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        body += _tensor_bytes(name, np.asarray(arr))
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    return bytes(body)


def save(net: Network, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(net))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("bad header: checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> Network:
    if len(buf) < len(MAGIC) + 4 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad header: not a spikeplast checkpoint")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("bad header: checksum mismatch")
    r = _Reader(body)
    r.take(len(MAGIC))
    version, seed = r.unpack("<Iq")
    if version != VERSION:
        raise CheckpointError(f"bad header: unsupported version {version}")
    spec_hash = r.take(32).hex()
    (n_json,) = r.unpack("<I")
    try:
        spec = NetworkSpec.from_dict(json.loads(r.take(n_json).decode()))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"bad header: unreadable network spec ({exc})") from exc
    if spec.hash() != spec_hash:
        raise CheckpointError("bad header: spec hash does not match stored spec")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"bad header: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q")
        dtype = _DTYPES[code]
        size = int(np.prod(shape)) * dtype.itemsize
        tensors[name] = np.frombuffer(r.take(size), dtype=dtype).reshape(shape).copy()
    if r.pos != len(body):
        raise CheckpointError("bad header: trailing bytes")
    return _assemble(spec, int(seed), tensors)


def _assemble(spec: NetworkSpec, seed: int, tensors: dict) -> Network:
    try:
        conv_w, fc_w, theta = (tensors[k] for k in ("conv.weights", "fc.weights", "fc.theta_plus"))
    except KeyError as exc:
        raise CheckpointError(f"bad header: missing tensor {exc}") from exc
    conv, fc = build_layers(spec, np.random.default_rng(seed))
    if conv_w.shape != conv.weights.shape or fc_w.shape != fc.weights.shape:
        raise CheckpointError("bad header: tensor shapes disagree with the stored spec")
    conv.weights = conv_w
    fc.weights = fc_w
    fc.theta_plus = theta
    net = Network(spec, conv, fc, seed)
    if "votes.assignment" in tensors:
        net.votes = VotingTable(tensors["votes.assignment"], tensors["votes.response"])
    return net


def load(path) -> Network:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint {path} does not exist") from exc
    return loads(buf)

