"""Model checkpoint wire format.

Layout: 8-byte magic "MZLCKPT1", little-endian uint32 manifest length, UTF-8
JSON manifest, then every parameter tensor as little-endian float32 in layer
order. The manifest records the network spec, embedding dim, epoch, decision
threshold, optimizer scalars, and a CRC32 of the blob. Adam moment tensors
are deliberately not stored; resuming starts them at zero.
"""

import json
import os
import struct
import tempfile
import zlib

import numpy as np

from ..errors import (ChecksumError, CheckpointVersionError, FormatError,
                      TruncatedCheckpoint)
from .network import NetworkSpec, build_network
from .optim import OptimizerState

MAGIC = b"MZLCKPT1"
FORMAT_VERSION = 1


def save_checkpoint(path, net, opt, dim, epoch, threshold, extra=None):
    blob = b"".join(
        np.ascontiguousarray(p, dtype="<f4").tobytes() for p in net.parameters())
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": net.spec.to_dict(),
        "dim": int(dim),
        "epoch": int(epoch),
        "threshold": float(threshold),
        "optimizer": opt.scalars(),
        "crc32": zlib.crc32(blob) & 0xFFFFFFFF,
    }
    if extra:
        manifest["extra"] = dict(extra)
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = MAGIC + struct.pack("<I", len(mbytes)) + mbytes + blob
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path):
    """Read a checkpoint; returns (net, opt, meta).

    meta carries dim, epoch, threshold, and anything stored under extra.
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(MAGIC):
        raise TruncatedCheckpoint(f"{path}: {len(data)} bytes is too short")
    head = data[:len(MAGIC)]
    if head != MAGIC:
        if head[:7] == MAGIC[:7]:
            raise CheckpointVersionError(
                f"{path}: unsupported format version {head[7:8]!r}")
        raise FormatError(f"{path}: not a checkpoint file")
    if len(data) < len(MAGIC) + 4:
        raise TruncatedCheckpoint(f"{path}: missing manifest length")
    (mlen,) = struct.unpack_from("<I", data, len(MAGIC))
    mstart = len(MAGIC) + 4
    if len(data) < mstart + mlen:
        raise TruncatedCheckpoint(f"{path}: manifest cut short")
    try:
        manifest = json.loads(data[mstart:mstart + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad manifest: {e}") from e
    for key in ("spec", "dim", "epoch", "threshold", "crc32"):
        if key not in manifest:
            raise FormatError(f"{path}: manifest missing {key!r}")
    spec = NetworkSpec.from_dict(manifest["spec"])
    net = build_network(spec, dtype=np.float32)
    params = net.parameters()
    expected = sum(p.size for p in params) * 4
    blob = data[mstart + mlen:]
    if len(blob) < expected:
        raise TruncatedCheckpoint(
            f"{path}: weight blob {len(blob)} bytes, expected {expected}")
    if len(blob) > expected:
        raise FormatError(
            f"{path}: {len(blob) - expected} trailing bytes after weights")
    if (zlib.crc32(blob) & 0xFFFFFFFF) != manifest["crc32"]:
        raise ChecksumError(f"{path}: weight checksum mismatch")
    offset = 0
    values = []
    for p in params:
        n = p.size
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        values.append(arr.reshape(p.shape).astype(np.float32))
        offset += n * 4
    net.set_parameters(values)
    if "optimizer" in manifest:
        opt = OptimizerState.from_scalars(manifest["optimizer"])
    else:
        opt = OptimizerState()
    meta = {
        "dim": int(manifest["dim"]),
        "epoch": int(manifest["epoch"]),
        "threshold": float(manifest["threshold"]),
    }
    meta.update(manifest.get("extra", {}))
    return net, opt, meta
