"""Versioned binary container shared by checkpoints, feature datasets and crafted samples.

Layout (all integers little-endian):

    b"ADVD"                      magic
    u32                          format version
    u64 + bytes                  metadata, UTF-8 JSON text
    u32                          tensor count
    per tensor:
        u32 + bytes              name (UTF-8)
        u32                      rank
        u64 * rank               dims
        f64 * prod(dims)         row-major data
    u32                          CRC-32 of every preceding byte
"""
import json
import logging
import math
import pathlib
import struct
import zlib

import numpy as np
import torch

from advdetect.exceptions import ChecksumError, DataFormatError, VersionError

logger = logging.getLogger(__name__)

MAGIC = b"ADVD"
FORMAT_VERSION = 1


def encode_container(metadata: dict, tensors: dict[str, torch.Tensor]) -> bytes:
    meta_bytes = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<Q", len(meta_bytes)),
        meta_bytes,
        struct.pack("<I", len(tensors)),
    ]
    for name, tensor in tensors.items():
        name_bytes = name.encode("utf-8")
        array = tensor.detach().cpu().to(torch.float64).contiguous().numpy()
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<I", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(array.astype("<f8", copy=False).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ChecksumError("Container truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_container(data: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    if len(data) < len(MAGIC) + 8:
        raise ChecksumError("Container truncated")
    if data[:4] != MAGIC:
        raise DataFormatError(f"Bad container magic {data[:4]!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("Container checksum mismatch")

    reader = _Reader(body)
    reader.take(4)
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionError(f"Unsupported container version {version} (expected {FORMAT_VERSION})")
    (meta_len,) = reader.unpack("<Q")
    metadata = json.loads(reader.take(meta_len).decode("utf-8"))
    (count,) = reader.unpack("<I")

    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<I")
        dims = reader.unpack(f"<{rank}Q") if rank else ()
        size = math.prod(dims)
        array = np.frombuffer(reader.take(8 * size), dtype="<f8").reshape(dims)
        tensors[name] = torch.from_numpy(array.astype(np.float64))
    if reader.pos != len(body):
        raise DataFormatError("Trailing bytes after last tensor")
    return metadata, tensors


def write_container(path: str | pathlib.Path, metadata: dict, tensors: dict[str, torch.Tensor]) -> None:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # write-then-rename
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        payload = encode_container(metadata, tensors)
        tmp.write_bytes(payload)
        tmp.replace(path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    logger.info("Wrote %s (%d tensors, %d bytes)", path, len(tensors), len(payload))


def read_container(path: str | pathlib.Path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = pathlib.Path(path)
    if not path.exists():
        raise DataFormatError(f"Artifact not found: {path}")
    return decode_container(path.read_bytes())
