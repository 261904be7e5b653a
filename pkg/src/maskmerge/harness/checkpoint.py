"""Binary checkpoint container for flat parameter vectors.

Layout, little-endian throughout:

    bytes 0..3    magic "CSFW"
    bytes 4..7    format version, u32 (currently 1)
    bytes 8..11   manifest length in bytes, u32
    ...           manifest, UTF-8 text (see below)
    ...           payload: float64 values
    last 4 bytes  CRC32 of the payload, u32

The manifest's first line records the model-spec fingerprint; each further
line describes one layer block as tab-separated
``name, dims (comma-joined), byte offset into the payload, element count``.
Offsets must be contiguous. The whole round trip is bit-exact.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import CorruptCheckpointError
from ..nn import LayoutEntry, ParamVector

MAGIC = b"CSFW"
VERSION = 1


def _build_manifest(pv: ParamVector) -> bytes:
    lines = [f"spec\t{pv.spec_hash}"]
    for e in pv.layout:
        dims = ",".join(str(s) for s in e.shape)
        lines.append(f"{e.name}\t{dims}\t{e.offset * 8}\t{e.size}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_manifest(raw: bytes) -> tuple[str, tuple[LayoutEntry, ...]]:
    try:
        lines = raw.decode("utf-8").strip("\n").split("\n")
    except UnicodeDecodeError as e:
        raise CorruptCheckpointError("manifest is not valid UTF-8") from e
    if not lines or not lines[0].startswith("spec\t"):
        raise CorruptCheckpointError("manifest is missing the spec fingerprint line")
    spec_hash = lines[0].split("\t", 1)[1]
    entries = []
    expected_offset = 0
    for line in lines[1:]:
        parts = line.split("\t")
        if len(parts) != 4:
            raise CorruptCheckpointError(f"malformed manifest line: {line!r}")
        name, dims, byte_offset, count = parts
        shape = tuple(int(d) for d in dims.split(","))
        offset = int(byte_offset) // 8
        size = int(count)
        if int(byte_offset) != expected_offset * 8 or size != int(np.prod(shape)):
            raise CorruptCheckpointError(f"manifest offsets are not contiguous at '{name}'")
        entries.append(LayoutEntry(name, shape, offset, size))
        expected_offset += size
    return spec_hash, tuple(entries)


def save_checkpoint(pv: ParamVector, path: str | Path) -> None:
    manifest = _build_manifest(pv)
    payload = pv.data.astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path: str | Path) -> ParamVector:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic, not a checkpoint file")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported version {version}")
    (manifest_len,) = struct.unpack("<I", raw[8:12])
    manifest_end = 12 + manifest_len
    if len(raw) < manifest_end + 4:
        raise CorruptCheckpointError(f"{path}: truncated file")
    spec_hash, layout = _parse_manifest(raw[12:manifest_end])
    payload = raw[manifest_end:-4]
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != stored_crc:
        raise CorruptCheckpointError(f"{path}: payload CRC mismatch")
    expected = sum(e.size for e in layout) * 8
    if len(payload) != expected:
        raise CorruptCheckpointError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return ParamVector(data, layout, spec_hash)


def checkpoint_size(pv: ParamVector) -> int:
    """Exact on-disk size in bytes for a given vector."""
    return 12 + len(_build_manifest(pv)) + pv.dim * 8 + 4
