"""The ``.cpxd`` container: header, bit-packed code indices, CRC32 trailer.

Layout (all header integers little-endian)::

    offset size  field
    0      4     magic b"CPXD"
    4      1     version (u8)
    5      4     sample_rate (u32)
    9      4     hop (u32)
    13     4     fft_size (u32)
    17     1     n_stages_real (u8)
    18     1     n_stages_imag (u8)
    19     1     bits_per_index (u8)
    20     4     n_frames (u32)
    24     8     n_samples (u64)
    32     ...   n_frames payloads of ceil(n_stages * bits / 8) bytes each
    end-4  4     CRC32 of the payload bytes (u32)

Each frame payload holds the real-branch indices then the imaginary-branch
indices, each written MSB first, zero-padded to a whole byte.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = b"CPXD"
VERSION = 1
_HEADER = struct.Struct("<4sBIIIBBBIQ")
HEADER_SIZE = _HEADER.size
CRC_SIZE = 4


class BitstreamError(ValueError):
    """Base class for malformed ``.cpxd`` data."""


class FormatError(BitstreamError):
    pass


class VersionError(BitstreamError):
    pass


class TruncatedError(BitstreamError):
    pass


class ChecksumError(BitstreamError):
    pass


class IndexOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class BitstreamHeader:
    sample_rate: int = 48000
    hop: int = 320
    fft_size: int = 510
    n_stages_real: int = 8
    n_stages_imag: int = 8
    bits_per_index: int = 10
    n_frames: int = 0
    n_samples: int = 0
    version: int = VERSION

    def __post_init__(self):
        if not 1 <= self.bits_per_index <= 16:
            raise ValueError("bits_per_index must be in [1, 16]")
        if self.n_stages_real < 0 or self.n_stages_imag < 0 or self.n_stages == 0:
            raise ValueError("need at least one stage")

    @property
    def n_stages(self) -> int:
        return self.n_stages_real + self.n_stages_imag

    @property
    def frame_bits(self) -> int:
        return self.n_stages * self.bits_per_index

    @property
    def frame_bytes(self) -> int:
        return -(-self.frame_bits // 8)

    @property
    def payload_bytes(self) -> int:
        return self.n_frames * self.frame_bytes

    def to_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, self.version, self.sample_rate, self.hop, self.fft_size,
                            self.n_stages_real, self.n_stages_imag, self.bits_per_index,
                            self.n_frames, self.n_samples)

    @classmethod
    def from_bytes(cls, data: bytes) -> "BitstreamHeader":
        if len(data) < HEADER_SIZE:
            raise TruncatedError(f"header needs {HEADER_SIZE} bytes, got {len(data)}")
        magic, version, sr, hop, fft, nr, ni, bits, nf, ns = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise VersionError(f"unsupported bitstream version {version} (expected {VERSION})")
        return cls(sr, hop, fft, nr, ni, bits, nf, ns, version)


def pack_indices(indices: np.ndarray, bits: int) -> bytes:
    """Bit-pack a ``(n_frames, n_stages)`` array, one byte-aligned record per frame."""
    idx = np.asarray(indices)
    if idx.ndim != 2:
        raise ValueError("indices must be (n_frames, n_stages)")
    if idx.size and (idx.min() < 0 or idx.max() >= 1 << bits):
        raise IndexOverflowError(f"index out of range for {bits}-bit packing: "
                                 f"[{int(idx.min())}, {int(idx.max())}]")
    n_frames, n_stages = idx.shape
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint32)
    bitmat = ((idx.astype(np.uint32)[..., None] >> shifts) & 1).astype(np.uint8)
    bitmat = bitmat.reshape(n_frames, n_stages * bits)
    pad = (-bitmat.shape[1]) % 8
    if pad:
        bitmat = np.pad(bitmat, ((0, 0), (0, pad)))
    return np.packbits(bitmat, axis=1, bitorder="big").tobytes()


def unpack_indices(payload: bytes, n_frames: int, n_stages: int, bits: int) -> np.ndarray:
    frame_bytes = -(-n_stages * bits // 8)
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(n_frames, frame_bytes)
    bitmat = np.unpackbits(raw, axis=1, bitorder="big")[:, : n_stages * bits]
    bitmat = bitmat.reshape(n_frames, n_stages, bits).astype(np.int64)
    weights = 1 << np.arange(bits - 1, -1, -1, dtype=np.int64)
    return bitmat @ weights


def pack(indices, header: BitstreamHeader) -> bytes:
    """Serialize ``(n_frames, n_stages_real + n_stages_imag)`` indices."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 2 or idx.shape[1] != header.n_stages:
        raise ValueError(f"expected (n_frames, {header.n_stages}) indices, got {idx.shape}")
    if idx.shape[0] != header.n_frames:
        header = BitstreamHeader(**{**header.__dict__, "n_frames": idx.shape[0]})
    payload = pack_indices(idx, header.bits_per_index)
    return header.to_bytes() + payload + struct.pack("<I", zlib.crc32(payload))


def unpack(data: bytes) -> tuple[BitstreamHeader, np.ndarray]:
    header = BitstreamHeader.from_bytes(data)
    expected = HEADER_SIZE + header.payload_bytes + CRC_SIZE
    if len(data) < expected:
        raise TruncatedError(f"truncated bitstream: expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} unexpected trailing bytes")
    payload = data[HEADER_SIZE:HEADER_SIZE + header.payload_bytes]
    (crc,) = struct.unpack_from("<I", data, HEADER_SIZE + header.payload_bytes)
    if crc != zlib.crc32(payload):
        raise ChecksumError("payload CRC32 mismatch")
    return header, unpack_indices(payload, header.n_frames, header.n_stages, header.bits_per_index)


def write_file(path, indices, header: BitstreamHeader) -> None:
    with open(path, "wb") as fh:
        fh.write(pack(indices, header))


def read_file(path) -> tuple[BitstreamHeader, np.ndarray]:
    with open(path, "rb") as fh:
        return unpack(fh.read())


def bitrate(frame_rate: float, n_codebooks: int, bits: int) -> float:
    """Bits per second of a fixed-rate code stream."""
    if frame_rate <= 0 or n_codebooks <= 0 or bits <= 0:
        raise ValueError("arguments must be positive")
    return frame_rate * n_codebooks * bits


def compression_ratio(sample_rate: float, frame_rate: float, code_dim: int) -> float:
    """Input samples per second over code values per second."""
    if sample_rate <= 0 or frame_rate <= 0 or code_dim <= 0:
        raise ValueError("arguments must be positive")
    return sample_rate / (frame_rate * code_dim)
