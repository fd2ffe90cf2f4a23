"""Token stream wire format (.aqc).

Layout (all integers little-endian):

    magic        4 bytes  b"AQC1"
    version      u8       1
    sample_rate  u32      source rate the tokens describe
    frame_us     u32      token frame length in microseconds (60000)
    sem_bits     u8       bits per semantic index = ceil(log2 K_sem)
    num_acoustic u8       acoustic stages per frame, 0..3
    ac_bits      u8       bits per acoustic index (13)
    num_frames   u32      token frame count

followed by a contiguous MSB-first bit payload: per frame the semantic
index then each acoustic combined index.  The final byte is padded with
zero bits; nonzero padding is rejected on read.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

from .agrvq import MAX_STAGES, STAGE_INDEX_SPAN
from .errors import DataError, FormatError

MAGIC = b"AQC1"
VERSION = 1
FRAME_MICROS = 60000
ACOUSTIC_INDEX_BITS = 13  # ceil(log2 8100)
_HEADER_STRUCT = struct.Struct("<4sBIIBBBI")
HEADER_BYTES = _HEADER_STRUCT.size


@dataclass(frozen=True)
class TokenFrame:
    """One 60 ms frame: a semantic index plus 0-3 acoustic combined indices."""

    semantic: int
    acoustic: tuple = ()

    def __post_init__(self):
        if not isinstance(self.semantic, (int,)) or isinstance(self.semantic, bool):
            object.__setattr__(self, "semantic", int(self.semantic))
        if self.semantic < 0:
            raise DataError(f"semantic index must be non-negative, got {self.semantic}")
        acoustic = tuple(int(a) for a in self.acoustic)
        if len(acoustic) > MAX_STAGES:
            raise DataError(f"at most {MAX_STAGES} acoustic indices per frame, got {len(acoustic)}")
        for a in acoustic:
            if not 0 <= a < STAGE_INDEX_SPAN:
                raise DataError(f"acoustic index out of range [0, {STAGE_INDEX_SPAN}): {a}")
        object.__setattr__(self, "acoustic", acoustic)


@dataclass(frozen=True)
class BitstreamHeader:
    sample_rate: int
    sem_bits: int
    num_acoustic: int
    num_frames: int
    frame_micros: int = FRAME_MICROS
    version: int = VERSION
    ac_bits: int = ACOUSTIC_INDEX_BITS

    @property
    def bits_per_frame(self) -> int:
        return self.sem_bits + self.num_acoustic * self.ac_bits

    @property
    def frame_rate(self) -> float:
        return 1e6 / self.frame_micros

    @property
    def duration(self) -> float:
        return self.num_frames * self.frame_micros / 1e6


def semantic_bits(k_sem: int) -> int:
    """Bits needed for a semantic index: ceil(log2 K)."""
    if k_sem < 2:
        raise DataError(f"semantic codebook size must be >= 2, got {k_sem}")
    return max(1, (int(k_sem) - 1).bit_length())


def bitrate_bps(header: BitstreamHeader) -> float:
    """Nominal payload bitrate in bits/s: bits-per-frame times frame rate."""
    return header.bits_per_frame * header.frame_rate


def bitrate_kbps(header: BitstreamHeader) -> float:
    """Bitrate in kbit/s rounded to two decimals (0.43 / 0.65 / 0.87 at
    13 semantic bits and 1/2/3 acoustic stages)."""
    return round(bitrate_bps(header) / 1000.0, 2)


def pack(frames: Sequence[TokenFrame], k_sem: int, sample_rate: int) -> bytes:
    """Serialize token frames to the .aqc wire format.

    Every frame must carry the same number of acoustic indices, and each
    semantic index must fit in ceil(log2 k_sem) bits.
    """
    sem_bits = semantic_bits(k_sem)
    num_acoustic = len(frames[0].acoustic) if frames else 0
    if sample_rate <= 0 or sample_rate >= 1 << 32:
        raise DataError(f"sample_rate out of range: {sample_rate}")
    if len(frames) >= 1 << 32:
        raise DataError("too many frames for a u32 count")
    header = _HEADER_STRUCT.pack(MAGIC, VERSION, sample_rate, FRAME_MICROS,
                                 sem_bits, num_acoustic, ACOUSTIC_INDEX_BITS, len(frames))
    acc = 0
    nbits = 0
    out = bytearray(header)
    sem_limit = 1 << sem_bits
    for i, frame in enumerate(frames):
        if len(frame.acoustic) != num_acoustic:
            raise DataError(
                f"frame {i} has {len(frame.acoustic)} acoustic indices, "
                f"stream declared {num_acoustic}"
            )
        if frame.semantic >= sem_limit:
            raise DataError(
                f"frame {i} semantic index {frame.semantic} does not fit in "
                f"{sem_bits} bits (k_sem={k_sem})"
            )
        acc = (acc << sem_bits) | frame.semantic
        nbits += sem_bits
        for a in frame.acoustic:
            acc = (acc << ACOUSTIC_INDEX_BITS) | a
            nbits += ACOUSTIC_INDEX_BITS
        while nbits >= 8:
            nbits -= 8
            out.append((acc >> nbits) & 0xFF)
            acc &= (1 << nbits) - 1
    if nbits:
        out.append((acc << (8 - nbits)) & 0xFF)
    return bytes(out)


def unpack(blob: bytes) -> tuple[BitstreamHeader, list]:
    """Parse a .aqc blob back into (header, token frames).

    Rejects bad magic/version, truncated or oversized payloads, nonzero
    padding bits and out-of-range acoustic indices with FormatError.
    """
    if len(blob) < HEADER_BYTES:
        raise FormatError(f"stream truncated: {len(blob)} bytes, header needs {HEADER_BYTES}")
    magic, version, sample_rate, frame_us, sem_bits, num_ac, ac_bits, num_frames = \
        _HEADER_STRUCT.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported stream version {version}, expected {VERSION}")
    if frame_us != FRAME_MICROS:
        raise FormatError(f"unsupported frame length {frame_us} us, expected {FRAME_MICROS}")
    if ac_bits != ACOUSTIC_INDEX_BITS:
        raise FormatError(f"unsupported acoustic width {ac_bits} bits, expected {ACOUSTIC_INDEX_BITS}")
    if not 0 < sem_bits <= 31:
        raise FormatError(f"semantic width {sem_bits} bits out of range [1, 31]")
    if num_ac > MAX_STAGES:
        raise FormatError(f"stream declares {num_ac} acoustic stages, maximum is {MAX_STAGES}")
    bits_per_frame = sem_bits + num_ac * ac_bits
    total_bits = num_frames * bits_per_frame
    payload_bytes = math.ceil(total_bits / 8)
    if len(blob) != HEADER_BYTES + payload_bytes:
        raise FormatError(
            f"payload is {len(blob) - HEADER_BYTES} bytes, expected {payload_bytes} "
            f"for {num_frames} frames of {bits_per_frame} bits"
        )
    payload = blob[HEADER_BYTES:]
    pad_bits = payload_bytes * 8 - total_bits
    if pad_bits and payload and payload[-1] & ((1 << pad_bits) - 1):
        raise FormatError(f"nonzero padding in final byte (0x{payload[-1]:02x})")

    def read_bits(bit_pos: int, width: int) -> int:
        value = 0
        for off in range(width):
            pos = bit_pos + off
            value = (value << 1) | ((payload[pos >> 3] >> (7 - (pos & 7))) & 1)
        return value

    frames = []
    pos = 0
    for _ in range(num_frames):
        sem = read_bits(pos, sem_bits)
        pos += sem_bits
        acoustic = []
        for _ in range(num_ac):
            a = read_bits(pos, ac_bits)
            pos += ac_bits
            if a >= STAGE_INDEX_SPAN:
                raise FormatError(
                    f"acoustic index {a} out of range [0, {STAGE_INDEX_SPAN})"
                )
            acoustic.append(a)
        frames.append(TokenFrame(semantic=sem, acoustic=tuple(acoustic)))
    header = BitstreamHeader(sample_rate=sample_rate, sem_bits=sem_bits,
                             num_acoustic=num_ac, num_frames=num_frames,
                             frame_micros=frame_us, version=version, ac_bits=ac_bits)
    return header, frames
