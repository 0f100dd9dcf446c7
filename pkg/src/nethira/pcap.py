"""Classic PCAP reading and writing.

Only the classic format (magic 0xA1B2C3D4, either endianness) is supported;
pcapng is rejected. The writer exists so tests and the synthetic generator can
produce golden capture files without an external dependency.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

logger = logging.getLogger(__name__)

MAGIC = 0xA1B2C3D4
MAGIC_SWAPPED = 0xD4C3B2A1
MAGIC_PCAPNG = 0x0A0D0D0A
LINKTYPE_ETHERNET = 1

_GLOBAL_HEADER_LEN = 24
_RECORD_HEADER_LEN = 16


class PcapError(Exception):
    """Base class for capture-file errors."""


class UnsupportedFormat(PcapError):
    """File magic is pcapng or unknown."""


class CorruptHeader(PcapError):
    """File is shorter than the 24-byte global header."""


@dataclass(frozen=True)
class RawPacket:
    """One captured link-layer frame.

    capture_index is the 0-based position in the capture file and
    timestamp_us is microseconds since the epoch.
    """

    capture_index: int
    timestamp_us: int
    link_bytes: bytes

    def __post_init__(self):
        if not self.link_bytes:
            raise ValueError("link_bytes must be non-empty")


def read_pcap(path: str | Path) -> list[RawPacket]:
    """Read a classic PCAP file into RawPackets in capture order.

    A truncated trailing record is skipped with a warning. Raises
    UnsupportedFormat for pcapng or unknown magic and CorruptHeader when the
    file cannot hold the global header.
    """
    data = Path(path).read_bytes()
    if len(data) < _GLOBAL_HEADER_LEN:
        raise CorruptHeader(f"{path}: {len(data)} bytes is shorter than a pcap global header")

    (magic,) = struct.unpack("<I", data[:4])
    if magic == MAGIC:
        endian = "<"
    elif magic == MAGIC_SWAPPED:
        endian = ">"
    elif magic in (MAGIC_PCAPNG, struct.unpack("<I", struct.pack(">I", MAGIC_PCAPNG))[0]):
        raise UnsupportedFormat(f"{path}: pcapng is not supported, convert to classic pcap")
    else:
        raise UnsupportedFormat(f"{path}: unknown capture magic 0x{magic:08X}")

    linktype = struct.unpack(endian + "I", data[20:24])[0]
    if linktype != LINKTYPE_ETHERNET:
        logger.warning("%s: link type %d is not Ethernet; parsing may skip all packets", path, linktype)

    packets: list[RawPacket] = []
    offset = _GLOBAL_HEADER_LEN
    truncated = 0
    while offset < len(data):
        if offset + _RECORD_HEADER_LEN > len(data):
            truncated += 1
            break
        ts_sec, ts_usec, incl_len, _orig_len = struct.unpack(
            endian + "IIII", data[offset : offset + _RECORD_HEADER_LEN]
        )
        offset += _RECORD_HEADER_LEN
        if offset + incl_len > len(data) or incl_len == 0:
            truncated += 1
            break
        packets.append(
            RawPacket(
                capture_index=len(packets),
                timestamp_us=ts_sec * 1_000_000 + ts_usec,
                link_bytes=data[offset : offset + incl_len],
            )
        )
        offset += incl_len

    if truncated:
        logger.warning("%s: skipped %d truncated trailing record(s)", path, truncated)
    return packets


def write_pcap(path: str | Path, packets: Iterable[tuple[int, bytes] | RawPacket]) -> None:
    """Write frames as a little-endian classic PCAP (Ethernet link type).

    Accepts RawPackets or (timestamp_us, frame_bytes) pairs.
    """
    out = bytearray()
    out += struct.pack("<IHHiIII", MAGIC, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET)
    for pkt in packets:
        if isinstance(pkt, RawPacket):
            ts_us, frame = pkt.timestamp_us, pkt.link_bytes
        else:
            ts_us, frame = pkt
        out += struct.pack("<IIII", ts_us // 1_000_000, ts_us % 1_000_000, len(frame), len(frame))
        out += frame
    Path(path).write_bytes(bytes(out))
