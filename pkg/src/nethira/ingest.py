"""Flow segmentation, anonymization, and normalization of captured packets.

Packets are grouped into flows by five-tuple (bidirectional sessions by
default), identifying fields (MAC, IP, port) are zeroed, and each flow is
normalized to a fixed shape of max_packets frames of packet_len bytes each.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dataclassfield
from typing import Literal, Sequence

import numpy as np

from .pcap import RawPacket

logger = logging.getLogger(__name__)

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_IPV6 = 0x86DD
ETHERTYPE_VLAN = 0x8100
IPPROTO_TCP = 6
IPPROTO_UDP = 17

DEFAULT_MAX_PACKETS = 5
DEFAULT_PACKET_LEN = 128


class EmptyFlow(Exception):
    """normalize_flow was given no packets."""


@dataclass(frozen=True, order=True)
class FlowKey:
    """Canonical five-tuple. In bidirectional mode the lexicographically
    smaller (ip, port) endpoint is stored first so both directions collide."""

    src_ip: bytes
    src_port: int
    dst_ip: bytes
    dst_port: int
    transport: Literal["tcp", "udp"]


@dataclass(frozen=True)
class NormalizedPacket:
    """Fixed-length packet body; original_length is the pre-truncation size."""

    data: bytes
    original_length: int


@dataclass
class FlowRecord:
    """A normalized flow: exactly max_packets frames of packet_len bytes.

    Frames past real_packet_count are all-zero padding. label is a class id
    or None for unlabeled data.
    """

    key: FlowKey | None
    packets: list[NormalizedPacket]
    real_packet_count: int
    label: int | None = None
    # flatten() cache; packets are never mutated after construction
    _flat: np.ndarray | None = dataclassfield(default=None, repr=False, compare=False)

    @property
    def max_packets(self) -> int:
        return len(self.packets)

    @property
    def packet_len(self) -> int:
        return len(self.packets[0].data)


@dataclass
class FlowTable:
    """Result of segmentation: flows in first-seen order plus a skip counter."""

    flows: dict[FlowKey, list[RawPacket]] = dataclassfield(default_factory=dict)
    skipped: int = 0


@dataclass(frozen=True)
class _ParsedHeaders:
    ip_offset: int
    ip_version: int
    src_ip: bytes
    dst_ip: bytes
    transport_offset: int
    transport: str
    src_port: int
    dst_port: int


def _ethertype_and_ip_offset(frame: bytes) -> tuple[int, int] | None:
    """Ethertype and start of the network layer, skipping one 802.1Q tag."""
    if len(frame) < 14:
        return None
    ethertype = int.from_bytes(frame[12:14], "big")
    offset = 14
    if ethertype == ETHERTYPE_VLAN:
        if len(frame) < 18:
            return None
        ethertype = int.from_bytes(frame[16:18], "big")
        offset = 18
    return ethertype, offset


def _parse_headers(frame: bytes) -> _ParsedHeaders | None:
    """Parse up to the transport layer; None when the packet is not TCP/UDP
    over IPv4/IPv6 or is too short."""
    located = _ethertype_and_ip_offset(frame)
    if located is None:
        return None
    ethertype, ip_off = located

    if ethertype == ETHERTYPE_IPV4:
        if len(frame) < ip_off + 20 or frame[ip_off] >> 4 != 4:
            return None
        ihl = (frame[ip_off] & 0x0F) * 4
        if ihl < 20 or len(frame) < ip_off + ihl:
            return None
        proto = frame[ip_off + 9]
        src_ip = frame[ip_off + 12 : ip_off + 16]
        dst_ip = frame[ip_off + 16 : ip_off + 20]
        tr_off = ip_off + ihl
    elif ethertype == ETHERTYPE_IPV6:
        # Extension headers are not walked: next-header must be TCP/UDP.
        if len(frame) < ip_off + 40 or frame[ip_off] >> 4 != 6:
            return None
        proto = frame[ip_off + 6]
        src_ip = frame[ip_off + 8 : ip_off + 24]
        dst_ip = frame[ip_off + 24 : ip_off + 40]
        tr_off = ip_off + 40
    else:
        return None

    if proto == IPPROTO_TCP:
        transport, min_len = "tcp", 20
    elif proto == IPPROTO_UDP:
        transport, min_len = "udp", 8
    else:
        return None
    if len(frame) < tr_off + min_len:
        return None

    return _ParsedHeaders(
        ip_offset=ip_off,
        ip_version=4 if ethertype == ETHERTYPE_IPV4 else 6,
        src_ip=src_ip,
        dst_ip=dst_ip,
        transport_offset=tr_off,
        transport=transport,
        src_port=int.from_bytes(frame[tr_off : tr_off + 2], "big"),
        dst_port=int.from_bytes(frame[tr_off + 2 : tr_off + 4], "big"),
    )


def segment_flows(
    packets: Sequence[RawPacket],
    mode: Literal["bidirectional", "unidirectional"] = "bidirectional",
) -> FlowTable:
    """Group TCP/UDP packets into flows by five-tuple, preserving capture order.

    Non-TCP/UDP and unparseable packets are skipped and counted, so that
    sum(len(flow)) + skipped == len(packets).
    """
    table = FlowTable()
    for pkt in packets:
        parsed = _parse_headers(pkt.link_bytes)
        if parsed is None:
            table.skipped += 1
            continue
        a = (parsed.src_ip, parsed.src_port)
        b = (parsed.dst_ip, parsed.dst_port)
        if mode == "bidirectional" and b < a:
            a, b = b, a
        key = FlowKey(src_ip=a[0], src_port=a[1], dst_ip=b[0], dst_port=b[1], transport=parsed.transport)
        table.flows.setdefault(key, []).append(pkt)
    return table


def anonymize(packet: RawPacket) -> RawPacket:
    """Zero MAC addresses, IP addresses, and TCP/UDP ports; everything else
    (including checksums) is left untouched. Absent layers are skipped."""
    frame = bytearray(packet.link_bytes)
    end = min(12, len(frame))
    frame[:end] = bytes(end)

    parsed = _parse_headers(packet.link_bytes)
    if parsed is None:
        # Zero whatever address bytes are present even without a transport.
        located = _ethertype_and_ip_offset(packet.link_bytes)
        if located is not None:
            ethertype, ip_off = located
            if ethertype == ETHERTYPE_IPV4 and len(frame) >= ip_off + 20 and frame[ip_off] >> 4 == 4:
                _zero_range(frame, ip_off + 12, 8)
            elif ethertype == ETHERTYPE_IPV6 and len(frame) >= ip_off + 40 and frame[ip_off] >> 4 == 6:
                _zero_range(frame, ip_off + 8, 32)
    else:
        if parsed.ip_version == 4:
            _zero_range(frame, parsed.ip_offset + 12, 8)
        else:
            _zero_range(frame, parsed.ip_offset + 8, 32)
        _zero_range(frame, parsed.transport_offset, 4)

    return RawPacket(
        capture_index=packet.capture_index,
        timestamp_us=packet.timestamp_us,
        link_bytes=bytes(frame),
    )


def _zero_range(frame: bytearray, start: int, length: int) -> None:
    end = min(start + length, len(frame))
    if start < len(frame):
        frame[start:end] = bytes(end - start)


def normalize_flow(
    flow: Sequence[RawPacket],
    max_packets: int = DEFAULT_MAX_PACKETS,
    packet_len: int = DEFAULT_PACKET_LEN,
    key: FlowKey | None = None,
    label: int | None = None,
) -> FlowRecord:
    """Keep the first max_packets packets, truncate or zero-pad each to
    packet_len bytes, and zero-pad the flow itself to max_packets frames."""
    if not flow:
        raise EmptyFlow("cannot normalize an empty flow")
    if max_packets < 1 or packet_len < 1:
        raise ValueError("max_packets and packet_len must be >= 1")

    kept = flow[:max_packets]
    packets = []
    for pkt in kept:
        body = pkt.link_bytes[:packet_len]
        packets.append(NormalizedPacket(data=body.ljust(packet_len, b"\x00"), original_length=len(pkt.link_bytes)))
    for _ in range(max_packets - len(kept)):
        packets.append(NormalizedPacket(data=bytes(packet_len), original_length=0))

    return FlowRecord(key=key, packets=packets, real_packet_count=len(kept), label=label)


def flatten(record: FlowRecord) -> np.ndarray:
    """Concatenate the packet bodies into one uint8 array of length
    max_packets * packet_len."""
    if record._flat is None:
        record._flat = np.frombuffer(b"".join(p.data for p in record.packets), dtype=np.uint8)
    return record._flat.copy()


def pipeline(
    packets: Sequence[RawPacket],
    max_packets: int = DEFAULT_MAX_PACKETS,
    packet_len: int = DEFAULT_PACKET_LEN,
    mode: Literal["bidirectional", "unidirectional"] = "bidirectional",
    label: int | None = None,
) -> tuple[list[FlowRecord], FlowTable]:
    """Segment, anonymize, and normalize one capture's packets.

    Returns the records (in first-seen flow order) and the segmentation table
    with its skip counter.
    """
    table = segment_flows(packets, mode=mode)
    records = []
    for key, flow in table.flows.items():
        anonymized = [anonymize(p) for p in flow]
        records.append(normalize_flow(anonymized, max_packets, packet_len, key=key, label=label))
    return records, table
