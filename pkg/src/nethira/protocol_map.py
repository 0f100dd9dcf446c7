"""Protocol header field layout of a normalized packet.

parse_fields walks Ethernet -> IPv4/IPv6 -> TCP/UDP and emits one span per
standard header field, clipped to the packet length. Unparseable layers end
the map early. shuffle_fields permutes the span byte blocks in place, which
deliberately breaks wire format: the downstream model consumes bytes, and the
augmentation exists to break positional reliance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import ETHERTYPE_IPV4, ETHERTYPE_IPV6, ETHERTYPE_VLAN, IPPROTO_TCP, IPPROTO_UDP, NormalizedPacket


@dataclass(frozen=True)
class FieldSpan:
    offset: int
    length: int
    layer: str  # ETH, IPV4, IPV6, TCP, UDP
    name: str

    @property
    def end(self) -> int:
        return self.offset + self.length


@dataclass
class FieldSpanMap:
    packet_index: int
    spans: list[FieldSpan]
    header_end: int


_ETH_FIELDS = [("eth.dst", 6), ("eth.src", 6), ("eth.type", 2)]
_IPV4_FIELDS = [
    ("ip.version_ihl", 1),
    ("ip.tos", 1),
    ("ip.total_length", 2),
    ("ip.id", 2),
    ("ip.flags_frag", 2),
    ("ip.ttl", 1),
    ("ip.protocol", 1),
    ("ip.checksum", 2),
    ("ip.src", 4),
    ("ip.dst", 4),
]
_IPV6_FIELDS = [
    ("ip6.version_tc_flow", 4),
    ("ip6.payload_length", 2),
    ("ip6.next_header", 1),
    ("ip6.hop_limit", 1),
    ("ip6.src", 16),
    ("ip6.dst", 16),
]
_TCP_FIELDS = [
    ("tcp.sport", 2),
    ("tcp.dport", 2),
    ("tcp.seq", 4),
    ("tcp.ack", 4),
    ("tcp.offset_flags", 2),
    ("tcp.window", 2),
    ("tcp.checksum", 2),
    ("tcp.urgent", 2),
]
_UDP_FIELDS = [("udp.sport", 2), ("udp.dport", 2), ("udp.length", 2), ("udp.checksum", 2)]


def _emit(spans: list[FieldSpan], layer: str, fields: list[tuple[str, int]], start: int, limit: int) -> int:
    """Append fields from `start`, clipping to `limit`; returns the layer end
    (unclipped)."""
    offset = start
    for name, length in fields:
        if offset >= limit:
            offset += length
            continue
        spans.append(FieldSpan(offset=offset, length=min(length, limit - offset), layer=layer, name=name))
        offset += length
    return offset


def parse_fields(packet: NormalizedPacket | bytes, packet_index: int = 0) -> FieldSpanMap:
    """Compute the header field spans of one normalized packet.

    An all-zero padding packet yields the three Ethernet spans and
    header_end 14 (ethertype 0 parses no further).
    """
    data = packet.data if isinstance(packet, NormalizedPacket) else bytes(packet)
    limit = len(data)
    spans: list[FieldSpan] = []

    _emit(spans, "ETH", _ETH_FIELDS, 0, limit)
    header_end = min(14, limit)
    if limit < 14:
        return FieldSpanMap(packet_index=packet_index, spans=spans, header_end=header_end)

    ethertype = int.from_bytes(data[12:14], "big")
    ip_off = 14
    if ethertype == ETHERTYPE_VLAN and limit >= 18:
        spans.append(FieldSpan(offset=14, length=2, layer="ETH", name="eth.vlan_tci"))
        spans.append(FieldSpan(offset=16, length=2, layer="ETH", name="eth.type"))
        ethertype = int.from_bytes(data[16:18], "big")
        ip_off = 18
        header_end = 18

    if ethertype == ETHERTYPE_IPV4 and limit > ip_off and data[ip_off] >> 4 == 4:
        ihl = (data[ip_off] & 0x0F) * 4
        if ihl < 20:
            return FieldSpanMap(packet_index=packet_index, spans=spans, header_end=header_end)
        _emit(spans, "IPV4", _IPV4_FIELDS, ip_off, limit)
        if ihl > 20 and ip_off + 20 < limit:
            spans.append(
                FieldSpan(
                    offset=ip_off + 20,
                    length=min(ihl - 20, limit - ip_off - 20),
                    layer="IPV4",
                    name="ip.options",
                )
            )
        header_end = min(ip_off + ihl, limit)
        if ip_off + 10 <= limit:
            proto = data[ip_off + 9]
        else:
            return FieldSpanMap(packet_index=packet_index, spans=spans, header_end=header_end)
        tr_off = ip_off + ihl
    elif ethertype == ETHERTYPE_IPV6 and limit > ip_off and data[ip_off] >> 4 == 6:
        _emit(spans, "IPV6", _IPV6_FIELDS, ip_off, limit)
        header_end = min(ip_off + 40, limit)
        if ip_off + 7 <= limit:
            proto = data[ip_off + 6]
        else:
            return FieldSpanMap(packet_index=packet_index, spans=spans, header_end=header_end)
        tr_off = ip_off + 40
    else:
        return FieldSpanMap(packet_index=packet_index, spans=spans, header_end=header_end)

    if tr_off >= limit:
        return FieldSpanMap(packet_index=packet_index, spans=spans, header_end=header_end)

    if proto == IPPROTO_TCP:
        _emit(spans, "TCP", _TCP_FIELDS, tr_off, limit)
        if tr_off + 13 <= limit:
            data_offset = (data[tr_off + 12] >> 4) * 4
        else:
            data_offset = 20
        if data_offset < 20:
            data_offset = 20
        if data_offset > 20 and tr_off + 20 < limit:
            spans.append(
                FieldSpan(
                    offset=tr_off + 20,
                    length=min(data_offset - 20, limit - tr_off - 20),
                    layer="TCP",
                    name="tcp.options",
                )
            )
        header_end = min(tr_off + data_offset, limit)
    elif proto == IPPROTO_UDP:
        _emit(spans, "UDP", _UDP_FIELDS, tr_off, limit)
        header_end = min(tr_off + 8, limit)

    return FieldSpanMap(packet_index=packet_index, spans=spans, header_end=header_end)


def shuffle_fields(
    packet: NormalizedPacket,
    span_map: FieldSpanMap,
    rng: np.random.Generator,
    within_layer: bool = False,
) -> NormalizedPacket:
    """Permute the span byte blocks of a packet uniformly at random.

    The permuted blocks are written back contiguously over the region the
    spans covered, so the multiset of block contents and every byte outside
    the spans are preserved. within_layer restricts the permutation to spans
    of the same layer.
    """
    spans = sorted(span_map.spans, key=lambda s: s.offset)
    if len(spans) < 2:
        return packet

    data = bytearray(packet.data)
    blocks = [bytes(data[s.offset : s.end]) for s in spans]

    order = np.arange(len(spans))
    if within_layer:
        for layer in {s.layer for s in spans}:
            idx = [i for i, s in enumerate(spans) if s.layer == layer]
            order[idx] = np.array(idx)[rng.permutation(len(idx))]
    else:
        order = rng.permutation(len(spans))

    stream = b"".join(blocks[i] for i in order)
    pos = 0
    for s in spans:
        data[s.offset : s.end] = stream[pos : pos + s.length]
        pos += s.length

    return NormalizedPacket(data=bytes(data), original_length=packet.original_length)
