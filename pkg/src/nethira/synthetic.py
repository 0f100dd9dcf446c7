"""Synthetic three-class traffic generator for demos and end-to-end tests.

Classes differ along three axes: TTL band, payload byte distribution, and
packets-per-flow behavior (class 2 additionally uses UDP instead of TCP).
Payloads repeat a short per-flow motif so masked reconstruction has learnable
structure.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import FlowRecord, anonymize, normalize_flow
from .pcap import RawPacket, write_pcap


@dataclass(frozen=True)
class ClassProfile:
    name: str
    ttl_range: tuple[int, int]  # inclusive
    payload_byte_range: tuple[int, int]  # inclusive
    packets_range: tuple[int, int]  # inclusive
    payload_len_range: tuple[int, int]  # inclusive
    transport: str  # "tcp" or "udp"


CLASS_PROFILES: tuple[ClassProfile, ...] = (
    ClassProfile("chatty_text", (30, 34), (0x61, 0x7A), (2, 3), (24, 48), "tcp"),
    ClassProfile("binary_control", (126, 128), (0x00, 0x0F), (4, 6), (40, 80), "tcp"),
    ClassProfile("bulk_telemetry", (250, 255), (0xF0, 0xFF), (6, 9), (12, 30), "udp"),
)

N_CLASSES = len(CLASS_PROFILES)


def _ip_checksum(header: bytes) -> int:
    total = 0
    for i in range(0, len(header), 2):
        total += int.from_bytes(header[i : i + 2], "big")
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _build_frame(
    src_mac: bytes,
    dst_mac: bytes,
    src_ip: bytes,
    dst_ip: bytes,
    sport: int,
    dport: int,
    ttl: int,
    transport: str,
    payload: bytes,
    ip_id: int,
    seq: int,
) -> bytes:
    if transport == "tcp":
        l4 = struct.pack(">HHIIBBHHH", sport, dport, seq, 0, 0x50, 0x18, 65535, 0, 0)
    else:
        l4 = struct.pack(">HHHH", sport, dport, 8 + len(payload), 0)
    total_len = 20 + len(l4) + len(payload)
    proto = 6 if transport == "tcp" else 17
    ip_wo_cksum = struct.pack(">BBHHHBBH4s4s", 0x45, 0, total_len, ip_id, 0x4000, ttl, proto, 0, src_ip, dst_ip)
    cksum = _ip_checksum(ip_wo_cksum)
    ip = ip_wo_cksum[:10] + struct.pack(">H", cksum) + ip_wo_cksum[12:]
    eth = dst_mac + src_mac + b"\x08\x00"
    return eth + ip + l4 + payload


def generate_flow_packets(
    class_id: int, rng: np.random.Generator, first_index: int = 0, ts_base_us: int = 1_700_000_000_000_000
) -> list[RawPacket]:
    """One flow's frames for the given class, alternating direction, sharing
    a five-tuple."""
    profile = CLASS_PROFILES[class_id]
    src_mac = bytes(rng.integers(0, 256, 6, dtype=np.uint8).tolist())
    dst_mac = bytes(rng.integers(0, 256, 6, dtype=np.uint8).tolist())
    src_ip = bytes([10, 0] + rng.integers(1, 255, 2, dtype=np.uint8).tolist())
    dst_ip = bytes([192, 168] + rng.integers(1, 255, 2, dtype=np.uint8).tolist())
    sport = int(rng.integers(2000, 65000))
    dport = int(rng.integers(2000, 65000))

    n_packets = int(rng.integers(profile.packets_range[0], profile.packets_range[1] + 1))
    ttl = int(rng.integers(profile.ttl_range[0], profile.ttl_range[1] + 1))
    lo, hi = profile.payload_byte_range
    motif = rng.integers(lo, hi + 1, size=4, dtype=np.uint8)

    packets = []
    for i in range(n_packets):
        payload_len = int(rng.integers(profile.payload_len_range[0], profile.payload_len_range[1] + 1))
        payload = np.tile(motif, payload_len // len(motif) + 1)[:payload_len]
        # Every fourth payload byte is free-form noise from the class range.
        noise_at = np.arange(0, payload_len, 4)
        payload[noise_at] = rng.integers(lo, hi + 1, size=len(noise_at), dtype=np.uint8)

        outbound = i % 2 == 0
        frame = _build_frame(
            src_mac=src_mac if outbound else dst_mac,
            dst_mac=dst_mac if outbound else src_mac,
            src_ip=src_ip if outbound else dst_ip,
            dst_ip=dst_ip if outbound else src_ip,
            sport=sport if outbound else dport,
            dport=dport if outbound else sport,
            ttl=ttl,
            transport=profile.transport,
            payload=payload.tobytes(),
            ip_id=int(rng.integers(0, 512)),
            seq=int(rng.integers(0, 1 << 16)),
        )
        packets.append(
            RawPacket(
                capture_index=first_index + i,
                timestamp_us=ts_base_us + (first_index + i) * 1000,
                link_bytes=frame,
            )
        )
    return packets


def generate_records(
    n_per_class: int, max_packets: int, packet_len: int, seed: int = 0, labeled: bool = True
) -> list[FlowRecord]:
    """Anonymized, normalized flows: n_per_class flows of every class,
    interleaved round-robin."""
    rng = np.random.default_rng(seed)
    records = []
    index = 0
    for i in range(n_per_class):
        for class_id in range(N_CLASSES):
            packets = generate_flow_packets(class_id, rng, first_index=index)
            index += len(packets)
            record = normalize_flow([anonymize(p) for p in packets], max_packets, packet_len)
            record.label = class_id if labeled else None
            records.append(record)
    return records


def write_pcap_tree(root: str | Path, flows_per_class: int, seed: int = 0) -> Path:
    """One subdirectory per class name, each holding a capture of that
    class's flows; matches the preprocess --label-from-dirname layout."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    index = 0
    for class_id, profile in enumerate(CLASS_PROFILES):
        class_dir = root / profile.name
        class_dir.mkdir(parents=True, exist_ok=True)
        packets: list[RawPacket] = []
        for _ in range(flows_per_class):
            flow = generate_flow_packets(class_id, rng, first_index=index)
            index += len(flow)
            packets.extend(flow)
        write_pcap(class_dir / "capture.pcap", packets)
    return root
