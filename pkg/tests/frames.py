"""Hand-built Ethernet frames for tests: deterministic layouts with known
field offsets, plus a seeded fuzzer of random-but-valid headers."""

from __future__ import annotations

import struct

import numpy as np

from nethira.pcap import RawPacket


def eth_header(dst_mac=b"\xaa" * 6, src_mac=b"\xbb" * 6, ethertype=0x0800) -> bytes:
    return dst_mac + src_mac + struct.pack(">H", ethertype)


def ipv4_header(
    src_ip=b"\x0a\x00\x00\x01",
    dst_ip=b"\xc0\xa8\x00\x02",
    proto=6,
    ttl=64,
    total_len=40,
    ihl=5,
    ip_id=0x1234,
    options=b"",
) -> bytes:
    head = struct.pack(
        ">BBHHHBBH4s4s", (4 << 4) | ihl, 0, total_len, ip_id, 0x4000, ttl, proto, 0xBEEF, src_ip, dst_ip
    )
    return head + options


def ipv6_header(src_ip=b"\x20\x01" + b"\x11" * 14, dst_ip=b"\x20\x01" + b"\x22" * 14, next_header=6, payload_len=20) -> bytes:
    return struct.pack(">IHBB", 6 << 28, payload_len, next_header, 64) + src_ip + dst_ip


def tcp_header(sport=4242, dport=80, seq=1, ack=0, data_offset=5, flags=0x18, options=b"") -> bytes:
    head = struct.pack(">HHIIBBHHH", sport, dport, seq, ack, data_offset << 4, flags, 65535, 0xCAFE, 0)
    return head + options


def udp_header(sport=5353, dport=53, length=8) -> bytes:
    return struct.pack(">HHHH", sport, dport, length, 0xD00D)


def tcp4(payload=b"", vlan=False, options=b"", ip_options=b"", **kw) -> bytes:
    ip_kw = {k: v for k, v in kw.items() if k in ("src_ip", "dst_ip", "ttl", "ip_id")}
    tcp_kw = {k: v for k, v in kw.items() if k in ("sport", "dport", "seq", "ack", "flags")}
    eth_kw = {k: v for k, v in kw.items() if k in ("dst_mac", "src_mac")}
    ihl = 5 + len(ip_options) // 4
    data_offset = 5 + len(options) // 4
    frame = ipv4_header(
        proto=6, ihl=ihl, total_len=ihl * 4 + data_offset * 4 + len(payload), options=ip_options, **ip_kw
    ) + tcp_header(data_offset=data_offset, options=options, **tcp_kw) + payload
    if vlan:
        return eth_header(ethertype=0x8100, **eth_kw) + struct.pack(">HH", 0x0064, 0x0800) + frame
    return eth_header(**eth_kw) + frame


def udp4(payload=b"", **kw) -> bytes:
    ip_kw = {k: v for k, v in kw.items() if k in ("src_ip", "dst_ip", "ttl", "ip_id")}
    udp_kw = {k: v for k, v in kw.items() if k in ("sport", "dport")}
    eth_kw = {k: v for k, v in kw.items() if k in ("dst_mac", "src_mac")}
    return (
        eth_header(**eth_kw)
        + ipv4_header(proto=17, total_len=28 + len(payload), **ip_kw)
        + udp_header(length=8 + len(payload), **udp_kw)
        + payload
    )


def tcp6(payload=b"", **kw) -> bytes:
    ip_kw = {k: v for k, v in kw.items() if k in ("src_ip", "dst_ip")}
    tcp_kw = {k: v for k, v in kw.items() if k in ("sport", "dport", "seq")}
    return (
        eth_header(ethertype=0x86DD)
        + ipv6_header(next_header=6, payload_len=20 + len(payload), **ip_kw)
        + tcp_header(**tcp_kw)
        + payload
    )


def icmp4(payload=b"\x08\x00\x00\x00") -> bytes:
    return eth_header() + ipv4_header(proto=1, total_len=20 + len(payload)) + payload


def arp() -> bytes:
    return eth_header(ethertype=0x0806) + bytes(28)


def packet(frame: bytes, index: int = 0, ts_us: int = 1_700_000_000_000_000) -> RawPacket:
    return RawPacket(capture_index=index, timestamp_us=ts_us + index * 1000, link_bytes=frame)


def fuzz_frame(rng: np.random.Generator) -> bytes:
    """A random valid TCP/UDP over IPv4/IPv6 frame, random addresses and
    payload, occasionally VLAN-tagged or carrying TCP options."""
    payload = rng.integers(0, 256, int(rng.integers(0, 120)), dtype=np.uint8).tobytes()
    transport = rng.choice(["tcp", "udp"])
    v6 = rng.random() < 0.2
    kw = dict(
        sport=int(rng.integers(1, 65536)),
        dport=int(rng.integers(1, 65536)),
    )
    if v6:
        return tcp6(
            payload,
            src_ip=rng.integers(0, 256, 16, dtype=np.uint8).tobytes(),
            dst_ip=rng.integers(0, 256, 16, dtype=np.uint8).tobytes(),
            **kw,
        )
    kw.update(
        src_ip=rng.integers(0, 256, 4, dtype=np.uint8).tobytes(),
        dst_ip=rng.integers(0, 256, 4, dtype=np.uint8).tobytes(),
        ttl=int(rng.integers(1, 256)),
        ip_id=int(rng.integers(0, 65536)),
    )
    kw.update(
        dst_mac=rng.integers(0, 256, 6, dtype=np.uint8).tobytes(),
        src_mac=rng.integers(0, 256, 6, dtype=np.uint8).tobytes(),
    )
    if transport == "udp":
        return udp4(payload, **kw)
    options = b"\x01\x01\x01\x01" * int(rng.integers(0, 3))
    return tcp4(payload, vlan=bool(rng.random() < 0.15), options=options, **kw)


def golden_packets() -> list[RawPacket]:
    """The fixed 20-packet capture behind the golden-file tests: six flows
    (TCP, UDP, long TCP, IPv6, VLAN, oversize UDP) plus ICMP and ARP strays."""
    a, b = b"\x0a\x00\x00\x01", b"\x0a\x00\x00\x02"
    frames: list[bytes] = []
    # flow A: bidirectional TCP, 4 packets
    frames += [
        tcp4(b"hello", src_ip=a, dst_ip=b, sport=1111, dport=80, ttl=60, seq=1),
        tcp4(b"world", src_ip=b, dst_ip=a, sport=80, dport=1111, ttl=61, seq=2),
        tcp4(b"again", src_ip=a, dst_ip=b, sport=1111, dport=80, ttl=60, seq=3),
        tcp4(b"done!", src_ip=b, dst_ip=a, sport=80, dport=1111, ttl=61, seq=4),
    ]
    # flow B: UDP, 2 packets
    frames += [
        udp4(b"\x01\x02\x03", src_ip=a, dst_ip=b, sport=5000, dport=53, ttl=32),
        udp4(b"\x04\x05\x06\x07", src_ip=b, dst_ip=a, sport=53, dport=5000, ttl=32),
    ]
    # flow C: 7 TCP packets, exercises the first-M cut
    frames += [
        tcp4(bytes([i]) * (i + 1), src_ip=a, dst_ip=b, sport=2222, dport=443, ttl=50, seq=10 + i)
        for i in range(7)
    ]
    # flow D: TCP over IPv6
    frames += [
        tcp6(b"v6-data", sport=3333, dport=8443, seq=7),
        tcp6(b"v6-back", src_ip=b"\x20\x01" + b"\x22" * 14, dst_ip=b"\x20\x01" + b"\x11" * 14, sport=8443, dport=3333, seq=8),
    ]
    # flow E: VLAN-tagged TCP
    frames += [
        tcp4(b"tagged", vlan=True, src_ip=a, dst_ip=b, sport=4444, dport=22, ttl=40, seq=20),
        tcp4(b"tagged2", vlan=True, src_ip=b, dst_ip=a, sport=22, dport=4444, ttl=40, seq=21),
    ]
    # flow F: one oversize UDP frame, exercises the L-byte cut
    frames += [udp4(bytes(range(200 % 256)) * 1, src_ip=a, dst_ip=b, sport=6000, dport=6001, ttl=99)]
    # strays: skipped by segmentation
    frames += [icmp4(), arp()]
    assert len(frames) == 20
    return [packet(f, i) for i, f in enumerate(frames)]
