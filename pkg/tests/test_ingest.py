import numpy as np
import pytest

from nethira.ingest import (
    EmptyFlow,
    FlowRecord,
    NormalizedPacket,
    anonymize,
    flatten,
    normalize_flow,
    pipeline,
    segment_flows,
)

from frames import fuzz_frame, icmp4, packet, tcp4, tcp6, udp4


def _flow_packets():
    a, b = b"\x0a\x00\x00\x01", b"\x0a\x00\x00\x02"
    return [
        packet(tcp4(b"x", src_ip=a, dst_ip=b, sport=1000, dport=80), 0),
        packet(tcp4(b"y", src_ip=b, dst_ip=a, sport=80, dport=1000), 1),
        packet(tcp4(b"z", src_ip=a, dst_ip=b, sport=1000, dport=80), 2),
    ]


class TestSegmentFlows:
    def test_bidirectional_merges_directions(self):
        table = segment_flows(_flow_packets(), mode="bidirectional")
        assert len(table.flows) == 1
        (flow,) = table.flows.values()
        assert [p.capture_index for p in flow] == [0, 1, 2]

    def test_unidirectional_splits_directions(self):
        table = segment_flows(_flow_packets(), mode="unidirectional")
        sizes = sorted(len(f) for f in table.flows.values())
        assert sizes == [1, 2]

    def test_non_tcp_udp_skipped_and_counted(self):
        table = segment_flows([packet(icmp4(), 0)])
        assert table.flows == {}
        assert table.skipped == 1

    def test_partition_property(self):
        rng = np.random.default_rng(3)
        pkts = [packet(fuzz_frame(rng), i) for i in range(300)]
        pkts += [packet(icmp4(), 300 + i) for i in range(5)]
        table = segment_flows(pkts)
        assert sum(len(f) for f in table.flows.values()) + table.skipped == len(pkts)

    def test_capture_order_within_flow(self):
        rng = np.random.default_rng(5)
        pkts = [packet(fuzz_frame(rng), i) for i in range(200)]
        table = segment_flows(pkts)
        for flow in table.flows.values():
            indices = [p.capture_index for p in flow]
            assert indices == sorted(indices)


class TestAnonymize:
    def test_tcp4_matches_hand_zeroed_copy(self):
        frame = tcp4(b"payload", src_ip=b"\x01\x02\x03\x04", dst_ip=b"\x05\x06\x07\x08", sport=777, dport=888)
        expected = bytearray(frame)
        expected[0:12] = bytes(12)  # MACs
        expected[26:34] = bytes(8)  # IPv4 src+dst
        expected[34:38] = bytes(4)  # TCP ports
        assert anonymize(packet(frame)).link_bytes == bytes(expected)

    def test_udp4_ports_zeroed(self):
        frame = udp4(b"data", sport=1234, dport=4321)
        out = anonymize(packet(frame)).link_bytes
        assert out[34:38] == bytes(4)
        assert out[38:42] == frame[38:42]  # udp length + checksum untouched

    def test_ipv6_addresses_zeroed(self):
        frame = tcp6(b"data6")
        out = anonymize(packet(frame)).link_bytes
        assert out[22:54] == bytes(32)
        assert out[54:58] == bytes(4)  # ports
        assert out[58:] == frame[58:]

    def test_vlan_offsets_respected(self):
        frame = tcp4(b"tagged", vlan=True, src_ip=b"\x09\x09\x09\x09")
        out = anonymize(packet(frame)).link_bytes
        assert out[14:18] == frame[14:18]  # vlan tag kept
        assert out[30:38] == bytes(8)  # ip addrs at 18+12
        assert out[38:42] == bytes(4)  # ports at 18+20
        assert len(out) == len(frame)

    def test_already_zero_is_identity(self):
        frame = tcp4(b"q", src_ip=bytes(4), dst_ip=bytes(4), sport=0, dport=0, dst_mac=bytes(6), src_mac=bytes(6))
        assert anonymize(packet(frame)).link_bytes == frame

    def test_idempotent(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            p = packet(fuzz_frame(rng))
            once = anonymize(p)
            assert anonymize(once).link_bytes == once.link_bytes

    def test_checksums_and_payload_untouched(self):
        frame = tcp4(b"\xde\xad\xbe\xef")
        out = anonymize(packet(frame)).link_bytes
        assert out[24:26] == frame[24:26]  # ip checksum
        assert out[50:52] == frame[50:52]  # tcp checksum
        assert out[54:] == frame[54:]

    def test_address_fields_do_not_leak(self):
        common = dict(payload=b"same", sport=1, dport=2)
        f1 = tcp4(src_ip=b"\x01\x01\x01\x01", dst_ip=b"\x02\x02\x02\x02", dst_mac=b"\x0a" * 6, **common)
        f2 = tcp4(src_ip=b"\x09\x09\x09\x09", dst_ip=b"\x08\x08\x08\x08", dst_mac=b"\x0b" * 6, **common)
        assert anonymize(packet(f1)).link_bytes == anonymize(packet(f2)).link_bytes

    def test_non_ip_only_macs_zeroed(self):
        from frames import arp

        frame = arp()
        out = anonymize(packet(frame)).link_bytes
        assert out[:12] == bytes(12)
        assert out[12:] == frame[12:]


class TestNormalizeFlow:
    def test_padding_short_flow(self):
        pkt = packet(bytes(range(10)) and tcp4()[:10] or b"", 0)
        record = normalize_flow([packet(tcp4()[:10], 0)], max_packets=5, packet_len=128)
        assert record.real_packet_count == 1
        assert len(record.packets) == 5
        assert record.packets[0].data[:10] == tcp4()[:10]
        assert record.packets[0].data[10:] == bytes(118)
        assert all(p.data == bytes(128) for p in record.packets[1:])

    def test_first_m_packets_kept(self):
        flow = [packet(tcp4(bytes([i])), i) for i in range(7)]
        record = normalize_flow(flow, max_packets=5, packet_len=128)
        assert record.real_packet_count == 5
        for i in range(5):
            assert record.packets[i].data[: len(flow[i].link_bytes)] == flow[i].link_bytes

    def test_truncation_to_packet_len(self):
        frame = tcp4(bytes(160))  # > 128 bytes on the wire
        record = normalize_flow([packet(frame)], max_packets=5, packet_len=128)
        assert record.packets[0].data == frame[:128]
        assert record.packets[0].original_length == len(frame)

    def test_empty_flow_raises(self):
        with pytest.raises(EmptyFlow):
            normalize_flow([], 5, 128)


class TestFlatten:
    def test_length_is_m_times_l(self):
        record = normalize_flow([packet(tcp4())], 5, 128)
        assert flatten(record).shape == (640,)

    def test_all_zero_record(self):
        record = FlowRecord(
            key=None,
            packets=[NormalizedPacket(bytes(128), 0) for _ in range(5)],
            real_packet_count=1,
        )
        assert not flatten(record).any()

    def test_sentinel_offsets(self):
        packets = [NormalizedPacket(bytes([i + 1]) + bytes(127), 128) for i in range(5)]
        record = FlowRecord(key=None, packets=packets, real_packet_count=5)
        flat = flatten(record)
        assert [int(flat[i * 128]) for i in range(5)] == [1, 2, 3, 4, 5]
        assert int(flat.sum()) == 15


class TestPipeline:
    def test_address_invariance_end_to_end(self):
        common = dict(payload=b"identical", sport=5, dport=6)
        p1 = [packet(tcp4(src_ip=b"\x01\x01\x01\x01", dst_ip=b"\x02\x02\x02\x02", **common), 0)]
        p2 = [packet(tcp4(src_ip=b"\x07\x07\x07\x07", dst_ip=b"\x06\x06\x06\x06", **common), 0)]
        r1, _ = pipeline(p1, 5, 128)
        r2, _ = pipeline(p2, 5, 128)
        assert np.array_equal(flatten(r1[0]), flatten(r2[0]))

    def test_flatten_always_m_times_l(self):
        rng = np.random.default_rng(17)
        pkts = [packet(fuzz_frame(rng), i) for i in range(120)]
        records, _ = pipeline(pkts, 5, 128)
        assert records
        for record in records:
            assert flatten(record).shape == (640,)
