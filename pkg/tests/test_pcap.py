import logging
import struct

import pytest

from nethira.pcap import CorruptHeader, RawPacket, UnsupportedFormat, read_pcap, write_pcap

from frames import golden_packets, packet, tcp4


def test_write_read_round_trip(tmp_path):
    pkts = [packet(tcp4(b"abc"), 0), packet(tcp4(b"defgh"), 1)]
    path = tmp_path / "two.pcap"
    write_pcap(path, pkts)
    back = read_pcap(path)
    assert len(back) == 2
    assert [p.link_bytes for p in back] == [p.link_bytes for p in pkts]
    assert [p.timestamp_us for p in back] == [p.timestamp_us for p in pkts]
    assert [p.capture_index for p in back] == [0, 1]


def test_empty_capture(tmp_path):
    path = tmp_path / "empty.pcap"
    write_pcap(path, [])
    assert read_pcap(path) == []


def test_pcapng_magic_rejected(tmp_path):
    path = tmp_path / "block.pcapng"
    path.write_bytes(struct.pack("<I", 0x0A0D0D0A) + bytes(40))
    with pytest.raises(UnsupportedFormat):
        read_pcap(path)


def test_unknown_magic_rejected(tmp_path):
    path = tmp_path / "junk.pcap"
    path.write_bytes(b"\x00\x01\x02\x03" + bytes(40))
    with pytest.raises(UnsupportedFormat):
        read_pcap(path)


def test_short_file_is_corrupt_header(tmp_path):
    path = tmp_path / "short.pcap"
    path.write_bytes(struct.pack("<I", 0xA1B2C3D4) + bytes(10))
    with pytest.raises(CorruptHeader):
        read_pcap(path)


def test_byte_swapped_capture(tmp_path):
    frame = tcp4(b"swapped")
    raw = struct.pack(">IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1)
    raw += struct.pack(">IIII", 100, 7, len(frame), len(frame)) + frame
    path = tmp_path / "be.pcap"
    path.write_bytes(raw)
    pkts = read_pcap(path)
    assert len(pkts) == 1
    assert pkts[0].link_bytes == frame
    assert pkts[0].timestamp_us == 100 * 1_000_000 + 7


def test_truncated_trailing_record_skipped(tmp_path, caplog):
    pkts = [packet(tcp4(b"one"), 0), packet(tcp4(b"two"), 1)]
    path = tmp_path / "trunc.pcap"
    write_pcap(path, pkts)
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with caplog.at_level(logging.WARNING):
        back = read_pcap(path)
    assert len(back) == 1
    assert back[0].link_bytes == pkts[0].link_bytes
    assert any("truncated" in rec.message for rec in caplog.records)


def test_golden_pcap_bytes_stable(tmp_path, data_dir):
    out = tmp_path / "golden.pcap"
    write_pcap(out, golden_packets())
    assert out.read_bytes() == (data_dir / "golden_20.pcap").read_bytes()


def test_empty_frame_rejected():
    with pytest.raises(ValueError):
        RawPacket(capture_index=0, timestamp_us=0, link_bytes=b"")
