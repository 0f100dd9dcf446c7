"""Dataset file format: one JSON object per line plus a sidecar manifest.

Each line is {"label": int|null, "real_packet_count": int, "packets":
[base64 of packet_len bytes] * max_packets}. The sidecar manifest
(<dataset>.manifest.json) records m, l, the class-name mapping, tool version,
config hash, and summary statistics.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Iterable

from . import __version__
from .ingest import FlowRecord, NormalizedPacket


def record_to_line(record: FlowRecord) -> str:
    obj = {
        "label": record.label,
        "real_packet_count": record.real_packet_count,
        "packets": [base64.b64encode(p.data).decode("ascii") for p in record.packets],
    }
    return json.dumps(obj, separators=(",", ":"))


def record_from_line(line: str) -> FlowRecord:
    obj = json.loads(line)
    packets = []
    for i, b64 in enumerate(obj["packets"]):
        data = base64.b64decode(b64)
        packets.append(NormalizedPacket(data=data, original_length=len(data) if i < obj["real_packet_count"] else 0))
    return FlowRecord(
        key=None,
        packets=packets,
        real_packet_count=obj["real_packet_count"],
        label=obj["label"],
    )


def write_dataset(
    path: str | Path,
    records: Iterable[FlowRecord],
    max_packets: int,
    packet_len: int,
    class_names: dict[str, int] | None = None,
    config_hash: str | None = None,
    stats: dict | None = None,
) -> Path:
    """Write records as JSONL and a sidecar manifest; returns the manifest path."""
    path = Path(path)
    with path.open("w", encoding="ascii", newline="\n") as fh:
        for record in records:
            fh.write(record_to_line(record) + "\n")

    manifest = {
        "m": max_packets,
        "l": packet_len,
        "classes": class_names or {},
        "tool_version": __version__,
        "config_hash": config_hash,
    }
    if stats:
        manifest["stats"] = stats
    manifest_path = manifest_path_for(path)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="ascii")
    return manifest_path


def manifest_path_for(dataset_path: str | Path) -> Path:
    return Path(str(dataset_path) + ".manifest.json")


def read_manifest(dataset_path: str | Path) -> dict | None:
    p = manifest_path_for(dataset_path)
    if not p.exists():
        return None
    return json.loads(p.read_text())


def read_dataset(path: str | Path) -> list[FlowRecord]:
    with Path(path).open("r", encoding="ascii") as fh:
        return [record_from_line(line) for line in fh if line.strip()]
