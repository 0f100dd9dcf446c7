"""Corrupted inputs and reconstruction targets for pre-training, plus the two
fine-tuning augmentations.

Three corruption kinds: BYTE masks random positions, PROTOCOL masks short
runs anchored at header field boundaries, PACKET permutes the real packets
and then byte-masks the permuted sequence. Masked positions never fall inside
padding packets. All operations are deterministic given a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .ingest import FlowRecord, flatten
from .protocol_map import FieldSpanMap, shuffle_fields
from .vocab import MASK_ID


class CorruptionKind(Enum):
    BYTE = "byte"
    PROTOCOL = "protocol"
    PACKET = "packet"


class NoEligiblePositions(Exception):
    """The flow is entirely padding, nothing can be masked."""


class NoEligibleSpans(Exception):
    """No field span exists in any non-padding packet."""


class TooFewPackets(Exception):
    """Packet-order perturbation needs at least two real packets."""


@dataclass
class CorruptionPlan:
    kind: CorruptionKind
    masked_positions: np.ndarray  # sorted int64 indices into the flat sequence
    permutation: np.ndarray  # over packet slots; identity unless kind == PACKET
    seed: int  # -1 when the caller supplied a generator instead of a seed


@dataclass
class TrainingSample:
    """input_tokens has MASK at plan.masked_positions and agrees with
    target_tokens everywhere else."""

    input_tokens: np.ndarray
    target_tokens: np.ndarray
    plan: CorruptionPlan


def _resolve_rng(rng: np.random.Generator | int) -> tuple[np.random.Generator, int]:
    if isinstance(rng, np.random.Generator):
        return rng, -1
    return np.random.default_rng(rng), int(rng)


def _mask_count(ratio: float, eligible: int) -> int:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")
    return math.ceil(ratio * eligible)


def _apply_mask(target: np.ndarray, positions: np.ndarray) -> np.ndarray:
    corrupted = target.copy()
    corrupted[positions] = MASK_ID
    return corrupted


def corrupt_byte(record: FlowRecord, ratio: float, rng: np.random.Generator | int) -> TrainingSample:
    """Mask ceil(ratio * eligible) positions sampled uniformly without
    replacement from the non-padding region."""
    gen, seed = _resolve_rng(rng)
    packet_len = record.packet_len
    eligible = record.real_packet_count * packet_len
    if eligible == 0:
        raise NoEligiblePositions("flow contains only padding packets")

    n = _mask_count(ratio, eligible)
    positions = np.sort(gen.choice(eligible, size=n, replace=False)).astype(np.int64)
    target = flatten(record).astype(np.int64)
    plan = CorruptionPlan(
        kind=CorruptionKind.BYTE,
        masked_positions=positions,
        permutation=np.arange(record.max_packets, dtype=np.int64),
        seed=seed,
    )
    return TrainingSample(input_tokens=_apply_mask(target, positions), target_tokens=target, plan=plan)


def corrupt_protocol(
    record: FlowRecord,
    maps: list[FieldSpanMap],
    span_len: int = 4,
    n_spans: int = 8,
    vicinity_jitter: int = 1,
    rng: np.random.Generator | int = 0,
) -> TrainingSample:
    """Mask runs of span_len consecutive bytes starting at header field
    boundaries or up to vicinity_jitter bytes into them.

    n_spans start positions are drawn uniformly without replacement from the
    allowed start set over all non-padding packets; each run is clipped at its
    packet's end.
    """
    if span_len < 1:
        raise ValueError("span_len must be >= 1")
    gen, seed = _resolve_rng(rng)
    packet_len = record.packet_len

    starts = set()
    for pkt_idx in range(record.real_packet_count):
        base = pkt_idx * packet_len
        for span in maps[pkt_idx].spans:
            for jitter in range(vicinity_jitter + 1):
                offset = span.offset + jitter
                if offset < packet_len:
                    starts.add(base + offset)
    if not starts:
        raise NoEligibleSpans("no field span in any non-padding packet")

    start_pool = np.array(sorted(starts), dtype=np.int64)
    chosen = gen.choice(len(start_pool), size=min(n_spans, len(start_pool)), replace=False)

    masked = set()
    for start in start_pool[chosen]:
        packet_end = (start // packet_len + 1) * packet_len
        masked.update(range(int(start), int(min(start + span_len, packet_end))))
    positions = np.array(sorted(masked), dtype=np.int64)

    target = flatten(record).astype(np.int64)
    plan = CorruptionPlan(
        kind=CorruptionKind.PROTOCOL,
        masked_positions=positions,
        permutation=np.arange(record.max_packets, dtype=np.int64),
        seed=seed,
    )
    return TrainingSample(input_tokens=_apply_mask(target, positions), target_tokens=target, plan=plan)


def _non_identity_permutation(n: int, gen: np.random.Generator) -> np.ndarray:
    # Rejection sampling keeps the draw uniform over non-identity permutations.
    while True:
        perm = gen.permutation(n)
        if not np.array_equal(perm, np.arange(n)):
            return perm


def corrupt_packet(record: FlowRecord, ratio: float, rng: np.random.Generator | int) -> TrainingSample:
    """Permute the real packets (uniform over non-identity permutations),
    then byte-mask the permuted sequence. The target is the permuted flat
    sequence; padding packets stay in place."""
    gen, seed = _resolve_rng(rng)
    real = record.real_packet_count
    if real < 2:
        raise TooFewPackets("packet perturbation needs real_packet_count >= 2")

    perm = np.concatenate([_non_identity_permutation(real, gen), np.arange(real, record.max_packets)])
    packet_len = record.packet_len
    flat = flatten(record).astype(np.int64)
    target = flat.reshape(record.max_packets, packet_len)[perm].reshape(-1)

    eligible = real * packet_len
    n = _mask_count(ratio, eligible)
    positions = np.sort(gen.choice(eligible, size=n, replace=False)).astype(np.int64)

    plan = CorruptionPlan(
        kind=CorruptionKind.PACKET,
        masked_positions=positions,
        permutation=perm.astype(np.int64),
        seed=seed,
    )
    return TrainingSample(input_tokens=_apply_mask(target, positions), target_tokens=target, plan=plan)


def augment_protocol(
    record: FlowRecord,
    maps: list[FieldSpanMap],
    rng: np.random.Generator | int,
    within_layer: bool = False,
) -> np.ndarray:
    """Shuffle the header field blocks of each non-padding packet
    independently and flatten. Pure byte sequence, no mask tokens."""
    gen, _ = _resolve_rng(rng)
    parts = []
    for idx, packet in enumerate(record.packets):
        if idx < record.real_packet_count:
            packet = shuffle_fields(packet, maps[idx], gen, within_layer=within_layer)
        parts.append(np.frombuffer(packet.data, dtype=np.uint8))
    return np.concatenate(parts).astype(np.int64)


def augment_packet(
    record: FlowRecord, drop_prob: float, rng: np.random.Generator | int
) -> tuple[np.ndarray, int]:
    """Drop each real packet with drop_prob (at least one always survives),
    permute the survivors, and repack from slot 0 with zero padding.

    Returns the flattened byte sequence and the survivor count, which callers
    need as the new real-packet boundary.
    """
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError(f"drop_prob must be in [0, 1), got {drop_prob}")
    gen, _ = _resolve_rng(rng)
    real = record.real_packet_count

    keep = gen.random(real) >= drop_prob
    if not keep.any():
        keep[gen.integers(real)] = True
    survivors = np.flatnonzero(keep)
    survivors = survivors[gen.permutation(len(survivors))]

    packet_len = record.packet_len
    out = np.zeros(record.max_packets * packet_len, dtype=np.int64)
    for slot, src in enumerate(survivors):
        out[slot * packet_len : (slot + 1) * packet_len] = np.frombuffer(
            record.packets[src].data, dtype=np.uint8
        )
    return out, len(survivors)
