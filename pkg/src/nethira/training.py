"""Pre-training and fine-tuning loops, optimizer plumbing, checkpoints.

Pre-training optimizes the sum of the three reconstruction losses; each flow
in a batch contributes one sample per corruption kind (flows with a single
real packet substitute a byte sample for the packet task). Fine-tuning
optimizes cross-entropy on the clean view plus weighted KL consistency
against the protocol- and packet-augmented views.

Checkpoints are a versioned container: an 8-byte magic, a canonical JSON
header (config, step, rng state, tensor index), then raw little-endian tensor
payloads. Loading and re-saving is byte-stable.
"""

from __future__ import annotations

import base64
import json
import logging
import math
import struct
from dataclasses import dataclass, field, asdict, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corruption import (
    TooFewPackets,
    augment_packet,
    augment_protocol,
    corrupt_byte,
    corrupt_packet,
    corrupt_protocol,
)
from .ingest import FlowRecord, flatten
from .model import ClassifierOutput, ModelConfig, TrafficModel, finetune_loss, reconstruction_loss
from .protocol_map import parse_fields

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NTCKPT01"
CHECKPOINT_VERSION = 1


class EmptyCorpus(Exception):
    """Training requires at least one flow."""


class NonFiniteLoss(Exception):
    """A loss term became NaN or infinite; aborts with diagnostics."""


class MissingInit(Exception):
    """Fine-tuning modes other than from-scratch need an initial checkpoint."""


class LabelMismatch(Exception):
    """A label falls outside [0, n_classes)."""


class VersionMismatch(Exception):
    """Checkpoint was written by an incompatible format version."""


class CorruptFile(Exception):
    """Checkpoint file is truncated or malformed."""


class FinetuneMode(str, Enum):
    FULL = "full"
    SUP_ONLY = "sup_only"
    FROM_SCRATCH = "from_scratch"
    BYTE_ONLY_PRETRAIN = "byte_only_pretrain"


PRETRAIN_TASKS = ("byte", "protocol", "packet")


@dataclass
class PretrainConfig:
    steps: int = 100_000
    lr: float = 1e-4
    batch_size: int = 32
    warmup_steps: int | None = None  # defaults to steps // 10
    seed: int = 0
    mask_ratio: float = 0.15
    protocol_k: int = 4
    protocol_spans: int = 8
    vicinity_jitter: int = 1
    packet_mask_ratio: float = 0.15
    tasks: tuple[str, ...] = PRETRAIN_TASKS
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        unknown = set(self.tasks) - set(PRETRAIN_TASKS)
        if unknown:
            raise ValueError(f"unknown pre-training tasks: {sorted(unknown)}")


@dataclass
class FinetuneConfig:
    epochs: int = 10
    lr: float = 2e-5
    consistency_weight: float = 0.1
    label_fraction: float = 1.0
    mode: FinetuneMode = FinetuneMode.FULL
    seed: int = 0
    batch_size: int = 32
    drop_prob: float = 0.2
    shuffle_within_layer: bool = False
    stop_grad_raw: bool = False
    model: ModelConfig | None = None  # required for from-scratch runs

    def __post_init__(self):
        if self.consistency_weight < 0:
            raise ValueError("consistency_weight must be >= 0")
        if not 0 < self.label_fraction <= 1:
            raise ValueError("label_fraction must be in (0, 1]")
        self.mode = FinetuneMode(self.mode)


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    parameters: dict[str, np.ndarray]
    step: int = 0
    rng_state: bytes = b""


# ---- checkpoint container ---------------------------------------------------


def checkpoint_from_model(model: TrafficModel, step: int) -> ModelCheckpoint:
    params = {name: tensor.detach().cpu().numpy().copy() for name, tensor in model.state_dict().items()}
    return ModelCheckpoint(
        config=model.config,
        parameters=params,
        step=step,
        rng_state=bytes(torch.get_rng_state().numpy().tobytes()),
    )


def build_model(ckpt: ModelCheckpoint) -> TrafficModel:
    model = TrafficModel(ckpt.config)
    state = {name: torch.from_numpy(arr.copy()) for name, arr in ckpt.parameters.items()}
    model.load_state_dict(state)
    model.eval()
    return model


def save_checkpoint(ckpt: ModelCheckpoint, path: str | Path) -> None:
    tensors = []
    payload = bytearray()
    for name, arr in ckpt.parameters.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        tensors.append(
            {
                "name": name,
                "dtype": le.dtype.str,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload += raw

    header = {
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "rng_state": base64.b64encode(ckpt.rng_state).decode("ascii"),
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 8 or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptFile(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack("<Q", data[8:16])
    header_end = 16 + header_len
    if header_end > len(data):
        raise CorruptFile(f"{path}: truncated header")
    try:
        header = json.loads(data[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: format version {header.get('version')}, expected {CHECKPOINT_VERSION}")

    payload = data[header_end:]
    parameters: dict[str, np.ndarray] = {}
    for spec in header["tensors"]:
        end = spec["offset"] + spec["nbytes"]
        if end > len(payload):
            raise CorruptFile(f"{path}: truncated tensor payload for {spec['name']}")
        arr = np.frombuffer(payload[spec["offset"] : end], dtype=np.dtype(spec["dtype"]))
        parameters[spec["name"]] = arr.reshape(spec["shape"]).copy()

    return ModelCheckpoint(
        config=ModelConfig.from_dict(header["config"]),
        parameters=parameters,
        step=header["step"],
        rng_state=base64.b64decode(header["rng_state"]),
    )


# ---- shared helpers ---------------------------------------------------------


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _field_maps(record: FlowRecord):
    return [parse_fields(p, packet_index=i) for i, p in enumerate(record.packets)]


def _batch_task_loss(model: TrafficModel, samples) -> torch.Tensor:
    """Mean over the batch of per-sample reconstruction-loss sums."""
    inputs = torch.from_numpy(np.stack([s.input_tokens for s in samples]))
    targets = torch.from_numpy(np.stack([s.target_tokens for s in samples]))
    mask = np.zeros(targets.shape, dtype=bool)
    for i, s in enumerate(samples):
        mask[i, s.plan.masked_positions] = True
    logits = model.reconstruct(inputs, targets)
    return reconstruction_loss(logits, targets, torch.from_numpy(mask)) / len(samples)


def _fused_pretrain_losses(model: TrafficModel, task_samples: dict[str, list]) -> dict[str, torch.Tensor]:
    """Per-task batch losses from one forward pass over the concatenated task
    batches. Equals _batch_task_loss per task (samples are independent under
    attention); vocabulary logits are only computed at masked positions."""
    tasks = list(task_samples)
    all_samples = [s for t in tasks for s in task_samples[t]]
    inputs = torch.from_numpy(np.stack([s.input_tokens for s in all_samples]))
    targets = torch.from_numpy(np.stack([s.target_tokens for s in all_samples]))
    mask = np.zeros(targets.shape, dtype=bool)
    for i, s in enumerate(all_samples):
        mask[i, s.plan.masked_positions] = True

    counts = mask.sum(axis=1)
    task_of_sample = np.repeat(np.arange(len(tasks)), [len(task_samples[t]) for t in tasks])
    row_task = torch.from_numpy(np.repeat(task_of_sample, counts))
    mask_t = torch.from_numpy(mask)

    memory = model.encode(model.embed(inputs))
    hidden = model.decode_hidden(memory, model.shift_right(targets))
    logits = model.recon_head(hidden[mask_t])
    nll = F.cross_entropy(logits, targets[mask_t], reduction="none")
    sums = torch.zeros(len(tasks), dtype=nll.dtype).index_add_(0, row_task, nll)
    return {t: sums[i] / len(task_samples[t]) for i, t in enumerate(tasks)}


def _check_finite(step: int, parts: dict[str, float]) -> None:
    if not all(math.isfinite(v) for v in parts.values()):
        raise NonFiniteLoss(f"non-finite loss at step {step}: {parts}")


def stratified_subsample(records: Sequence[FlowRecord], fraction: float, seed: int) -> list[FlowRecord]:
    """Keep ceil(fraction * count) records per class (at least one), sampled
    uniformly per class; original record order is preserved."""
    if fraction >= 1.0:
        return list(records)
    by_class: dict[int, list[int]] = {}
    for idx, rec in enumerate(records):
        by_class.setdefault(rec.label, []).append(idx)
    gen = np.random.default_rng(seed)
    chosen: list[int] = []
    for label in sorted(by_class):
        idxs = by_class[label]
        n = max(1, math.ceil(fraction * len(idxs)))
        picked = gen.choice(len(idxs), size=n, replace=False)
        chosen.extend(idxs[j] for j in picked)
    return [records[i] for i in sorted(chosen)]


# ---- pre-training -----------------------------------------------------------


def pretrain(
    config: PretrainConfig,
    corpus: Sequence[FlowRecord],
    log_path: str | Path | None = None,
) -> tuple[ModelCheckpoint, list[dict]]:
    """Run `config.steps` optimizer updates of the summed reconstruction
    objective; returns the checkpoint and a per-step loss log."""
    if not corpus:
        raise EmptyCorpus("pre-training corpus is empty")

    torch.manual_seed(config.seed)
    model = TrafficModel(config.model)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999))
    warmup = config.warmup_steps if config.warmup_steps is not None else max(1, config.steps // 10)

    maps = [_field_maps(rec) for rec in corpus]
    log_rows: list[dict] = []

    for step in range(config.steps):
        gen = np.random.default_rng(_derive_seed(config.seed, 1, step))
        batch_idx = gen.choice(len(corpus), size=min(config.batch_size, len(corpus)), replace=len(corpus) < config.batch_size)

        task_samples: dict[str, list] = {name: [] for name in config.tasks}
        for j, rec_idx in enumerate(batch_idx):
            rec = corpus[rec_idx]
            for t_num, task in enumerate(config.tasks):
                seed = _derive_seed(config.seed, 2, step, j, t_num)
                if task == "byte":
                    task_samples[task].append(corrupt_byte(rec, config.mask_ratio, seed))
                elif task == "protocol":
                    task_samples[task].append(
                        corrupt_protocol(
                            rec,
                            maps[rec_idx],
                            span_len=config.protocol_k,
                            n_spans=config.protocol_spans,
                            vicinity_jitter=config.vicinity_jitter,
                            rng=seed,
                        )
                    )
                else:
                    try:
                        task_samples[task].append(corrupt_packet(rec, config.packet_mask_ratio, seed))
                    except TooFewPackets:
                        task_samples[task].append(corrupt_byte(rec, config.packet_mask_ratio, seed))

        for group in optimizer.param_groups:
            group["lr"] = config.lr * min(1.0, (step + 1) / warmup)

        optimizer.zero_grad()
        losses = _fused_pretrain_losses(model, task_samples)
        parts = {name: float(losses[name].detach()) if name in losses else 0.0 for name in PRETRAIN_TASKS}
        _check_finite(step, parts)
        total = sum(losses.values())
        total.backward()
        optimizer.step()

        log_rows.append(
            {"step": step, "l_byte": parts["byte"], "l_protocol": parts["protocol"], "l_packet": parts["packet"]}
        )

    if log_path is not None:
        write_loss_log(log_path, log_rows, ["step", "l_byte", "l_protocol", "l_packet"])

    model.eval()
    return checkpoint_from_model(model, step=config.steps), log_rows


# ---- fine-tuning ------------------------------------------------------------


def _classifier_inputs(records: Sequence[FlowRecord]):
    tokens = np.stack([flatten(r).astype(np.int64) for r in records])
    real_pos = np.array([r.real_packet_count * r.packet_len for r in records], dtype=np.int64)
    return tokens, real_pos


def predict(model: TrafficModel, records: Sequence[FlowRecord], batch_size: int = 64) -> np.ndarray:
    """Argmax class predictions for a list of records."""
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            tokens, real_pos = _classifier_inputs(chunk)
            out = model.classify(torch.from_numpy(tokens), torch.from_numpy(real_pos))
            preds.append(out.probs.argmax(dim=-1).numpy())
    return np.concatenate(preds)


def finetune(
    config: FinetuneConfig,
    init: ModelCheckpoint | None,
    train_records: Sequence[FlowRecord],
    val_records: Sequence[FlowRecord],
    log_path: str | Path | None = None,
) -> tuple[ModelCheckpoint, list[dict]]:
    """Fine-tune for classification; returns the best-validation checkpoint
    (macro-F1) and a per-epoch loss log."""
    from .evaluation import compute_metrics  # local import to avoid a cycle

    if config.mode is not FinetuneMode.FROM_SCRATCH and init is None:
        raise MissingInit(f"mode {config.mode.value} requires an initial checkpoint")
    if not train_records or not val_records:
        raise EmptyCorpus("fine-tuning needs non-empty train and validation sets")

    labels = [r.label for r in train_records] + [r.label for r in val_records]
    if any(lab is None or lab < 0 for lab in labels):
        raise LabelMismatch("all fine-tuning records must carry a non-negative label")

    if init is not None and init.config.n_classes is not None:
        n_classes = init.config.n_classes
        if max(labels) >= n_classes:
            raise LabelMismatch(f"label {max(labels)} outside [0, {n_classes})")
    else:
        n_classes = max(labels) + 1

    torch.manual_seed(config.seed)
    if config.mode is FinetuneMode.FROM_SCRATCH and init is None:
        if config.model is None:
            raise MissingInit("from-scratch fine-tuning needs FinetuneConfig.model")
        model = TrafficModel(replace(config.model, n_classes=n_classes))
    else:
        model = TrafficModel(replace(init.config, n_classes=n_classes))
        own_state = model.state_dict()
        for name, arr in init.parameters.items():
            if name in own_state and tuple(own_state[name].shape) == arr.shape:
                own_state[name] = torch.from_numpy(arr.copy())
        model.load_state_dict(own_state)

    train_records = stratified_subsample(train_records, config.label_fraction, config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999))
    use_consistency = config.mode is not FinetuneMode.SUP_ONLY
    consistency_weight = 0.0 if config.mode is FinetuneMode.SUP_ONLY else config.consistency_weight

    maps = [_field_maps(rec) for rec in train_records]
    tokens_all, real_pos_all = _classifier_inputs(train_records)
    labels_all = np.array([r.label for r in train_records], dtype=np.int64)
    packet_len = train_records[0].packet_len

    best_state = None
    best_f1 = -1.0
    best_epoch = -1
    log_rows: list[dict] = []

    for epoch in range(config.epochs):
        model.train()
        order = np.random.default_rng(_derive_seed(config.seed, 3, epoch)).permutation(len(train_records))
        sup_sum = cons_sum = 0.0
        n_batches = 0

        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            x_raw = torch.from_numpy(tokens_all[idx])
            real_pos = torch.from_numpy(real_pos_all[idx])
            y = torch.from_numpy(labels_all[idx])

            optimizer.zero_grad()
            if use_consistency:
                proto_rows, packet_rows, packet_pos = [], [], []
                for rec_idx in idx:
                    rec = train_records[rec_idx]
                    proto_rows.append(
                        augment_protocol(
                            rec,
                            maps[rec_idx],
                            _derive_seed(config.seed, 4, epoch, int(rec_idx)),
                            within_layer=config.shuffle_within_layer,
                        )
                    )
                    aug, survivors = augment_packet(rec, config.drop_prob, _derive_seed(config.seed, 5, epoch, int(rec_idx)))
                    packet_rows.append(aug)
                    packet_pos.append(survivors * packet_len)
                # One batched forward over the three views; samples are
                # independent under attention, so this equals three calls.
                all_tokens = torch.cat([x_raw, torch.from_numpy(np.stack(proto_rows)), torch.from_numpy(np.stack(packet_rows))])
                all_pos = torch.cat([real_pos, real_pos, torch.tensor(packet_pos, dtype=torch.long)])
                out_all = model.classify(all_tokens, all_pos)
                b = len(idx)
                out_raw = ClassifierOutput(out_all.logits[:b])
                out_proto = ClassifierOutput(out_all.logits[b : 2 * b])
                out_packet = ClassifierOutput(out_all.logits[2 * b :])
                total, sup, cons = finetune_loss(
                    out_raw, out_proto, out_packet, y, consistency_weight, stop_grad_raw=config.stop_grad_raw
                )
            else:
                out_raw = model.classify(x_raw, real_pos)
                total, sup, cons = finetune_loss(out_raw, out_raw, out_raw, y, 0.0)
                cons = torch.zeros(())
            _check_finite(epoch, {"sup": float(sup), "cons": float(cons)})
            total.backward()
            optimizer.step()
            sup_sum += float(sup.detach())
            cons_sum += float(cons.detach())
            n_batches += 1

        val_pred = predict(model, val_records, batch_size=max(config.batch_size, 64))
        val_true = np.array([r.label for r in val_records], dtype=np.int64)
        val_f1 = compute_metrics(val_true, val_pred, n_classes).macro_f1

        log_rows.append(
            {
                "epoch": epoch,
                "l_sup": sup_sum / max(1, n_batches),
                "l_cons": cons_sum / max(1, n_batches),
                "val_f1": val_f1,
            }
        )
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_epoch = epoch
            best_state = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}

    if log_path is not None:
        write_loss_log(log_path, log_rows, ["epoch", "l_sup", "l_cons", "val_f1"])

    ckpt = ModelCheckpoint(
        config=model.config,
        parameters=best_state,
        step=best_epoch,
        rng_state=bytes(torch.get_rng_state().numpy().tobytes()),
    )
    return ckpt, log_rows


def write_loss_log(path: str | Path, rows: list[dict], columns: list[str]) -> None:
    with Path(path).open("w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in columns) + "\n")
