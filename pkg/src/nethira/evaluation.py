"""Dataset splitting, classification metrics, and experiment drivers.

Metrics are macro-averaged (unweighted class means); any metric whose
denominator is zero is defined as 0, recorded in the report metadata.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import record_to_line
from .ingest import FlowRecord


class ClassTooSmall(Exception):
    """A class has fewer than three records, one per split is impossible."""


class ClassCountMismatch(Exception):
    """Checkpoint classifier width does not cover the test labels."""


@dataclass
class SplitSpec:
    ratios: tuple[int, int, int] = (8, 1, 1)
    per_class_cap: int = 5000
    seed: int = 0

    def __post_init__(self):
        if any(r <= 0 for r in self.ratios):
            raise ValueError("split ratios must be positive")


@dataclass
class MetricsReport:
    confusion: np.ndarray  # rows = true class, columns = predicted class
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    zero_division_convention: str = field(default="metric=0 when denominator=0")

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "per_class": [
                {"precision": float(p), "recall": float(r), "f1": float(f)}
                for p, r, f in zip(self.per_class_precision, self.per_class_recall, self.per_class_f1)
            ],
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "zero_division_convention": self.zero_division_convention,
        }


def compute_metrics(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> MetricsReport:
    """Confusion matrix and per-class / macro precision, recall, F1."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)

    tp = np.diag(confusion).astype(np.float64)
    pred_totals = confusion.sum(axis=0).astype(np.float64)
    true_totals = confusion.sum(axis=1).astype(np.float64)

    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred_totals > 0, tp / pred_totals, 0.0)
        recall = np.where(true_totals > 0, tp / true_totals, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)

    return MetricsReport(
        confusion=confusion,
        per_class_precision=precision,
        per_class_recall=recall,
        per_class_f1=f1,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
    )


def split_dataset(
    records: Sequence[FlowRecord], spec: SplitSpec
) -> tuple[list[FlowRecord], list[FlowRecord], list[FlowRecord]]:
    """Cap each class, shuffle with the spec seed, and partition by the
    ratios; remainder records go to train. Splits are disjoint and exhaustive
    over the capped set."""
    by_class: dict[int, list[int]] = {}
    for idx, rec in enumerate(records):
        if rec.label is None:
            raise ValueError("split_dataset needs labeled records")
        by_class.setdefault(rec.label, []).append(idx)

    for label, idxs in sorted(by_class.items()):
        if len(idxs) < 3:
            raise ClassTooSmall(f"class {label} has {len(idxs)} records, need >= 3")

    gen = np.random.default_rng(spec.seed)
    denom = sum(spec.ratios)
    train_idx: list[int] = []
    val_idx: list[int] = []
    test_idx: list[int] = []
    for label in sorted(by_class):
        idxs = np.array(by_class[label])
        if len(idxs) > spec.per_class_cap:
            idxs = idxs[gen.choice(len(idxs), size=spec.per_class_cap, replace=False)]
        idxs = idxs[gen.permutation(len(idxs))]
        n = len(idxs)
        n_val = max(1, (n * spec.ratios[1]) // denom)
        n_test = max(1, (n * spec.ratios[2]) // denom)
        test_idx.extend(idxs[:n_test].tolist())
        val_idx.extend(idxs[n_test : n_test + n_val].tolist())
        train_idx.extend(idxs[n_test + n_val :].tolist())

    return (
        [records[i] for i in sorted(train_idx)],
        [records[i] for i in sorted(val_idx)],
        [records[i] for i in sorted(test_idx)],
    )


def dataset_digest(records: Sequence[FlowRecord]) -> str:
    h = hashlib.sha256()
    for rec in records:
        h.update(record_to_line(rec).encode("ascii"))
        h.update(b"\n")
    return h.hexdigest()


def evaluate(ckpt, test_records: Sequence[FlowRecord], batch_size: int = 64) -> MetricsReport:
    """Argmax predictions of the checkpointed classifier over a labeled test
    set, reduced to a MetricsReport."""
    from .training import build_model, predict

    n_classes = ckpt.config.n_classes
    if n_classes is None:
        raise ClassCountMismatch("checkpoint has no classifier head")
    labels = np.array([r.label for r in test_records], dtype=np.int64)
    if labels.size and labels.max() >= n_classes:
        raise ClassCountMismatch(f"test labels reach {labels.max()}, classifier has {n_classes} classes")

    model = build_model(ckpt)
    preds = predict(model, list(test_records), batch_size=batch_size)
    return compute_metrics(labels, preds, n_classes)


def run_limited_label_sweep(
    init_ckpt,
    records: Sequence[FlowRecord],
    fractions: Sequence[float],
    finetune_config,
    split_spec: SplitSpec | None = None,
) -> list[dict]:
    """Fine-tune on stratified label subsets and evaluate on the fixed test
    split; one row per fraction."""
    from dataclasses import replace

    from .training import finetune

    split_spec = split_spec or SplitSpec()
    train, val, test = split_dataset(records, split_spec)
    test_hash = dataset_digest(test)

    rows = []
    for fraction in sorted(fractions):
        cfg = replace(finetune_config, label_fraction=fraction)
        ckpt, _ = finetune(cfg, init_ckpt, train, val)
        report = evaluate(ckpt, test)
        rows.append({"fraction": fraction, "macro_f1": report.macro_f1, "test_hash": test_hash})
    return rows


def run_ablation(
    records: Sequence[FlowRecord],
    modes: Sequence[str],
    finetune_config,
    pretrain_config=None,
    init_full=None,
    init_byte=None,
    split_spec: SplitSpec | None = None,
) -> list[dict]:
    """Run each training mode with shared seeds and splits.

    full / sup_only start from the full pre-trained checkpoint,
    byte_only_pretrain from a byte-task-only checkpoint, from_scratch from
    random init. Checkpoints are pre-trained here unless supplied.
    """
    from dataclasses import replace

    from .training import FinetuneMode, finetune, pretrain

    split_spec = split_spec or SplitSpec()
    train, val, test = split_dataset(records, split_spec)
    test_hash = dataset_digest(test)

    modes = [FinetuneMode(m) for m in modes]
    needs_full = any(m in (FinetuneMode.FULL, FinetuneMode.SUP_ONLY) for m in modes)
    needs_byte = FinetuneMode.BYTE_ONLY_PRETRAIN in modes
    if needs_full and init_full is None:
        if pretrain_config is None:
            raise ValueError("ablation needs init_full or a pretrain_config")
        init_full, _ = pretrain(pretrain_config, [r for r in train])
    if needs_byte and init_byte is None:
        if pretrain_config is None:
            raise ValueError("ablation needs init_byte or a pretrain_config")
        init_byte, _ = pretrain(replace(pretrain_config, tasks=("byte",)), [r for r in train])

    rows = []
    for mode in modes:
        cfg = replace(finetune_config, mode=mode)
        if mode is FinetuneMode.FROM_SCRATCH:
            init = None
            if cfg.model is None and init_full is not None:
                cfg = replace(cfg, model=replace(init_full.config, n_classes=None))
        elif mode is FinetuneMode.BYTE_ONLY_PRETRAIN:
            init = init_byte
        else:
            init = init_full
        ckpt, _ = finetune(cfg, init, train, val)
        report = evaluate(ckpt, test)
        rows.append({"mode": mode.value, "macro_f1": report.macro_f1, "test_hash": test_hash})
    return rows
