"""Command-line interface.

Subcommands: preprocess, pretrain, finetune, eval, sweep, ablate, fields,
synth. A TOML/JSON config file supplies defaults per section ([model],
[pretrain], [finetune], [split]); explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import config_hash, load_config, write_run_manifest
from .dataset import read_dataset, read_manifest, write_dataset
from .evaluation import SplitSpec, evaluate, run_ablation, run_limited_label_sweep, split_dataset
from .ingest import DEFAULT_MAX_PACKETS, DEFAULT_PACKET_LEN, pipeline
from .model import ModelConfig
from .pcap import read_pcap
from .protocol_map import parse_fields
from .training import (
    FinetuneConfig,
    FinetuneMode,
    PretrainConfig,
    finetune,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)


def _merge_dataclass(cls, section: dict, overrides: dict):
    """Build a dataclass from config-file section values plus explicit CLI
    overrides (overrides win; unknown file keys are rejected)."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise SystemExit(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    merged = {**section, **{k: v for k, v in overrides.items() if v is not None}}
    return cls(**merged)


def _model_config(file_cfg: dict, max_len: int | None = None) -> ModelConfig:
    section = dict(file_cfg.get("model", {}))
    if max_len is not None:
        section["max_len"] = max_len
    return ModelConfig(**section)


def _read_records(path: str, expect_labels: bool = False):
    records = read_dataset(path)
    if not records:
        raise SystemExit(f"{path}: empty dataset")
    if expect_labels and any(r.label is None for r in records):
        raise SystemExit(f"{path}: dataset has unlabeled records")
    return records


def _seq_geometry(path: str) -> tuple[int, int]:
    manifest = read_manifest(path)
    if manifest:
        return manifest["m"], manifest["l"]
    records = read_dataset(path)
    return records[0].max_packets, records[0].packet_len


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row[c] for c in columns})


# ---- subcommands ------------------------------------------------------------


def cmd_preprocess(args, file_cfg):
    pcap_root = Path(args.pcap_dir)
    pcap_files = sorted(pcap_root.rglob("*.pcap"))
    if not pcap_files:
        raise SystemExit(f"no .pcap files under {pcap_root}")

    class_names: dict[str, int] = {}
    if args.label_from_dirname:
        names = sorted({p.relative_to(pcap_root).parts[0] for p in pcap_files if len(p.relative_to(pcap_root).parts) > 1})
        class_names = {name: i for i, name in enumerate(names)}

    mode = "unidirectional" if args.unidirectional else "bidirectional"
    records = []
    total_packets = skipped = 0
    raw_flow_lengths: list[int] = []
    for path in pcap_files:
        label = None
        if args.label_from_dirname:
            parts = path.relative_to(pcap_root).parts
            label = class_names.get(parts[0]) if len(parts) > 1 else None
        packets = read_pcap(path)
        total_packets += len(packets)
        file_records, table = pipeline(packets, args.m, args.l, mode=mode, label=label)
        skipped += table.skipped
        raw_flow_lengths.extend(len(flow) for flow in table.flows.values())
        records.extend(file_records)

    anpf = float(np.mean(raw_flow_lengths)) if raw_flow_lengths else 0.0
    cfg = {"m": args.m, "l": args.l, "mode": mode, "label_from_dirname": bool(args.label_from_dirname)}
    stats = {
        "flows": len(records),
        "packets": total_packets,
        "skipped_packets": skipped,
        "anpf": anpf,
    }
    write_dataset(args.out, records, args.m, args.l, class_names, config_hash(cfg), stats=stats)
    print(f"wrote {len(records)} flows to {args.out} (m={args.m}, l={args.l}, anpf={anpf:.2f}, skipped={skipped})")


def cmd_fields(args, file_cfg):
    records = _read_records(args.dataset)
    if not 0 <= args.flow < len(records):
        raise SystemExit(f"flow index {args.flow} out of range [0, {len(records)})")
    record = records[args.flow]
    if not 0 <= args.packet < record.max_packets:
        raise SystemExit(f"packet index {args.packet} out of range [0, {record.max_packets})")
    span_map = parse_fields(record.packets[args.packet], packet_index=args.packet)
    print(f"flow {args.flow} packet {args.packet}: header_end={span_map.header_end}")
    print(f"{'offset':>6} {'length':>6} {'layer':<5} name")
    for span in span_map.spans:
        print(f"{span.offset:>6} {span.length:>6} {span.layer:<5} {span.name}")


def cmd_pretrain(args, file_cfg):
    records = _read_records(args.corpus)
    m, l = _seq_geometry(args.corpus)
    overrides = {
        "steps": args.steps,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "seed": args.seed,
        "warmup_steps": args.warmup_steps,
    }
    if args.tasks:
        overrides["tasks"] = tuple(args.tasks.split(","))
    section = dict(file_cfg.get("pretrain", {}))
    section.pop("model", None)
    config = _merge_dataclass(PretrainConfig, section, overrides)
    config.model = _model_config(file_cfg, max_len=m * l)

    log_path = args.log or str(args.out) + ".loss.csv"
    ckpt, _ = pretrain(config, records, log_path=log_path)
    save_checkpoint(ckpt, args.out)
    write_run_manifest(
        Path(str(args.out) + ".run.json"), "pretrain",
        {**dataclasses.asdict(config), "model": config.model.to_dict()},
        {"corpus": args.corpus},
    )
    print(f"pre-trained {config.steps} steps -> {args.out} (loss log: {log_path})")


def cmd_finetune(args, file_cfg):
    train_records = _read_records(args.train, expect_labels=True)
    val_records = _read_records(args.val, expect_labels=True)
    mode = FinetuneMode(args.mode.replace("-", "_"))
    overrides = {
        "epochs": args.epochs,
        "lr": args.lr,
        "consistency_weight": args.consistency_weight,
        "label_fraction": args.label_fraction,
        "batch_size": args.batch_size,
        "drop_prob": args.drop_prob,
        "seed": args.seed,
        "mode": mode,
    }
    section = dict(file_cfg.get("finetune", {}))
    section.pop("model", None)
    config = _merge_dataclass(FinetuneConfig, section, overrides)

    init = None
    if mode is not FinetuneMode.FROM_SCRATCH:
        if not args.init:
            raise SystemExit(f"--init is required for mode {args.mode}")
        init = load_checkpoint(args.init)
    elif args.init:
        init = load_checkpoint(args.init)
    if init is None:
        m, l = _seq_geometry(args.train)
        config.model = _model_config(file_cfg, max_len=m * l)

    log_path = args.log or str(args.out) + ".loss.csv"
    ckpt, _ = finetune(config, init, train_records, val_records, log_path=log_path)
    save_checkpoint(ckpt, args.out)
    write_run_manifest(
        Path(str(args.out) + ".run.json"), "finetune",
        {**{k: v for k, v in dataclasses.asdict(config).items() if k != "model"}, "mode": mode.value},
        {"train": args.train, "val": args.val},
    )
    print(f"fine-tuned {config.epochs} epochs (mode={mode.value}) -> {args.out}")


def cmd_eval(args, file_cfg):
    ckpt = load_checkpoint(args.ckpt)
    test_records = _read_records(args.test, expect_labels=True)
    report = evaluate(ckpt, test_records)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    rows = [
        {
            "class": i,
            "precision": float(report.per_class_precision[i]),
            "recall": float(report.per_class_recall[i]),
            "f1": float(report.per_class_f1[i]),
        }
        for i in range(len(report.per_class_f1))
    ]
    rows.append({"class": "macro", "precision": report.macro_precision, "recall": report.macro_recall, "f1": report.macro_f1})
    _write_csv(out_dir / "metrics.csv", rows, ["class", "precision", "recall", "f1"])
    write_run_manifest(out_dir / "run.json", "eval", {"ckpt": str(args.ckpt)}, {"test": args.test})
    print(f"macro: precision={report.macro_precision:.4f} recall={report.macro_recall:.4f} f1={report.macro_f1:.4f}")


def _finetune_config_from(file_cfg, args) -> FinetuneConfig:
    overrides = {
        "epochs": getattr(args, "epochs", None),
        "lr": getattr(args, "lr", None),
        "batch_size": getattr(args, "batch_size", None),
        "seed": args.seed,
    }
    section = dict(file_cfg.get("finetune", {}))
    section.pop("model", None)
    return _merge_dataclass(FinetuneConfig, section, overrides)


def cmd_sweep(args, file_cfg):
    init = load_checkpoint(args.init)
    records = _read_records(args.dataset, expect_labels=True)
    fractions = [float(f) for f in args.fractions.split(",")]
    config = _finetune_config_from(file_cfg, args)
    spec = _merge_dataclass(SplitSpec, dict(file_cfg.get("split", {})), {"seed": args.seed})
    rows = run_limited_label_sweep(init, records, fractions, config, spec)
    out_dir = Path(args.out_dir)
    _write_csv(out_dir / "sweep.csv", rows, ["fraction", "macro_f1", "test_hash"])
    write_run_manifest(
        out_dir / "run.json", "sweep",
        {"fractions": fractions, **{k: v for k, v in dataclasses.asdict(config).items() if k != "model"}},
        {"dataset": args.dataset},
    )
    print(f"wrote {out_dir / 'sweep.csv'}")


def cmd_ablate(args, file_cfg):
    records = _read_records(args.dataset, expect_labels=True)
    modes = [m.replace("-", "_") for m in args.modes.split(",")]
    config = _finetune_config_from(file_cfg, args)
    spec = _merge_dataclass(SplitSpec, dict(file_cfg.get("split", {})), {"seed": args.seed})

    init_full = load_checkpoint(args.init_full) if args.init_full else None
    init_byte = load_checkpoint(args.init_byte) if args.init_byte else None
    pretrain_cfg = None
    if init_full is None or init_byte is None:
        m, l = _seq_geometry(args.dataset)
        section = dict(file_cfg.get("pretrain", {}))
        section.pop("model", None)
        pretrain_cfg = _merge_dataclass(
            PretrainConfig, section, {"steps": args.pretrain_steps, "seed": args.seed}
        )
        pretrain_cfg.model = _model_config(file_cfg, max_len=m * l)
        config.model = pretrain_cfg.model
    elif init_full is not None:
        config.model = dataclasses.replace(init_full.config, n_classes=None)

    rows = run_ablation(records, modes, config, pretrain_cfg, init_full, init_byte, spec)
    out_dir = Path(args.out_dir)
    _write_csv(out_dir / "ablation.csv", rows, ["mode", "macro_f1", "test_hash"])
    write_run_manifest(
        out_dir / "run.json", "ablate",
        {"modes": modes, **{k: v for k, v in dataclasses.asdict(config).items() if k != "model"}},
        {"dataset": args.dataset},
    )
    print(f"wrote {out_dir / 'ablation.csv'}")


def cmd_synth(args, file_cfg):
    from .synthetic import write_pcap_tree

    root = write_pcap_tree(args.out_dir, args.flows_per_class, seed=args.seed or 0)
    print(f"wrote synthetic capture tree under {root}")


def cmd_split(args, file_cfg):
    records = _read_records(args.dataset, expect_labels=True)
    spec = _merge_dataclass(SplitSpec, dict(file_cfg.get("split", {})), {"seed": args.seed})
    train, val, test = split_dataset(records, spec)
    m, l = _seq_geometry(args.dataset)
    manifest = read_manifest(args.dataset) or {}
    out = Path(args.out_prefix)
    out.parent.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train), ("val", val), ("test", test)):
        write_dataset(f"{out}.{name}.jsonl", part, m, l, manifest.get("classes", {}), manifest.get("config_hash"))
    print(f"split {len(records)} flows into {len(train)}/{len(val)}/{len(test)} at {out}.*.jsonl")


# ---- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nethira", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="TOML or JSON config file with section defaults")
    parser.add_argument("--seed", type=int, default=None, help="global RNG seed override")
    parser.add_argument("--deterministic", action="store_true", help="force deterministic torch kernels")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="pcap directory -> normalized flow dataset")
    p.add_argument("--pcap-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=int, default=DEFAULT_MAX_PACKETS, help="packets kept per flow")
    p.add_argument("--l", type=int, default=DEFAULT_PACKET_LEN, help="bytes kept per packet")
    p.add_argument("--unidirectional", action="store_true", help="literal five-tuple flows instead of sessions")
    p.add_argument("--label-from-dirname", action="store_true", help="label flows by first path component")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("fields", help="print the header field spans of one packet")
    p.add_argument("--dataset", required=True)
    p.add_argument("--flow", type=int, required=True)
    p.add_argument("--packet", type=int, required=True)
    p.set_defaults(func=cmd_fields)

    p = sub.add_parser("pretrain", help="masked-reconstruction pre-training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--warmup-steps", type=int, default=None)
    p.add_argument("--tasks", default=None, help="comma subset of byte,protocol,packet")
    p.add_argument("--log", default=None, help="loss log CSV path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="classification fine-tuning")
    p.add_argument("--init", default=None, help="initial checkpoint")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="full", choices=["full", "sup-only", "from-scratch", "byte-only-pretrain"])
    p.add_argument("--label-fraction", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--consistency-weight", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--drop-prob", type=float, default=None)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a labeled test set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="limited-label fine-tuning sweep")
    p.add_argument("--init", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--fractions", default="0.01,0.02,0.05,0.1")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="compare training modes on shared splits")
    p.add_argument("--dataset", required=True)
    p.add_argument("--modes", default="full,sup-only,from-scratch,byte-only-pretrain")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--init-full", default=None, help="full pre-trained checkpoint (pre-trains here if absent)")
    p.add_argument("--init-byte", default=None, help="byte-task-only checkpoint")
    p.add_argument("--pretrain-steps", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("split", help="materialize train/val/test dataset files")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth", help="generate a synthetic labeled capture tree")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--flows-per-class", type=int, default=100)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.deterministic:
        import torch

        torch.use_deterministic_algorithms(True)
    file_cfg = load_config(args.config) if args.config else {}
    args.func(args, file_cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
