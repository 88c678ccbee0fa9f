"""Command-line entry point: datagen, train-teacher, distill, eval, bench."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bench import speedup_report
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DEFAULT_MAX_SEQ,
    Vocab,
    build_vocab,
    encode_dataset,
    gen_synthetic,
    load_squad_json,
    write_squad_json,
)
from .distill import validate_layer_map
from .encoder import ModelConfig
from .evaluate import evaluate_model
from .train import TrainConfig, distill_student, init_student, train_teacher

logger = logging.getLogger("distilqa")

DEFAULT_VOCAB_CAP = 600


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, ensure_ascii=False), encoding="utf-8")


def _train_config(section: dict, args) -> TrainConfig:
    cfg = dict(section)
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("lr", "learning_rate"),
                      ("batch_size", "batch_size"), ("init_std", "init_std")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    return TrainConfig.from_dict(cfg)


def _model_config(section: dict, vocab_size: int) -> ModelConfig:
    d = dict(section)
    d["vocab"] = vocab_size
    return ModelConfig.from_dict(d)


def _log_path(out: str, explicit: str | None) -> Path:
    return Path(explicit) if explicit else Path(str(out) + ".json")


def cmd_datagen(args) -> dict:
    examples = gen_synthetic(args.examples, args.keys, args.pairs, args.seed)
    write_squad_json(examples, args.out, title=f"synthetic-seed{args.seed}")
    print(f"wrote {len(examples)} synthetic examples ({args.keys} keys, {args.pairs} pairs) to {args.out}")
    return {"examples": len(examples)}


def cmd_train_teacher(args) -> dict:
    conf = _read_json(args.config) if args.config else {}
    cfg = _train_config(conf.get("train", {}), args)
    examples, report = load_squad_json(args.data)
    vocab = build_vocab(examples, int(conf.get("model", {}).get("vocab", DEFAULT_VOCAB_CAP)))
    model_cfg = _model_config(conf.get("model", {}), len(vocab))
    max_seq = min(cfg.max_seq, model_cfg.max_positions)
    encoded, skipped = encode_dataset(examples, vocab, max_seq)
    model, head = init_student(model_cfg, cfg.seed, cfg.init_std)
    result = train_teacher(model, head, encoded, cfg)
    meta = {"role": "teacher", "vocab": vocab.token_to_id, "max_seq": max_seq,
            "train_config": cfg.to_dict(), "log": result.log}
    save_checkpoint(model, head, None, args.out, meta)
    summary = {"checkpoint": str(args.out), "examples": len(encoded), "skipped": skipped + report.skipped,
               "model_config": model_cfg.to_dict(), "train_config": cfg.to_dict(), "log": result.log}
    _write_json(_log_path(args.out, args.log), summary)
    print(f"teacher trained on {len(encoded)} examples; final loss {result.log[-1]['loss']:.4f} -> {args.out}")
    return summary


def _parse_map(choice: str, student_layers: int, teacher_layers: int):
    if choice == "uniform":
        return None
    if choice.startswith("explicit:"):
        payload = _read_json(choice[len("explicit:"):])
        layer_map = payload["layer_map"] if isinstance(payload, dict) else payload
        return validate_layer_map(layer_map, student_layers, teacher_layers)
    raise UsageError(f"--map must be 'uniform' or 'explicit:FILE', got {choice!r}")


def cmd_distill(args) -> dict:
    conf = _read_json(args.student_config)
    cfg = _train_config(conf.get("train", {}), args)
    teacher = load_checkpoint(args.teacher)
    if "vocab" not in teacher.metadata:
        raise ValueError(f"{args.teacher}: checkpoint carries no vocabulary")
    vocab = Vocab(dict(teacher.metadata["vocab"]))
    student_cfg = _model_config(conf.get("model", {}), teacher.config.vocab)
    plan_conf = dict(conf.get("distill", {}))
    plan_conf["layer_map"] = _parse_map(args.map, student_cfg.layers, teacher.config.layers)
    examples, report = load_squad_json(args.data)
    max_seq = min(cfg.max_seq, student_cfg.max_positions, teacher.config.max_positions)
    encoded, skipped = encode_dataset(examples, vocab, max_seq)
    result = distill_student(teacher, student_cfg, encoded, plan_conf, cfg)
    meta = {"role": "student", "vocab": vocab.token_to_id, "max_seq": max_seq, "teacher": str(args.teacher),
            "train_config": cfg.to_dict(), "log": result.log}
    save_checkpoint(result.model, result.head, result.plan, args.out, meta)
    summary = {"checkpoint": str(args.out), "examples": len(encoded), "skipped": skipped + report.skipped,
               "model_config": student_cfg.to_dict(), "plan": result.plan.config_dict(),
               "train_config": cfg.to_dict(), "log": result.log}
    _write_json(_log_path(args.out, args.log), summary)
    print(f"student distilled on {len(encoded)} examples; final loss {result.log[-1]['loss']:.4f} -> {args.out}")
    return summary


def cmd_eval(args) -> dict:
    ckpt = load_checkpoint(args.model)
    vocab = Vocab(dict(ckpt.metadata["vocab"]))
    max_seq = int(ckpt.metadata.get("max_seq", min(DEFAULT_MAX_SEQ, ckpt.config.max_positions)))
    examples, _ = load_squad_json(args.data)
    encoded, skipped = encode_dataset(examples, vocab, max_seq, with_labels=False)
    report = evaluate_model(ckpt.model, ckpt.head, encoded, examples)
    report.save(args.out)
    print(f"F1 {report.f1:.2f}  EM {report.em:.2f}  over {len(report.per_example)} examples "
          f"({skipped} unencodable)")
    return report.to_dict()


def cmd_bench(args) -> dict:
    paths = [p for p in args.models.split(",") if p]
    report = speedup_report(paths, args.reference, args.seq_len, args.runs, args.warmup)
    report.save(args.out)
    print(report.to_text())
    return report.to_dict()


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="distilqa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("datagen", help="write a synthetic key/value QA set in SQuAD format")
    p.add_argument("--examples", type=int, required=True)
    p.add_argument("--keys", type=int, required=True)
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_datagen)

    def train_flags(p):
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--init-std", dest="init_std", type=float)
        p.add_argument("--log", help="where to write the JSON run summary (default OUT.json)")

    p = sub.add_parser("train-teacher", help="fine-tune a teacher on the hard span loss")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    train_flags(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distill a student from a teacher checkpoint")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student-config", dest="student_config", required=True)
    p.add_argument("--map", default="uniform")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    train_flags(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="F1/EM of a checkpoint on a SQuAD-format file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="single-query latency and speedup table")
    p.add_argument("--models", required=True, help="comma-separated checkpoint paths")
    p.add_argument("--reference", required=True, help="reference model name (checkpoint file stem)")
    p.add_argument("--seq-len", dest="seq_len", type=int, default=384)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"distilqa {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
