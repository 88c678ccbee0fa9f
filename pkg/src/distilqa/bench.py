"""Parameter accounting and single-query inference latency."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import Checkpoint, load_checkpoint
from .data import CLS_ID, SEP_ID
from .encoder import SequenceLengthError, count_params, forward
from .qa import head_param_count, span_logits

DEFAULT_SEQ_LEN = 384


class ReportError(ValueError):
    pass


@dataclass
class LatencyResult:
    mean_ms: float
    std_ms: float
    samples_ms: list[float]

    def __iter__(self):
        # Unpacks as (mean, std).
        return iter((self.mean_ms, self.std_ms))


def _as_checkpoint(ckpt) -> Checkpoint:
    return ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt, dtype=np.float32)


def _query(vocab: int, seq_len: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    ids = rng.integers(4, max(vocab, 5), size=(1, seq_len))
    ids[0, 0] = CLS_ID
    ids[0, -1] = SEP_ID
    return np.minimum(ids, vocab - 1)


def measure_latency(checkpoint, seq_len: int = DEFAULT_SEQ_LEN, runs: int = 10, warmup: int = 3,
                    seed: int = 0) -> LatencyResult:
    """Time ``runs`` batch-1 forward passes (encoder plus span head).

    Runs in float32 on a single BLAS thread, after ``warmup`` untimed passes.
    The checkpoint's own tensors are never modified; a float32 copy is timed.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    ckpt = _as_checkpoint(checkpoint)
    if seq_len > ckpt.config.max_positions:
        raise SequenceLengthError(f"seq_len {seq_len} exceeds max_positions {ckpt.config.max_positions}")
    model = ckpt.model.astype(np.float32).requires_grad_(False)
    head = ckpt.head.astype(np.float32).requires_grad_(False)
    ids = _query(ckpt.config.vocab, seq_len, seed)
    mask = np.ones_like(ids, dtype=bool)
    span = mask.copy()

    def once():
        trace = forward(model, ids, mask)
        span_logits(trace.last_hidden, head, span)

    samples = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            once()
        for _ in range(runs):
            t0 = time.perf_counter_ns()
            once()
            samples.append((time.perf_counter_ns() - t0) / 1e6)
    arr = np.asarray(samples)
    return LatencyResult(float(arr.mean()), float(arr.std()), samples)


@dataclass
class BenchRow:
    name: str
    layers: int
    hidden: int
    ff: int
    params: int
    latency_ms_mean: float
    latency_ms_std: float
    speedup: float
    latency_ms_samples: list[float] = field(default_factory=list)


@dataclass
class BenchReport:
    reference: str
    seq_len: int
    runs: int
    models: list[BenchRow]

    def to_dict(self) -> dict:
        return {"reference": self.reference, "seq_len": self.seq_len, "runs": self.runs,
                "models": [asdict(m) for m in self.models]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def to_text(self) -> str:
        header = ("Model", "Layers", "Hidden", "FF", "Params", "Latency (ms)", "Speedup")
        rows = [(m.name, str(m.layers), str(m.hidden), str(m.ff), f"{m.params:,}",
                 f"{m.latency_ms_mean:.2f} ± {m.latency_ms_std:.2f}", f"{m.speedup:.2f}x")
                for m in self.models]
        widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
        lines = [fmt(header), "  ".join("-" * w for w in widths)]
        lines += [fmt(r) for r in rows]
        return "\n".join(lines)


def speedups(means: dict[str, float], reference: str) -> dict[str, float]:
    """Reference mean latency divided by each model's mean latency."""
    if reference not in means:
        raise ReportError(f"reference model {reference!r} is not among {sorted(means)}")
    ref = means[reference]
    return {name: (1.0 if name == reference else ref / m) for name, m in means.items()}


def inference_params(ckpt: Checkpoint) -> int:
    return count_params(ckpt.config) + head_param_count(ckpt.config.hidden)


def speedup_report(checkpoints, reference: str, seq_len: int = DEFAULT_SEQ_LEN, runs: int = 10,
                   warmup: int = 3) -> BenchReport:
    """Benchmark several models against a named reference.

    ``checkpoints`` is a mapping name -> checkpoint (object or path), or a
    list of paths named by file stem.
    """
    if not isinstance(checkpoints, dict):
        checkpoints = {Path(p).stem: p for p in checkpoints}
    if reference not in checkpoints:
        raise ReportError(f"reference model {reference!r} is not among {sorted(checkpoints)}")
    loaded = {name: _as_checkpoint(c) for name, c in checkpoints.items()}
    timings = {name: measure_latency(c, seq_len, runs, warmup) for name, c in loaded.items()}
    ratio = speedups({n: t.mean_ms for n, t in timings.items()}, reference)
    rows = []
    for name, c in loaded.items():
        cfg = c.config
        t = timings[name]
        rows.append(BenchRow(name, cfg.layers, cfg.hidden, cfg.ff, inference_params(c), t.mean_ms, t.std_ms,
                             ratio[name], t.samples_ms))
    return BenchReport(reference, seq_len, runs, rows)
