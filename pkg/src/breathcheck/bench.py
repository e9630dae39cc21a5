"""Latency benchmarking: warmup-excluded statistics and a model-by-configuration grid."""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

CSV_HEADER = ("model", "config", "mean_ms", "median_ms", "p95_ms", "stddev_ms", "iters")


@dataclass(frozen=True)
class BenchConfig:
    threads: int = 1
    size: int = 416
    warmup: int = 5
    iters: int = 30
    source: str = "synthetic"
    label: str = ""

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("measured iterations must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")

    @property
    def name(self) -> str:
        return self.label or f"cpu x{self.threads} @{self.size}"


@dataclass
class BenchCell:
    model: str
    config: str
    samples_ms: list[float]
    preprocess_ms: float | None = None

    @property
    def iters(self) -> int:
        return len(self.samples_ms)

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.samples_ms)

    @property
    def median_ms(self) -> float:
        return statistics.median(self.samples_ms)

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.samples_ms, 95))

    @property
    def stddev_ms(self) -> float:
        return statistics.pstdev(self.samples_ms)

    def row(self) -> dict:
        return {
            "model": self.model,
            "config": self.config,
            "mean_ms": self.mean_ms,
            "median_ms": self.median_ms,
            "p95_ms": self.p95_ms,
            "stddev_ms": self.stddev_ms,
            "iters": self.iters,
        }


@dataclass
class BenchReport:
    cells: list[BenchCell] = field(default_factory=list)
    host: str = ""

    def cell(self, model: str, config: str) -> BenchCell:
        for c in self.cells:
            if c.model == model and c.config == config:
                return c
        raise KeyError((model, config))

    @property
    def models(self) -> list[str]:
        return list(dict.fromkeys(c.model for c in self.cells))

    @property
    def configs(self) -> list[str]:
        return list(dict.fromkeys(c.config for c in self.cells))


def time_inference(infer: Callable[[], object], cfg: BenchConfig, *, model: str = "model",
                   clock: Callable[[], float] = time.perf_counter,
                   preprocess: Callable[[], object] | None = None) -> BenchCell:
    """Run ``cfg.warmup`` discarded calls, then time ``cfg.iters`` calls.

    ``clock`` must be monotonic and return seconds.  ``preprocess`` (if any)
    is timed once per measured iteration but kept out of the samples.
    """
    for _ in range(cfg.warmup):
        infer()
    samples = []
    pre = []
    for _ in range(cfg.iters):
        if preprocess is not None:
            t0 = clock()
            preprocess()
            pre.append((clock() - t0) * 1000.0)
        t0 = clock()
        infer()
        samples.append(max(0.0, clock() - t0) * 1000.0)
    return BenchCell(model, cfg.name, samples, statistics.median(pre) if pre else None)


def speedup(full: BenchCell, tiny: BenchCell) -> float:
    """How many times slower ``full`` is than ``tiny`` (median over median)."""
    if tiny.median_ms <= 0:
        raise ZeroDivisionError("reference cell has zero median latency")
    return full.median_ms / tiny.median_ms


def render_table(report: BenchReport) -> str:
    """Models as rows, configurations as columns, median latency per cell."""
    if not report.cells:
        raise ValueError("empty report")
    configs = report.configs
    rows = [["Model", *configs]]
    for m in report.models:
        row = [m]
        for c in configs:
            try:
                row.append(f"{report.cell(m, c).median_ms:.1f}ms")
            except KeyError:
                row.append("-")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("| " + " | ".join(v.ljust(w) for v, w in zip(r, widths)) + " |" for r in rows)


def to_csv(report: BenchReport) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
    writer.writeheader()
    for cell in report.cells:
        row = cell.row()
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    rows = []
    for raw in csv.DictReader(io.StringIO(text)):
        row = {"model": raw["model"], "config": raw["config"], "iters": int(raw["iters"])}
        for key in ("mean_ms", "median_ms", "p95_ms", "stddev_ms"):
            row[key] = float(raw[key])
        rows.append({k: row[k] for k in CSV_HEADER})
    return rows


def bench_model(model, cfg: BenchConfig, *, label: str, image: np.ndarray | None = None,
                seed: int = 0) -> BenchCell:
    """Time ``model.forward`` on a synthetic tensor or a letterboxed image."""
    if image is not None:
        tensor, _ = model.preprocess(image)
        pre = lambda: model.preprocess(image)  # noqa: E731
    else:
        rng = np.random.default_rng(seed)
        tensor = rng.random(model.cfg.input_shape, dtype=np.float32)
        pre = None
    return time_inference(lambda: model.forward(tensor), cfg, model=label, preprocess=pre)
