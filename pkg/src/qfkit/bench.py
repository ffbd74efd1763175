"""Throughput measurement: frames per second over batched inference.

Timing starts after a warmup, spans whole batches, and keeps per-batch
durations so every reported number can be re-derived from the raw counters.
Inputs are synthetic random tensors by default; the benchmark needs no
dataset.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .graph import Graph
from .runtime import execute_plan, run_graph_f32_nodes
from .tensor import INT8_MAX, INT8_MIN

MIN_BATCHES = 10


@dataclass
class BenchReport:
    """One measurement row: model variant, precision, and achieved FPS."""

    node_name: str
    model_variant: str  # "seg-only" | "full"
    precision: str  # "fp32" | "int8"
    images: int
    wall_seconds: float
    fps: float
    warmup_batches: int
    batch_size: int
    batch_seconds: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "node_name": self.node_name,
            "model_variant": self.model_variant,
            "precision": self.precision,
            "images": self.images,
            "wall_seconds": self.wall_seconds,
            "fps": self.fps,
            "warmup_batches": self.warmup_batches,
            "batch_size": self.batch_size,
            "batch_seconds": self.batch_seconds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchReport":
        return cls(**d)


def _make_runner(model, batch: int, seed: int):
    rng = np.random.default_rng(seed)
    if isinstance(model, Graph):
        inp = model.input_node.kind
        x = rng.random((batch, inp.channels, inp.height, inp.width), dtype=np.float32)
        return "fp32", lambda: run_graph_f32_nodes(model, x)
    # Duck-typed Plan.
    if not hasattr(model, "instructions"):
        raise DataError(f"cannot benchmark object of type {type(model).__name__}")
    if model.batch_size != batch:
        raise DataError(f"plan was compiled for batch {model.batch_size}, asked for {batch}")
    x = rng.integers(INT8_MIN, INT8_MAX + 1,
                     size=(batch, *model.input_shape), dtype=np.int8)
    return "int8", lambda: execute_plan(model, x)


def measure_fps(
    model,
    images: int,
    batch: int = 8,
    warmup: int = 3,
    node_name: str = "local",
    model_variant: str = "full",
    seed: int = 0,
    timer=time.perf_counter,
) -> BenchReport:
    """Measure steady-state FPS of a Plan (int8) or Graph (fp32 reference).

    Requires at least 10 batches worth of images and one warmup batch; the
    warmup batches are excluded from timing.
    """
    if images < MIN_BATCHES * batch:
        raise DataError(f"need at least {MIN_BATCHES * batch} images, got {images}")
    if warmup < 1:
        raise DataError(f"need at least 1 warmup batch, got {warmup}")
    precision, runner = _make_runner(model, batch, seed)

    for _ in range(warmup):
        runner()

    n_batches = -(-images // batch)
    batch_seconds = []
    for _ in range(n_batches):
        t0 = timer()
        runner()
        batch_seconds.append(timer() - t0)

    wall = float(sum(batch_seconds))
    processed = n_batches * batch
    return BenchReport(
        node_name=node_name,
        model_variant=model_variant,
        precision=precision,
        images=processed,
        wall_seconds=wall,
        fps=processed / wall,
        warmup_batches=warmup,
        batch_size=batch,
        batch_seconds=[float(t) for t in batch_seconds],
    )


@dataclass
class Comparison:
    """Reports sorted fastest-first with speedups relative to the slowest."""

    rows: list[dict]

    def to_text(self) -> str:
        header = f"{'node':<16} {'variant':<10} {'precision':<9} {'fps':>10} {'ratio':>7}"
        lines = [header, "-" * len(header)]
        for row in self.rows:
            lines.append(
                f"{row['node_name']:<16} {row['model_variant']:<10} "
                f"{row['precision']:<9} {row['fps']:>10.2f} {row['ratio']:>6.2f}x"
            )
        return "\n".join(lines)

    def to_json_dict(self) -> dict:
        return {"rows": self.rows}

    def to_csv(self) -> str:
        lines = ["node,variant,precision,fps"]
        for row in self.rows:
            lines.append(
                f"{row['node_name']},{row['model_variant']},{row['precision']},{row['fps']:.4f}"
            )
        return "\n".join(lines) + "\n"


def compare_report(reports: list[BenchReport]) -> Comparison:
    """Tabulate several measurements; ratio column is speedup vs the slowest."""
    if len(reports) < 2:
        raise DataError(f"need >= 2 reports to compare, got {len(reports)}")
    slowest = min(r.fps for r in reports)
    rows = []
    for r in sorted(reports, key=lambda r: -r.fps):
        rows.append(
            {
                "node_name": r.node_name,
                "model_variant": r.model_variant,
                "precision": r.precision,
                "fps": r.fps,
                "ratio": r.fps / slowest,
            }
        )
    return Comparison(rows=rows)
