"""Single-image CPU inference throughput."""

from __future__ import annotations

import contextlib
import csv
import os
import platform
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .model import ModelConfig, Network, build_model, count_parameters, resolve_config
from .tensor import Tensor
from .training import init_weights

DEFAULT_WARMUP = 20
DEFAULT_ITERS = 200


@dataclass
class BenchmarkResult:
    model: str
    parameters: int
    warmup: int
    iterations: int
    latencies_ms: list[float]
    hardware: str
    untrained: bool = False
    fps: float = field(init=False)

    def __post_init__(self):
        if self.iterations <= 0 or not self.latencies_ms:
            raise ValueError("benchmark needs at least one measured iteration")
        self.fps = 1000.0 / max(self.median_ms, 1e-9)

    @property
    def median_ms(self) -> float:
        return float(statistics.median(self.latencies_ms))

    @property
    def mean_ms(self) -> float:
        return float(statistics.fmean(self.latencies_ms))

    def row(self) -> dict:
        return {
            "model": self.model,
            "parameters": self.parameters,
            "fps": round(self.fps, 3),
            "median_ms": round(self.median_ms, 4),
            "mean_ms": round(self.mean_ms, 4),
            "min_ms": round(min(self.latencies_ms), 4),
            "max_ms": round(max(self.latencies_ms), 4),
            "warmup": self.warmup,
            "iterations": self.iterations,
            "untrained": self.untrained,
            "hardware": self.hardware,
        }


def hardware_descriptor(threads: int | None) -> str:
    cpu = platform.processor() or platform.machine()
    return f"{cpu}; {os.cpu_count()} logical cpus; threads={threads if threads else 'default'}; numpy {np.__version__}"


@contextlib.contextmanager
def thread_limit(threads: int | None):
    """Cap BLAS/OpenMP threads for the duration of the block."""
    if not threads:
        yield
        return
    with threadpool_limits(limits=threads):
        yield


def measure_fps(
    network: Network,
    input_size: int | None = None,
    warmup: int = DEFAULT_WARMUP,
    iters: int = DEFAULT_ITERS,
    batch: int = 1,
    threads: int | None = 1,
    seed: int = 0,
    untrained: bool = False,
) -> BenchmarkResult:
    """Time ``iters`` infer-mode forward passes on one fixed random input.

    Warmup passes run first and are discarded. fps is 1000 / median latency;
    the raw latencies (outliers included) are kept in the result.
    """
    if iters <= 0 or warmup < 0:
        raise ValueError("iters must be positive and warmup non-negative")
    cfg = network.config
    size = input_size or cfg.input_size
    x = Tensor(
        np.random.default_rng(seed).uniform(-1, 1, (batch, cfg.input_channels, size, size)).astype(network.dtype)
    )
    prev_mode = network.mode
    network.set_mode("infer")
    latencies = []
    try:
        with thread_limit(threads):
            for _ in range(warmup):
                network.forward(x)
            for _ in range(iters):
                t0 = time.perf_counter()
                network.forward(x)
                latencies.append((time.perf_counter() - t0) * 1000.0)
    finally:
        network.set_mode(prev_mode)
    return BenchmarkResult(
        model=cfg.name,
        parameters=count_parameters(network),
        warmup=warmup,
        iterations=iters,
        latencies_ms=latencies,
        hardware=hardware_descriptor(threads),
        untrained=untrained,
    )


def benchmark_suite(
    configs: Sequence[ModelConfig | str],
    warmup: int = DEFAULT_WARMUP,
    iters: int = DEFAULT_ITERS,
    threads: int | None = 1,
    networks: dict[str, Network] | None = None,
) -> list[BenchmarkResult]:
    """Benchmark each config; ``networks`` may supply trained instances by name."""
    if not configs:
        raise ValueError("benchmark_suite needs at least one config")
    results = []
    for spec in configs:
        cfg = resolve_config(spec)
        net = (networks or {}).get(cfg.name)
        untrained = net is None
        if net is None:
            net = init_weights(build_model(cfg), 0)
        results.append(measure_fps(net, warmup=warmup, iters=iters, threads=threads, untrained=untrained))
    return results


def results_table(results: Sequence[BenchmarkResult]) -> str:
    header = f"{'model':<20} {'parameters':>14} {'fps':>9} {'median ms':>10}  flags"
    lines = [header, "-" * len(header)]
    for r in results:
        flag = "untrained" if r.untrained else ""
        lines.append(f"{r.model:<20} {r.parameters:>14,} {r.fps:>9.2f} {r.median_ms:>10.3f}  {flag}")
    if results:
        lines.append(f"hardware: {results[0].hardware}")
    return "\n".join(lines) + "\n"


def write_results_csv(results: Sequence[BenchmarkResult], path) -> Path:
    path = Path(path)
    rows = [r.row() for r in results]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def write_latencies_csv(results: Sequence[BenchmarkResult], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "iteration", "latency_ms"])
        for r in results:
            for i, v in enumerate(r.latencies_ms):
                w.writerow([r.model, i, f"{v:.6f}"])
    return path
