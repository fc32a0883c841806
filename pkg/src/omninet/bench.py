"""Runtime / operation-count benchmarking of attention backends.

For a partition size P in an L-layer network, the meta-learner's input length
is g*N with g = min(P, L-1) stacked layers (the final-layer variant consumes
L-1 layers). The bench builds random per-head q/k/v at that omnidirectional
length, times the forward pass, and counts multiply-accumulates, which are the
cross-machine comparison metric; wall times are medians over repeats with a
warmup excluded. Runs are single-threaded by contract so timings stay
comparable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

from .autograd import Tape
from .efficient import (
    Backend,
    BlockSparseBackend,
    LowRankBackend,
    backend_attention,
)
from .omni import ConfigError
from .tensor import Rng, count_macs

CSV_HEADER = "backend,M,g,P,wall_ns_median,mac_count"


@dataclass(frozen=True)
class BenchRecord:
    backend: str
    m: int  # omnidirectional input length fed to the attention
    g: int  # stacked layers implied by the partition
    partition: int
    wall_ns_median: int
    mac_count: int


def grid_depth(partition: int, n_layers: int) -> int:
    """Layers consumed by the widest meta-learner block for this partition."""
    if not 1 <= partition <= n_layers or n_layers % partition != 0:
        raise ConfigError(f"L mod P != 0 (L={n_layers}, P={partition})")
    return min(partition, n_layers - 1) if n_layers > 1 else 1


def _median_int(values: list[int]) -> int:
    ordered = sorted(values)
    mid = len(ordered) // 2
    if len(ordered) % 2 == 1:
        return ordered[mid]
    return (ordered[mid - 1] + ordered[mid]) // 2


def run_bench(
    lengths: list[int],
    backends: list[Backend],
    partitions: list[int],
    repeats: int = 5,
    n_layers: int = 12,
    d_k: int = 16,
    seed: int = 0,
    warmup: int = 1,
) -> tuple[list[BenchRecord], list[str]]:
    """Bench every (length, backend, partition) cell; incompatible cells are
    skipped with a recorded reason."""
    if repeats < 3:
        raise ConfigError("repeats must be >= 3 (median of at least 3)")
    records: list[BenchRecord] = []
    skipped: list[str] = []
    rng = Rng(seed)
    for n_tokens in lengths:
        for partition in partitions:
            try:
                g = grid_depth(partition, n_layers)
            except ConfigError as exc:
                skipped.append(f"P={partition}: {exc}")
                continue
            m = g * n_tokens
            q = rng.stream(m, 0).uniform(m, d_k, low=0.05, high=1.0)
            k = rng.stream(m, 1).uniform(m, d_k, low=0.05, high=1.0)
            v = rng.stream(m, 2).normal(m, d_k)
            for backend in backends:
                lowrank_w = None
                if isinstance(backend, BlockSparseBackend) and m % backend.block_size != 0:
                    skipped.append(
                        f"{backend.kind} M={m}: not divisible by block_size {backend.block_size}"
                    )
                    continue
                if isinstance(backend, LowRankBackend):
                    if backend.k > m:
                        skipped.append(f"{backend.kind} M={m}: k={backend.k} exceeds length")
                        continue
                    lowrank_w = rng.stream(m, 3).normal(m, backend.k)

                def one_pass():
                    tape = Tape()
                    w_var = tape.constant(lowrank_w) if lowrank_w is not None else None
                    backend_attention(
                        tape.constant(q),
                        tape.constant(k),
                        tape.constant(v),
                        backend,
                        lowrank_w=w_var,
                    )

                with count_macs() as mc:
                    one_pass()
                mac_count = mc.count
                for _ in range(warmup):
                    one_pass()
                times = []
                for _ in range(repeats):
                    start = time.perf_counter_ns()
                    one_pass()
                    times.append(time.perf_counter_ns() - start)
                records.append(
                    BenchRecord(
                        backend=backend.kind,
                        m=m,
                        g=g,
                        partition=partition,
                        wall_ns_median=_median_int(times),
                        mac_count=mac_count,
                    )
                )
    return records, skipped


def write_csv(records: list[BenchRecord], path: str | Path) -> None:
    lines = [CSV_HEADER]
    for r in records:
        lines.append(f"{r.backend},{r.m},{r.g},{r.partition},{r.wall_ns_median},{r.mac_count}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path: str | Path) -> list[BenchRecord]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"unexpected bench CSV header in {path}")
    records = []
    for line in lines[1:]:
        backend, m, g, p, wall, macs = line.split(",")
        records.append(
            BenchRecord(backend, int(m), int(g), int(p), int(wall), int(macs))
        )
    return records
