"""Seeded parity suite: efficient backends against their dense oracles, plus
causality perturbation checks.

Each check runs a batch of random instances and reports its worst error. The
`corrupt_scale` argument is a fault-injection hook for testing the harness
itself: it scales the candidate's value rows so a broken build is guaranteed
to be flagged (queries would cancel in the kernel path, which is positively
homogeneous in q). 1.0 means no corruption.
"""

from __future__ import annotations

import numpy as np

from .attention import build_causal_mask, exact_attention
from .autograd import Tape
from .efficient import (
    BlockSparseBackend,
    LowRankBackend,
    blocksparse_attention,
    blocksparse_dense_oracle,
    kernel_attention,
    kernel_dense_oracle,
    lowrank_attention,
)
from .tensor import Rng

PARITY_TOL = 1e-10
CAUSALITY_TOL = 1e-12


def _run(fn, *arrays, **kwargs):
    tape = Tape()
    return fn(*[tape.constant(a) for a in arrays], **kwargs).value


def _instance(rng: Rng, positive: bool, block: int = 1):
    m = block * int(rng.integers(1, 32 // block + 1))
    d_k = int(rng.integers(1, 9))
    maker = (
        (lambda r, *s: r.uniform(*s, low=0.05, high=1.0)) if positive else Rng.normal
    )
    q = maker(rng.stream(1), m, d_k)
    k = maker(rng.stream(2), m, d_k)
    v = rng.stream(3).normal(m, d_k)
    return q, k, v


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.abs(b).max()), 1e-12)
    return float(np.abs(a - b).max()) / scale


def run_parity_checks(seed: int = 0, instances: int = 50, corrupt_scale: float = 1.0) -> list[dict]:
    """Run every parity and causality check; one report record per check."""
    base = Rng(seed)
    reports = []

    def record(check: str, err: float, tol: float):
        reports.append(
            {"check": check, "max_err": err, "tolerance": tol, "passed": bool(err <= tol)}
        )

    # low-rank with identity projection == exact attention
    worst = 0.0
    for i in range(instances):
        q, k, v = _instance(base.stream(1, i), positive=False)
        got = _run(lowrank_attention, q, k, v * corrupt_scale, np.eye(q.shape[0]))
        worst = max(worst, _rel(got, _run(exact_attention, q, k, v)))
    record("lowrank_identity_vs_exact", worst, PARITY_TOL)

    # block-sparse with a window covering every block == exact attention
    worst = 0.0
    for i in range(instances):
        q, k, v = _instance(base.stream(2, i), positive=False, block=4)
        cfg = BlockSparseBackend(
            block_size=4, window_blocks=q.shape[0] // 4, num_random_blocks=0
        )
        got = _run(blocksparse_attention, q, k, v * corrupt_scale, cfg=cfg)
        worst = max(worst, _rel(got, _run(exact_attention, q, k, v)))
    record("blocksparse_full_window_vs_exact", worst, PARITY_TOL)

    # linear-time kernel attention == materialized dense kernel oracle
    for causal in (False, True):
        worst = 0.0
        for i in range(instances):
            q, k, v = _instance(base.stream(3 + int(causal), i), positive=True)
            got = _run(kernel_attention, q, k, v * corrupt_scale, causal=causal)
            worst = max(worst, _rel(got, kernel_dense_oracle(q, k, v, causal)))
        record(f"kernel_vs_dense_oracle_{'causal' if causal else 'full'}", worst, PARITY_TOL)

    # causality: perturbing a later row never moves an earlier output
    def causal_outputs(q, k, v, which, cfg=None):
        if which == "exact":
            mask = build_causal_mask(q.shape[0]).additive
            return _run(exact_attention, q, k, v, additive=mask)
        if which == "kernel":
            return _run(kernel_attention, q, k, v, causal=True)
        return _run(blocksparse_attention, q, k, v, cfg=cfg, causal=True)

    for which in ("exact", "kernel", "blocksparse"):
        worst = 0.0
        for i in range(instances // 5):
            rng = base.stream(5, i)
            q, k, v = _instance(rng, positive=(which == "kernel"), block=4)
            m = q.shape[0]
            if m < 2:
                continue
            cfg = BlockSparseBackend(block_size=4, num_random_blocks=1, rng_seed=i)
            before = causal_outputs(q, k, v, which, cfg)
            j = int(rng.stream(9).integers(1, m))
            k2, v2 = k.copy(), v.copy()
            k2[j:] += 0.75
            v2[j:] -= 0.5
            after = causal_outputs(q, k2, v2, which, cfg)
            worst = max(worst, float(np.abs(after[:j] - before[:j]).max()))
        record(f"{which}_causal_perturbation", worst, CAUSALITY_TOL)

    return reports
