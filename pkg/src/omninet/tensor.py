"""Dense float64 tensor kernels and the deterministic RNG shared by every module.

Arrays are plain C-contiguous float64 numpy arrays (row-major flat storage with
an explicit shape). Every kernel validates shapes, checks the result for
NaN/Inf, and reports multiply-accumulate counts to any active counter so the
benchmark harness can compare attention backends by operation count.
"""

from __future__ import annotations

import zlib
from contextlib import contextmanager

import numpy as np

# Additive mask sentinel standing in for -inf. It is finite (no NaN from
# inf - inf in the row-max subtraction) but large enough that exp underflows
# to exactly 0.0, so masked attention weights are exact zeros.
MASK_NEG = -1e30

LAYER_NORM_EPS = 1e-6


class FiniteError(FloatingPointError):
    """A tensor primitive produced NaN or Inf."""


class DegenerateNormalizerError(ValueError):
    """Kernel attention normalizer fell to zero (all-negative features)."""


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 array."""
    return np.ascontiguousarray(x, dtype=np.float64)


def ensure_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise FiniteError(f"{op} produced non-finite values")
    return x


class MacCounter:
    """Accumulates multiply-accumulate counts while active."""

    __slots__ = ("count",)

    def __init__(self) -> None:
        self.count = 0


_active_counters: list[MacCounter] = []


def add_macs(n: int) -> None:
    for counter in _active_counters:
        counter.count += n


@contextmanager
def count_macs():
    """Context manager yielding a MacCounter that tallies enclosed kernels."""
    counter = MacCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-D arrays, accumulated in float64."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    add_macs(a.shape[0] * a.shape[1] * b.shape[1])
    return ensure_finite(a @ b, "matmul")


def softmax_rows(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax with max subtraction; mask is additive (0 or MASK_NEG).

    A row whose mask entries are all MASK_NEG is a contract violation and
    raises rather than returning an arbitrary distribution.
    """
    x = np.asarray(x)
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != x.shape:
            raise ValueError(f"softmax mask shape {mask.shape} != input shape {x.shape}")
        dead = (mask <= MASK_NEG / 2).all(axis=-1)
        if dead.any():
            row = int(np.argwhere(dead)[0][-1])
            raise ValueError(f"softmax_rows: row {row} is fully masked")
        x = x + mask
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return ensure_finite(e / e.sum(axis=-1, keepdims=True), "softmax_rows")


def layer_norm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float = LAYER_NORM_EPS,
) -> np.ndarray:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    x = np.asarray(x)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {x.shape[-1]}"
        )
    centered = x - x.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return ensure_finite(centered / np.sqrt(var + eps) * gamma + beta, "layer_norm")


def grouped_max(x: np.ndarray, group: int) -> tuple[np.ndarray, np.ndarray]:
    """Element-wise max over consecutive groups of `group` rows.

    Returns (max values [G x d], argindex [G x d]) where argindex holds the
    within-group row (0..group-1) that won; ties go to the smallest row index.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"grouped_max expects a 2-D input, got shape {x.shape}")
    n, d = x.shape
    if group < 1 or n % group != 0:
        raise ValueError(f"grouped_max: leading extent {n} not divisible by group {group}")
    blocks = x.reshape(n // group, group, d)
    arg = blocks.argmax(axis=1)  # numpy argmax picks the first maximum
    out = np.take_along_axis(blocks, arg[:, None, :], axis=1)[:, 0, :]
    return ensure_finite(out, "grouped_max"), arg


class Rng:
    """Deterministic counter-based random stream (Philox) with substreams.

    Equal seeds reproduce identical value streams across runs; substreams are
    derived by spawn keys so (seed, stream-id) streams never collide.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def stream(self, *ids: int) -> "Rng":
        """Independent substream addressed by integer ids."""
        return Rng(self.seed, self.path + ids)

    def stream_named(self, name: str) -> "Rng":
        return self.stream(zlib.crc32(name.encode("utf-8")))

    def normal(self, *shape: int, std: float = 1.0) -> np.ndarray:
        return as_tensor(self._gen.normal(0.0, std, size=shape))

    def uniform(self, *shape: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return as_tensor(self._gen.uniform(low, high, size=shape))

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size, dtype=np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_without_replacement(self, pool, k: int) -> list[int]:
        picked = self._gen.choice(np.asarray(pool, dtype=np.int64), size=k, replace=False)
        return [int(p) for p in picked]
