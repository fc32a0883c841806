"""Linear and sub-quadratic attention backends behind one dispatch surface.

Three approximations of dense softmax attention, each with a deliberately
quadratic numpy oracle used only to certify it:

  kernel      weights phi(q) . phi(k) with phi = ReLU, factorized so the
              M x M matrix is never formed; causal variant runs prefix sums.
  low-rank    keys/values projected to k pseudo-tokens along the sequence
              axis by a shared trainable matrix; no causal support.
  blocksparse per-block neighborhoods: own + window + global + seeded random
              blocks; causal variant intersects with the token-order rule.

The written form of the block-sparse attention omits the 1/sqrt(d_k) scaling;
it is included here so that full-neighborhood configurations reproduce exact
attention bit-for-bit in the parity suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Var
from .attention import exact_attention
from .tensor import MASK_NEG, DegenerateNormalizerError, Rng

KERNEL_NORMALIZER_EPS = 1e-9

# production-scale block size is 64; desk-scale runs default to 4
PAPER_BLOCK_SIZE = 64


@dataclass(frozen=True)
class ExactBackend:
    kind: str = "exact"


@dataclass(frozen=True)
class KernelBackend:
    kind: str = "kernel"
    feature: str = "relu"  # generalized attention; no random features


@dataclass(frozen=True)
class LowRankBackend:
    kind: str = "lowrank"
    k: int = 32  # projected sequence length


@dataclass(frozen=True)
class BlockSparseBackend:
    kind: str = "blocksparse"
    block_size: int = 4
    num_random_blocks: int = 3
    num_global_blocks: int = 1
    window_blocks: int = 1  # blocks on each side
    rng_seed: int = 0


Backend = ExactBackend | KernelBackend | LowRankBackend | BlockSparseBackend

BACKEND_KINDS = ("exact", "kernel", "lowrank", "blocksparse")


def supports_causal(backend: Backend) -> bool:
    return not isinstance(backend, LowRankBackend)


# --- kernel (linear-time) ----------------------------------------------------


def kernel_attention(q: Var, k: Var, v: Var, causal: bool = False) -> Var:
    """ReLU-feature attention in O(M): phi(Q) (phi(K)^T V) / phi(Q) (phi(K)^T 1)."""
    phi_q = ag.relu(q)
    phi_k = ag.relu(k)
    if causal:
        return ag.causal_kernel_attention(phi_q, phi_k, v, KERNEL_NORMALIZER_EPS)
    m = q.shape[0]
    kv = ag.transpose(phi_k) @ v
    num = phi_q @ kv
    key_sums = ag.transpose(phi_k) @ np.ones((m, 1))
    den = phi_q @ key_sums
    if (den.value <= KERNEL_NORMALIZER_EPS).any():
        row = int(np.argwhere(den.value[:, 0] <= KERNEL_NORMALIZER_EPS)[0][0])
        raise DegenerateNormalizerError(f"degenerate kernel normalizer at row {row}")
    return ag.mul_colvec(num, ag.reciprocal(den))


def kernel_dense_weights(
    q: np.ndarray, k: np.ndarray, causal: bool = False
) -> np.ndarray:
    """Materialized, row-normalized phi(Q) phi(K)^T. Quadratic; oracle/diagnostic only."""
    a = np.maximum(q, 0.0) @ np.maximum(k, 0.0).T
    if causal:
        a = np.tril(a)
    sums = a.sum(axis=1, keepdims=True)
    if (sums <= KERNEL_NORMALIZER_EPS).any():
        row = int(np.argwhere(sums[:, 0] <= KERNEL_NORMALIZER_EPS)[0][0])
        raise DegenerateNormalizerError(f"degenerate kernel normalizer at row {row}")
    return a / sums


def kernel_dense_oracle(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, causal: bool = False
) -> np.ndarray:
    return kernel_dense_weights(q, k, causal) @ v


# --- low-rank ----------------------------------------------------------------


def lowrank_attention(q: Var, k: Var, v: Var, w: Var, causal: bool = False) -> Var:
    """Attend against k_proj pseudo-tokens: softmax(Q (W^T K)^T / sqrt(d_k)) (W^T V).

    `w` must already be sliced to the current sequence length (leading rows of
    the stored max-length parameter).
    """
    if causal:
        raise ValueError("low-rank backend does not support causality")
    m, d_k = q.shape
    if w.shape[0] != m:
        raise ValueError(f"low-rank projection has {w.shape[0]} rows, sequence has {m}")
    if w.shape[1] > m:
        raise ValueError(f"projected length {w.shape[1]} exceeds sequence length {m}")
    wt = ag.transpose(w)
    k_proj = wt @ k  # k_proj x d_k
    v_proj = wt @ v
    scores = ag.scale(q @ ag.transpose(k_proj), 1.0 / math.sqrt(d_k))
    return ag.softmax_rows(scores) @ v_proj


# --- block-sparse ------------------------------------------------------------


def neighborhood(
    i_block: int, cfg: BlockSparseBackend, n_blocks: int, rng: Rng | None = None
) -> list[int]:
    """Key blocks visible to query block i: own + window + global + random.

    Random blocks are drawn without replacement from blocks not already
    selected, on a substream keyed by the block index, so the result depends
    only on (cfg.rng_seed, i_block).
    """
    if not 0 <= i_block < n_blocks:
        raise ValueError(f"block index {i_block} outside 0..{n_blocks - 1}")
    if rng is None:
        rng = Rng(cfg.rng_seed)
    chosen = {i_block}
    for off in range(1, cfg.window_blocks + 1):
        if i_block - off >= 0:
            chosen.add(i_block - off)
        if i_block + off < n_blocks:
            chosen.add(i_block + off)
    chosen.update(range(min(cfg.num_global_blocks, n_blocks)))
    pool = sorted(set(range(n_blocks)) - chosen)
    n_random = min(cfg.num_random_blocks, len(pool))
    if n_random > 0:
        chosen.update(rng.stream(i_block).choice_without_replacement(pool, n_random))
    return sorted(chosen)


def _causal_additive(
    q_rows: np.ndarray, k_rows: np.ndarray, layers_per_token: int
) -> np.ndarray:
    q_tok = q_rows // layers_per_token
    k_tok = k_rows // layers_per_token
    return np.where(k_tok[None, :] <= q_tok[:, None], 0.0, MASK_NEG)


def blocksparse_attention(
    q: Var,
    k: Var,
    v: Var,
    cfg: BlockSparseBackend,
    causal: bool = False,
    layers_per_token: int = 1,
) -> Var:
    """Softmax attention restricted to each query block's neighborhood.

    Causal mode additionally masks keys whose token index exceeds the query's;
    the query's own row is always in its own block, so no row can end up fully
    masked.
    """
    m, d_k = q.shape
    bs = cfg.block_size
    if bs < 1 or m % bs != 0:
        raise ValueError(f"blocksparse: sequence length {m} not divisible by block_size {bs}")
    n_blocks = m // bs
    rng = Rng(cfg.rng_seed)
    scale = 1.0 / math.sqrt(d_k)
    outs = []
    for bi in range(n_blocks):
        key_blocks = neighborhood(bi, cfg, n_blocks, rng)
        key_rows = np.concatenate([np.arange(b * bs, (b + 1) * bs) for b in key_blocks])
        qb = ag.slice_rows(q, bi * bs, (bi + 1) * bs)
        kb = ag.take_rows(k, key_rows)
        vb = ag.take_rows(v, key_rows)
        scores = ag.scale(qb @ ag.transpose(kb), scale)
        additive = None
        if causal:
            q_rows = np.arange(bi * bs, (bi + 1) * bs)
            additive = _causal_additive(q_rows, key_rows, layers_per_token)
        outs.append(ag.softmax_rows(scores, additive) @ vb)
    return ag.concat_rows(outs)


def blocksparse_dense_weights(
    q: np.ndarray,
    k: np.ndarray,
    cfg: BlockSparseBackend,
    causal: bool = False,
    layers_per_token: int = 1,
) -> np.ndarray:
    """Full M x M weight matrix implied by the neighborhood structure.

    Builds the boolean neighborhood mask explicitly and runs masked dense
    softmax attention. Quadratic; oracle/diagnostic only.
    """
    m, d_k = q.shape
    bs = cfg.block_size
    if m % bs != 0:
        raise ValueError(f"blocksparse: sequence length {m} not divisible by block_size {bs}")
    n_blocks = m // bs
    rng = Rng(cfg.rng_seed)
    allowed = np.zeros((m, m), dtype=bool)
    for bi in range(n_blocks):
        for bj in neighborhood(bi, cfg, n_blocks, rng):
            allowed[bi * bs : (bi + 1) * bs, bj * bs : (bj + 1) * bs] = True
    if causal:
        rows = np.arange(m)
        allowed &= _causal_additive(rows, rows, layers_per_token) == 0.0
    scores = q @ k.T / math.sqrt(d_k)
    scores = np.where(allowed, scores, -np.inf)
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.where(allowed, np.exp(shifted), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def blocksparse_dense_oracle(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    cfg: BlockSparseBackend,
    causal: bool = False,
    layers_per_token: int = 1,
) -> np.ndarray:
    return blocksparse_dense_weights(q, k, cfg, causal, layers_per_token) @ v


# --- dispatch ----------------------------------------------------------------


def backend_attention(
    q: Var,
    k: Var,
    v: Var,
    backend: Backend,
    *,
    additive_mask: np.ndarray | None = None,
    causal: bool = False,
    layers_per_token: int = 1,
    lowrank_w: Var | None = None,
    weights_out: list | None = None,
) -> Var:
    """Run one attention head under the selected backend.

    The exact path consumes `additive_mask`; the others take the `causal`
    flag (plus `layers_per_token` for the grid token rule).
    """
    if isinstance(backend, ExactBackend):
        return exact_attention(q, k, v, additive_mask, weights_out)
    if isinstance(backend, KernelBackend):
        return kernel_attention(q, k, v, causal)
    if isinstance(backend, LowRankBackend):
        if lowrank_w is None:
            raise ValueError("low-rank backend requires its projection parameter")
        w = ag.slice_rows(lowrank_w, 0, q.shape[0])
        return lowrank_attention(q, k, v, w, causal)
    if isinstance(backend, BlockSparseBackend):
        return blocksparse_attention(q, k, v, backend, causal, layers_per_token)
    raise TypeError(f"unknown backend {backend!r}")
