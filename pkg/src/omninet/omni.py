"""Width-by-depth attention meta-learner: indexsort, the omni block, stride
pooling with contribution statistics, and the partition scheduler.

A stack of layer outputs (each N x d) is flattened token-major so that all
depths of one token are adjacent, run through an attention + FFN block under a
configurable backend, then max-pooled with stride g back down to N x d. The
argmax bookkeeping of that pool is the per-token "which layer won each output
dimension" statistic.

The partition scheduler places one of these blocks at every layer index
divisible by the partition size; the block replaces the transformer layer at
that position and consumes the preceding partition's outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Var
from .attention import (
    Dropout,
    FfnParams,
    MhaParams,
    build_causal_mask,
    ffn_block,
    mha_wrapper,
)
from .efficient import (
    Backend,
    ExactBackend,
    LowRankBackend,
    KernelBackend,
    BlockSparseBackend,
    backend_attention,
    blocksparse_dense_weights,
    kernel_dense_weights,
    supports_causal,
)


class ConfigError(ValueError):
    """Invalid model/plan configuration."""


@dataclass
class LayerStack:
    """Ordered per-layer outputs sharing one N x d shape."""

    layers: list[Var]
    layer_ids: list[int]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("LayerStack: empty stack")
        if len(self.layers) != len(self.layer_ids):
            raise ValueError("LayerStack: layers and layer_ids disagree")
        shape = self.layers[0].shape
        for layer in self.layers[1:]:
            if layer.shape != shape:
                raise ValueError("LayerStack: members must share N x d")
        if any(b <= a for a, b in zip(self.layer_ids, self.layer_ids[1:])):
            raise ValueError("LayerStack: layer_ids must be strictly increasing")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def n_tokens(self) -> int:
        return self.layers[0].shape[0]


@dataclass(frozen=True)
class PlanEntry:
    kind: str  # "transformer" | "omni"
    consumes: tuple[int, ...] = ()


@dataclass(frozen=True)
class OmniPlan:
    n_layers: int
    partition: int
    schedule: tuple[PlanEntry, ...]  # schedule[i] describes layer i+1

    def omni_layers(self) -> list[int]:
        return [i + 1 for i, e in enumerate(self.schedule) if e.kind == "omni"]


def build_plan(n_layers: int, partition: int, include_embeddings: bool = False) -> OmniPlan:
    """Layer schedule for an L-layer network with meta-learner partition P.

    A block at layer l (l mod P == 0) consumes layers l-P .. l-1. The
    embedding output (layer 0) is excluded unless `include_embeddings`;
    at l=1, P=1 the embedding is the only available input and is consumed
    regardless.
    """
    if n_layers < 1:
        raise ConfigError(f"n_layers must be >= 1, got {n_layers}")
    if not 1 <= partition <= n_layers:
        raise ConfigError(f"partition {partition} outside 1..{n_layers}")
    if n_layers % partition != 0:
        raise ConfigError(f"L mod P != 0 (L={n_layers}, P={partition})")
    schedule = []
    for layer in range(1, n_layers + 1):
        if layer % partition == 0:
            lo = layer - partition if include_embeddings else max(layer - partition, 1)
            consumes = tuple(range(lo, layer))
            if not consumes:
                consumes = (layer - partition,)  # only the embedding is available
            schedule.append(PlanEntry("omni", consumes))
        else:
            schedule.append(PlanEntry("transformer"))
    return OmniPlan(n_layers, partition, tuple(schedule))


def index_sort(stack: LayerStack) -> tuple[Var, np.ndarray]:
    """Reorder stacked layers token-major: (token 0, all layers), (token 1, ...).

    Returns the sorted (g*N) x d rows and the inverse permutation that restores
    layer-major order.
    """
    g = stack.depth
    n = stack.n_tokens
    layer_major = ag.concat_rows(stack.layers)
    rows = np.arange(g * n)
    # token-major row (token i, layer j) comes from layer-major row j*n + i
    perm = (rows % g) * n + rows // g
    inverse = np.argsort(perm)
    return ag.take_rows(layer_major, perm), inverse


@dataclass
class PoolStats:
    """Per token, the fraction of output dimensions each pooled layer won."""

    fractions: np.ndarray  # N x g
    layer_ids: tuple[int, ...]


@dataclass
class OmniParams:
    attn: MhaParams
    ffn: FfnParams
    lowrank_w: Var | None = None
    layer_emb: Var | None = None


def pool_fractions(argindex: np.ndarray, depth: int) -> np.ndarray:
    onehot = argindex[:, None, :] == np.arange(depth)[None, :, None]
    return onehot.sum(axis=2) / argindex.shape[1]


def omni_block(
    stack: LayerStack,
    backend: Backend,
    params: OmniParams,
    causal: bool = False,
    *,
    ln_placement: str = "as-paper",
    drop: Dropout | None = None,
    map_mode: str | None = None,  # None | "native" | "dense-oracle"
) -> tuple[Var, PoolStats, list[np.ndarray] | None]:
    """Attend across the whole stack, then stride-pool back to one N x d output.

    Returns (pooled output, pooling contributions, per-head attention maps).
    Maps are produced natively only under the exact backend; "dense-oracle"
    materializes the implied weight matrix for the kernel and block-sparse
    backends instead.
    """
    g = stack.depth
    n = stack.n_tokens
    if causal and not supports_causal(backend):
        raise ValueError("low-rank backend does not support causality")
    sorted_rows, _ = index_sort(stack)
    if params.layer_emb is not None:
        row_layers = np.tile(np.arange(g), n)
        sorted_rows = ag.add(sorted_rows, ag.take_rows(params.layer_emb, row_layers))
    additive = build_causal_mask(n, g).additive if causal else None

    maps: list[np.ndarray] | None = None
    if map_mode is not None:
        if map_mode == "native" and not isinstance(backend, ExactBackend):
            raise ValueError("attention map requires dense backend")
        if map_mode == "dense-oracle" and isinstance(backend, LowRankBackend):
            # queries attend k pseudo-tokens; no M x M equivalent exists
            raise ValueError("attention map requires dense backend")
        maps = []

    def head_fn(h: int, q: Var, k: Var, v: Var) -> Var:
        exact_weights: list | None = [] if maps is not None and isinstance(backend, ExactBackend) else None
        out = backend_attention(
            q,
            k,
            v,
            backend,
            additive_mask=additive,
            causal=causal,
            layers_per_token=g,
            lowrank_w=params.lowrank_w,
            weights_out=exact_weights,
        )
        if maps is not None:
            if isinstance(backend, ExactBackend):
                maps.append(exact_weights[0])
            elif isinstance(backend, KernelBackend):
                maps.append(kernel_dense_weights(q.value, k.value, causal))
            elif isinstance(backend, BlockSparseBackend):
                maps.append(
                    blocksparse_dense_weights(q.value, k.value, backend, causal, g)
                )
        return out

    att = mha_wrapper(sorted_rows, params.attn, head_fn, ln_placement, drop)
    refined = ffn_block(att, params.ffn, ln_placement, drop)
    pooled, argindex = ag.grouped_max(refined, g)
    stats = PoolStats(pool_fractions(argindex, g), tuple(stack.layer_ids))
    return pooled, stats, maps


def combine_final(x_last: Var, o_prime: Var) -> Var:
    """Element-wise residual combine of the pooled output with the last layer."""
    return ag.add(x_last, o_prime)
