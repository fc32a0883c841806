"""Multi-head self-attention and position-wise FFN blocks, plus mask building.

The block formula follows the convention of normalizing the sublayer before
adding the residual: out = LN(sublayer(x)) + x. The more common post-norm
variant LN(x + sublayer(x)) is available through `ln_placement="post-ln"`.

Causal masks are additive 0 / MASK_NEG matrices. On a width-by-depth grid
(see the omni module) rows are grouped `layers_per_token` at a time and
causality is enforced at token granularity: any layer of token j is visible
to any layer of token i whenever j <= i.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import ParamSet, Var
from .tensor import MASK_NEG, Rng


@dataclass
class MhaParams:
    """Per-head q/k/v projections, output projection, and the block layer norm."""

    wq: list[Var]
    bq: list[Var]
    wk: list[Var]
    bk: list[Var]
    wv: list[Var]
    bv: list[Var]
    wo: Var
    bo: Var
    gamma: Var
    beta: Var

    @property
    def n_heads(self) -> int:
        return len(self.wq)


@dataclass
class FfnParams:
    w_inner: Var  # d -> d_ff
    b_inner: Var
    w_outer: Var  # d_ff -> d
    b_outer: Var
    gamma: Var
    beta: Var


@dataclass(frozen=True)
class Mask:
    kind: str  # "none" | "causal_tokens"
    additive: np.ndarray | None


@dataclass(frozen=True)
class Dropout:
    rate: float
    rng: Rng


def build_causal_mask(n_tokens: int, layers_per_token: int = 1) -> Mask:
    """Additive mask over an (n_tokens * layers_per_token)^2 grid.

    Row r belongs to token r // layers_per_token; it may attend column c iff
    c's token index is <= its own.
    """
    if n_tokens < 1 or layers_per_token < 1:
        raise ValueError("build_causal_mask: counts must be >= 1")
    tok = np.arange(n_tokens * layers_per_token) // layers_per_token
    allowed = tok[None, :] <= tok[:, None]
    return Mask("causal_tokens", np.where(allowed, 0.0, MASK_NEG))


def exact_attention(
    q: Var,
    k: Var,
    v: Var,
    additive: np.ndarray | None = None,
    weights_out: list | None = None,
) -> Var:
    """softmax(q k^T / sqrt(d_k) + mask) v for a single head."""
    d_k = q.shape[1]
    scores = ag.scale(q @ ag.transpose(k), 1.0 / math.sqrt(d_k))
    weights = ag.softmax_rows(scores, additive)
    if weights_out is not None:
        weights_out.append(weights.value)
    return weights @ v


def mha_wrapper(
    x: Var,
    p: MhaParams,
    head_fn: Callable[[int, Var, Var, Var], Var],
    ln_placement: str = "as-paper",
    drop: Dropout | None = None,
) -> Var:
    """Shared multi-head machinery: project, run head_fn per head, concat,
    project out, layer-norm, add residual."""
    heads = []
    for h in range(p.n_heads):
        q = ag.add_rowvec(x @ p.wq[h], p.bq[h])
        k = ag.add_rowvec(x @ p.wk[h], p.bk[h])
        v = ag.add_rowvec(x @ p.wv[h], p.bv[h])
        heads.append(head_fn(h, q, k, v))
    proj = ag.add_rowvec(ag.concat_cols(heads) @ p.wo, p.bo)
    if drop is not None:
        proj = ag.dropout(proj, drop.rate, drop.rng)
    if ln_placement == "post-ln":
        return ag.layer_norm(ag.add(proj, x), p.gamma, p.beta)
    return ag.add(ag.layer_norm(proj, p.gamma, p.beta), x)


def exact_mha_block(
    x: Var,
    p: MhaParams,
    mask: Mask | None = None,
    ln_placement: str = "as-paper",
    drop: Dropout | None = None,
    weights_out: list | None = None,
) -> Var:
    """Standard transformer attention sublayer with dense softmax attention."""
    additive = None
    if mask is not None and mask.kind != "none":
        n = x.shape[0]
        if mask.additive.shape != (n, n):
            raise ValueError(
                f"mask shape {mask.additive.shape} does not match {n} rows"
            )
        additive = mask.additive

    def head_fn(h, q, k, v):
        return exact_attention(q, k, v, additive, weights_out)

    return mha_wrapper(x, p, head_fn, ln_placement, drop)


def ffn_block(
    y: Var,
    p: FfnParams,
    ln_placement: str = "as-paper",
    drop: Dropout | None = None,
) -> Var:
    """Two-layer position-wise FFN with ReLU; residual from the block input."""
    inner = ag.relu(ag.add_rowvec(y @ p.w_inner, p.b_inner))
    outer = ag.add_rowvec(inner @ p.w_outer, p.b_outer)
    if drop is not None:
        outer = ag.dropout(outer, drop.rate, drop.rng)
    if ln_placement == "post-ln":
        return ag.layer_norm(ag.add(outer, y), p.gamma, p.beta)
    return ag.add(ag.layer_norm(outer, p.gamma, p.beta), y)


# --- parameter construction -------------------------------------------------


def init_mha(rng: Rng, d_model: int, n_heads: int) -> dict[str, np.ndarray]:
    """Fresh MHA parameter arrays keyed by local name (no prefix).

    Query/key biases start at 1.0 so ReLU kernel features are essentially
    never all dark at initialization; for softmax backends the key shift is a
    no-op (row-constant logits) and the query shift is mild.
    """
    if d_model % n_heads != 0:
        raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
    d_k = d_model // n_heads
    out: dict[str, np.ndarray] = {}
    std = 1.0 / math.sqrt(d_model)
    for h in range(n_heads):
        for part in ("wq", "wk", "wv"):
            out[f"{part}.{h}"] = rng.stream_named(f"{part}.{h}").normal(
                d_model, d_k, std=std
            )
        out[f"bq.{h}"] = np.ones(d_k)
        out[f"bk.{h}"] = np.ones(d_k)
        out[f"bv.{h}"] = np.zeros(d_k)
    out["wo"] = rng.stream_named("wo").normal(n_heads * d_k, d_model, std=1.0 / math.sqrt(n_heads * d_k))
    out["bo"] = np.zeros(d_model)
    out["ln_gamma"] = np.ones(d_model)
    out["ln_beta"] = np.zeros(d_model)
    return out


def init_ffn(rng: Rng, d_model: int, d_ff: int) -> dict[str, np.ndarray]:
    return {
        "w_inner": rng.stream_named("w_inner").normal(d_model, d_ff, std=1.0 / math.sqrt(d_model)),
        "b_inner": np.zeros(d_ff),
        "w_outer": rng.stream_named("w_outer").normal(d_ff, d_model, std=1.0 / math.sqrt(d_ff)),
        "b_outer": np.zeros(d_model),
        "ln_gamma": np.ones(d_model),
        "ln_beta": np.zeros(d_model),
    }


def bind_mha(tape, params: ParamSet, prefix: str, n_heads: int) -> MhaParams:
    def var(name: str) -> Var:
        return tape.param(f"{prefix}.{name}", params[f"{prefix}.{name}"])

    return MhaParams(
        wq=[var(f"wq.{h}") for h in range(n_heads)],
        bq=[var(f"bq.{h}") for h in range(n_heads)],
        wk=[var(f"wk.{h}") for h in range(n_heads)],
        bk=[var(f"bk.{h}") for h in range(n_heads)],
        wv=[var(f"wv.{h}") for h in range(n_heads)],
        bv=[var(f"bv.{h}") for h in range(n_heads)],
        wo=var("wo"),
        bo=var("bo"),
        gamma=var("ln_gamma"),
        beta=var("ln_beta"),
    )


def bind_ffn(tape, params: ParamSet, prefix: str) -> FfnParams:
    def var(name: str) -> Var:
        return tape.param(f"{prefix}.{name}", params[f"{prefix}.{name}"])

    return FfnParams(
        w_inner=var("w_inner"),
        b_inner=var("b_inner"),
        w_outer=var("w_outer"),
        b_outer=var("b_outer"),
        gamma=var("ln_gamma"),
        beta=var("ln_beta"),
    )
