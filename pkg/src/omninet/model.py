"""Model assembly: embeddings, the layer schedule, task heads, checkpoints.

Two task shapes share one spine. The decoder-only LM applies token-causal
masks everywhere, including across the layer-position grid inside the
meta-learner blocks. The classifier prepends a learned CLS embedding at
position 0, runs unmasked, and reads the CLS row of the final representation.

Layers follow the plan from `build_plan`: transformer-tagged layers are exact
softmax attention blocks; omni-tagged layers consume the preceding partition's
outputs under the configured backend. A single-layer stack (partition 1, or
the first block when the embedding is excluded) is exactly a plain attention +
FFN block, so partition 1 under the exact backend is the vanilla transformer,
weight for weight.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from io import BytesIO
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import ParamSet, Tape, Var
from .attention import (
    Dropout,
    bind_ffn,
    bind_mha,
    build_causal_mask,
    exact_mha_block,
    ffn_block,
    init_ffn,
    init_mha,
)
from .efficient import (
    Backend,
    BlockSparseBackend,
    ExactBackend,
    LowRankBackend,
    supports_causal,
)
from .omni import ConfigError, LayerStack, OmniParams, OmniPlan, PoolStats, build_plan, omni_block
from .tensor import Rng

TASK_LM = "lm"
TASK_CLASSIFIER = "classifier"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_heads: int
    d_ff: int
    n_layers: int
    partition: int
    max_len: int
    backend: Backend = field(default_factory=ExactBackend)
    task: str = TASK_LM
    n_classes: int = 0
    dropout_rate: float = 0.0
    ln_placement: str = "as-paper"
    include_embeddings: bool = False
    omni_residual: bool = True
    layer_embedding: bool = False

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        if self.task not in (TASK_LM, TASK_CLASSIFIER):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task == TASK_CLASSIFIER and self.n_classes < 2:
            raise ConfigError("classifier task needs n_classes >= 2")
        if self.ln_placement not in ("as-paper", "post-ln"):
            raise ConfigError(f"unknown ln_placement {self.ln_placement!r}")
        if self.task == TASK_LM and not supports_causal(self.backend):
            raise ConfigError("low-rank backend does not support causal language modeling")
        build_plan(self.n_layers, self.partition, self.include_embeddings)  # validates L mod P

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def plan(self) -> OmniPlan:
        return build_plan(self.n_layers, self.partition, self.include_embeddings)


def sinusoidal_encoding(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    dim = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (dim // 2 * 2) / d_model)
    enc = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return np.ascontiguousarray(enc)


def init_params(cfg: ModelConfig, rng: Rng) -> ParamSet:
    """Deterministic parameter initialization keyed by dotted names."""
    params = ParamSet()
    emb_rng = rng.stream_named("emb.table")
    params["emb.table"] = emb_rng.normal(
        cfg.vocab_size, cfg.d_model, std=1.0 / math.sqrt(cfg.d_model)
    )
    if cfg.task == TASK_CLASSIFIER:
        params["emb.cls"] = rng.stream_named("emb.cls").normal(
            1, cfg.d_model, std=1.0 / math.sqrt(cfg.d_model)
        )
    plan = cfg.plan()
    for i, entry in enumerate(plan.schedule):
        prefix = f"layers.{i}"
        layer_rng = rng.stream_named(prefix)
        for k, v in init_mha(layer_rng.stream_named("attn"), cfg.d_model, cfg.n_heads).items():
            params[f"{prefix}.attn.{k}"] = v
        for k, v in init_ffn(layer_rng.stream_named("ffn"), cfg.d_model, cfg.d_ff).items():
            params[f"{prefix}.ffn.{k}"] = v
        if entry.kind == "omni":
            g = len(entry.consumes)
            if isinstance(cfg.backend, LowRankBackend):
                rows = g * cfg.max_len
                params[f"{prefix}.lowrank_w"] = layer_rng.stream_named("lowrank_w").normal(
                    rows, cfg.backend.k, std=1.0 / math.sqrt(rows)
                )
            if cfg.layer_embedding:
                params[f"{prefix}.layer_emb"] = layer_rng.stream_named("layer_emb").normal(
                    g, cfg.d_model, std=1.0 / math.sqrt(cfg.d_model)
                )
    head_rng = rng.stream_named("head")
    n_out = cfg.vocab_size if cfg.task == TASK_LM else cfg.n_classes
    params["head.w"] = head_rng.stream_named("w").normal(
        cfg.d_model, n_out, std=1.0 / math.sqrt(cfg.d_model)
    )
    params["head.b"] = np.zeros(n_out)
    return params


@dataclass
class OmniLayerDiag:
    layer: int  # 1-based layer index in the schedule
    consumed: tuple[int, ...]
    pool: PoolStats
    maps: list[np.ndarray] | None


def _check_blocksparse_lengths(cfg: ModelConfig, n_rows: int) -> None:
    if not isinstance(cfg.backend, BlockSparseBackend):
        return
    bs = cfg.backend.block_size
    for entry in cfg.plan().schedule:
        if entry.kind == "omni":
            grid = len(entry.consumes) * n_rows
            if grid % bs != 0:
                raise ConfigError(
                    f"block-sparse grid length {grid} not divisible by block_size {bs};"
                    " choose a compatible block_size or sequence length"
                )


def _run_spine(
    tape: Tape,
    params: ParamSet,
    cfg: ModelConfig,
    rows: Var,
    causal: bool,
    diag: list[OmniLayerDiag] | None,
    map_mode: str | None,
    drop_rng: Rng | None,
) -> Var:
    n = rows.shape[0]
    plan = cfg.plan()
    mask = build_causal_mask(n) if causal else None
    outputs = [rows]  # index 0 is the embedding output
    x = rows
    for i, entry in enumerate(plan.schedule):
        prefix = f"layers.{i}"
        drop = None
        if cfg.dropout_rate > 0.0 and drop_rng is not None:
            drop = Dropout(cfg.dropout_rate, drop_rng.stream(i))
        if entry.kind == "transformer":
            attn = bind_mha(tape, params, f"{prefix}.attn", cfg.n_heads)
            ffn = bind_ffn(tape, params, f"{prefix}.ffn")
            x = ffn_block(
                exact_mha_block(x, attn, mask, cfg.ln_placement, drop),
                ffn,
                cfg.ln_placement,
                drop,
            )
        else:
            stack = LayerStack(
                [outputs[j] for j in entry.consumes], list(entry.consumes)
            )
            op = OmniParams(
                attn=bind_mha(tape, params, f"{prefix}.attn", cfg.n_heads),
                ffn=bind_ffn(tape, params, f"{prefix}.ffn"),
            )
            if isinstance(cfg.backend, LowRankBackend):
                op.lowrank_w = tape.param(
                    f"{prefix}.lowrank_w", params[f"{prefix}.lowrank_w"]
                )
            if cfg.layer_embedding:
                op.layer_emb = tape.param(
                    f"{prefix}.layer_emb", params[f"{prefix}.layer_emb"]
                )
            pooled, stats, maps = omni_block(
                stack,
                cfg.backend,
                op,
                causal,
                ln_placement=cfg.ln_placement,
                drop=drop,
                map_mode=map_mode,
            )
            if diag is not None:
                diag.append(OmniLayerDiag(i + 1, entry.consumes, stats, maps))
            # the pooled residual mirrors the final combine; a single-layer
            # stack is already a plain block, so no extra skip there
            if cfg.omni_residual and stack.depth >= 2:
                x = ag.add(pooled, x)
            else:
                x = pooled
        outputs.append(x)
    return x


def _embed(tape: Tape, params: ParamSet, cfg: ModelConfig, tokens: np.ndarray, with_cls: bool) -> Var:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ValueError(f"tokens must be a 1-D sequence, got shape {tokens.shape}")
    if tokens.size < 1:
        raise ValueError("empty token sequence")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id outside vocabulary")
    n_rows = tokens.size + (1 if with_cls else 0)
    if n_rows > cfg.max_len:
        raise ValueError(f"sequence of {n_rows} rows exceeds max_len {cfg.max_len}")
    table = tape.param("emb.table", params["emb.table"])
    rows = ag.take_rows(table, tokens)
    if with_cls:
        cls = tape.param("emb.cls", params["emb.cls"])
        rows = ag.concat_rows([cls, rows])
    rows = ag.scale(rows, math.sqrt(cfg.d_model))
    pos = sinusoidal_encoding(cfg.max_len, cfg.d_model)[:n_rows]
    return ag.add(rows, tape.constant(pos))


def forward_lm(
    tape: Tape,
    params: ParamSet,
    cfg: ModelConfig,
    tokens: np.ndarray,
    *,
    diag: list[OmniLayerDiag] | None = None,
    map_mode: str | None = None,
    drop_rng: Rng | None = None,
) -> Var:
    """Next-token logits [N x vocab]; position i depends only on tokens <= i."""
    if cfg.task != TASK_LM:
        raise ConfigError("forward_lm requires an lm-task config")
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_blocksparse_lengths(cfg, tokens.size)
    rows = _embed(tape, params, cfg, tokens, with_cls=False)
    x = _run_spine(tape, params, cfg, rows, True, diag, map_mode, drop_rng)
    w = tape.param("head.w", params["head.w"])
    b = tape.param("head.b", params["head.b"])
    return ag.add_rowvec(x @ w, b)


def forward_classifier(
    tape: Tape,
    params: ParamSet,
    cfg: ModelConfig,
    tokens: np.ndarray,
    *,
    diag: list[OmniLayerDiag] | None = None,
    map_mode: str | None = None,
    drop_rng: Rng | None = None,
) -> Var:
    """Class logits [1 x n_classes] read from the CLS row; attention unmasked."""
    if cfg.task != TASK_CLASSIFIER:
        raise ConfigError("forward_classifier requires a classifier-task config")
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_blocksparse_lengths(cfg, tokens.size + 1)
    rows = _embed(tape, params, cfg, tokens, with_cls=True)
    x = _run_spine(tape, params, cfg, rows, False, diag, map_mode, drop_rng)
    cls_row = ag.slice_rows(x, 0, 1)
    w = tape.param("head.w", params["head.w"])
    b = tape.param("head.b", params["head.b"])
    return ag.add_rowvec(cls_row @ w, b)


def param_count(params: ParamSet) -> tuple[dict[str, int], int]:
    """Parameter census grouped by name prefix (layers.N kept per layer)."""
    groups: dict[str, int] = {}
    total = 0
    for name, value in params.items():
        parts = name.split(".")
        prefix = ".".join(parts[:2]) if parts[0] == "layers" else parts[0]
        groups[prefix] = groups.get(prefix, 0) + value.size
        total += value.size
    return groups, total


# --- checkpoint io -----------------------------------------------------------


def save_checkpoint(path: str | Path, config: dict, params: ParamSet) -> Path:
    """Single-file checkpoint: length-prefixed config JSON, then per tensor a
    length-prefixed name, the shape, and raw little-endian float64 data.
    A JSON manifest with names/shapes/byte offsets is written alongside."""
    path = Path(path)
    buf = BytesIO()
    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(config_bytes)))
    buf.write(config_bytes)
    manifest = {"config_bytes": len(config_bytes), "tensors": []}
    for name in params:
        value = params[name]
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<I", value.ndim))
        for extent in value.shape:
            buf.write(struct.pack("<Q", extent))
        offset = buf.tell()
        buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
        manifest["tensors"].append(
            {"name": name, "shape": list(value.shape), "offset": offset}
        )
    path.write_bytes(buf.getvalue())
    manifest_path = path.with_name(path.name + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, ParamSet]:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise ValueError(f"truncated checkpoint {path}")
        out = view[pos : pos + n].tobytes()
        pos += n
        return out

    (config_len,) = struct.unpack("<I", take(4))
    config = json.loads(take(config_len).decode("utf-8"))
    params = ParamSet()
    while pos < len(raw):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(count * 8), dtype="<f8").reshape(shape)
        params[name] = np.ascontiguousarray(data)
    return config, params
