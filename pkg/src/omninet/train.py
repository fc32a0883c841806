"""Optimizer, synthetic tasks, byte-level text ingestion, training loop, metrics.

Tasks are desk-scale stand-ins for large corpora: copy/reverse sequence tasks
and next-byte prediction over a text file for the LM, and a marked-token
classification task for the encoder. Datasets are fully reproducible from the
task seed; the training loop walks a pregenerated pool in a fixed order so a
rerun with the same seed emits identical metrics.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import ParamSet, Tape, backward
from .model import (
    TASK_CLASSIFIER,
    TASK_LM,
    ModelConfig,
    forward_classifier,
    forward_lm,
    init_params,
)
from .omni import ConfigError
from .tensor import Rng


class TrainError(RuntimeError):
    """Non-finite loss or gradient during optimization."""


BOS_BYTE = 256  # char-lm vocabulary is 256 byte values plus this start marker
CHAR_LM_VOCAB = 257

TASK_KINDS = ("copy", "reverse", "char_lm", "marked_token")


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    seq_len: int
    vocab_size: int
    train_size: int
    eval_size: int
    seed: int
    path: str | None = None  # char_lm text file
    mark_pos: int | None = None  # marked_token label position

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be >= 1")
        if self.kind == "char_lm":
            if self.vocab_size != CHAR_LM_VOCAB:
                raise ConfigError(f"char_lm requires vocab_size {CHAR_LM_VOCAB}")
            if not self.path:
                raise ConfigError("char_lm requires a text path")
        elif self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.kind == "marked_token":
            pos = self.seq_len // 2 if self.mark_pos is None else self.mark_pos
            if not 0 <= pos < self.seq_len:
                raise ConfigError(f"mark_pos {pos} outside sequence")

    @property
    def marked_position(self) -> int:
        return self.seq_len // 2 if self.mark_pos is None else self.mark_pos

    @property
    def is_lm(self) -> bool:
        return self.kind in ("copy", "reverse", "char_lm")


def char_windows(data: bytes, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping byte windows: floor(len/seq_len) examples.

    Inputs are BOS-prefixed so every byte of a window is predicted:
    input [BOS, b0 .. b_{n-2}] -> target [b0 .. b_{n-1}].
    """
    if not data:
        raise OSError("char_lm: empty text")
    n_windows = len(data) // seq_len
    if n_windows < 1:
        raise OSError(f"char_lm: text shorter than one window of {seq_len}")
    arr = np.frombuffer(data[: n_windows * seq_len], dtype=np.uint8)
    windows = arr.reshape(n_windows, seq_len).astype(np.int64)
    inputs = np.concatenate(
        [np.full((n_windows, 1), BOS_BYTE, dtype=np.int64), windows[:, :-1]], axis=1
    )
    return inputs, windows


def make_batch(task: TaskSpec, rng: Rng, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw `size` examples from the task's generator stream."""
    if size < 1:
        raise ValueError("batch size must be >= 1")
    if task.kind == "copy":
        inputs = rng.integers(0, task.vocab_size, (size, task.seq_len))
        return inputs, inputs.copy()
    if task.kind == "reverse":
        inputs = rng.integers(0, task.vocab_size, (size, task.seq_len))
        return inputs, inputs[:, ::-1].copy()
    if task.kind == "marked_token":
        inputs = rng.integers(0, task.vocab_size, (size, task.seq_len))
        return inputs, inputs[:, task.marked_position].copy()
    # char_lm: sample windows from the file
    try:
        data = Path(task.path).read_bytes()
    except OSError as exc:
        raise OSError(f"char_lm: cannot read {task.path}: {exc}") from exc
    inputs, targets = char_windows(data, task.seq_len)
    picked = rng.integers(0, inputs.shape[0], size)
    return inputs[picked], targets[picked]


def load_pools(task: TaskSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic train/eval pools. char_lm splits the file's windows in
    order (train first, eval last) so the two pools never overlap."""
    if task.kind == "char_lm":
        data = Path(task.path).read_bytes()
        inputs, targets = char_windows(data, task.seq_len)
        if task.train_size + task.eval_size > inputs.shape[0]:
            raise OSError(
                f"char_lm: {inputs.shape[0]} windows cannot cover "
                f"train {task.train_size} + eval {task.eval_size}"
            )
        return (
            inputs[: task.train_size],
            targets[: task.train_size],
            inputs[-task.eval_size :],
            targets[-task.eval_size :],
        )
    base = Rng(task.seed).stream_named("task")
    train_x, train_y = make_batch(task, base.stream(1), task.train_size)
    eval_x, eval_y = make_batch(task, base.stream(2), task.eval_size)
    return train_x, train_y, eval_x, eval_y


# --- optimizer ---------------------------------------------------------------


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int = 200
    max_steps: int = 2000
    schedule: str = "warmup-linear"  # or "constant"

    def __post_init__(self):
        if self.schedule not in ("warmup-linear", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")


class AdamState:
    """Bias-corrected Adam with decoupled weight decay and a warmup/decay LR."""

    def __init__(self, params: ParamSet, cfg: OptimConfig):
        self.cfg = cfg
        self.step = 0
        self.m = {name: np.zeros_like(params[name]) for name in params}
        self.v = {name: np.zeros_like(params[name]) for name in params}

    def current_lr(self) -> float:
        if self.cfg.schedule == "constant":
            return self.cfg.lr
        t = self.step
        if self.cfg.warmup_steps > 0 and t <= self.cfg.warmup_steps:
            return self.cfg.lr * t / self.cfg.warmup_steps
        span = max(self.cfg.max_steps - self.cfg.warmup_steps, 1)
        return self.cfg.lr * max(self.cfg.max_steps - t, 0) / span


def adam_step(state: AdamState, params: ParamSet, grads: dict[str, np.ndarray]) -> None:
    """One in-place update. Raises TrainError on a non-finite gradient."""
    cfg = state.cfg
    state.step += 1
    lr = state.current_lr()
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name in params:
        g = grads[name]
        if not np.isfinite(g).all():
            raise TrainError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.weight_decay > 0.0:
            update = update + cfg.weight_decay * params[name]
        params[name] -= lr * update


# --- losses and metrics ------------------------------------------------------


def sequence_loss(logits: ag.Var, targets: np.ndarray) -> ag.Var:
    """Mean cross-entropy of row-wise logits against integer targets."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    picked = ag.pick_per_row(ag.log_softmax_rows(logits), targets)
    return ag.scale(ag.sum_all(picked), -1.0 / targets.size)


def example_loss(
    tape: Tape, params: ParamSet, cfg: ModelConfig, x: np.ndarray, y: np.ndarray, drop_rng=None
) -> ag.Var:
    if cfg.task == TASK_LM:
        logits = forward_lm(tape, params, cfg, x, drop_rng=drop_rng)
        return sequence_loss(logits, y)
    logits = forward_classifier(tape, params, cfg, x, drop_rng=drop_rng)
    return sequence_loss(logits, np.array([y]))


def evaluate(
    params: ParamSet,
    cfg: ModelConfig,
    task: TaskSpec,
    inputs: np.ndarray | None = None,
    targets: np.ndarray | None = None,
) -> dict[str, float]:
    """token_accuracy, cross_entropy and perplexity over the eval pool."""
    if inputs is None or targets is None:
        _, _, inputs, targets = load_pools(task)
    total_ce = 0.0
    correct = 0
    count = 0
    for x, y in zip(inputs, targets):
        tape = Tape()
        if cfg.task == TASK_LM:
            logits = forward_lm(tape, params, cfg, x).value
            y_arr = np.asarray(y).reshape(-1)
        else:
            logits = forward_classifier(tape, params, cfg, x).value
            y_arr = np.array([y])
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        total_ce += -logp[np.arange(y_arr.size), y_arr].sum()
        correct += int((logits.argmax(axis=1) == y_arr).sum())
        count += y_arr.size
    ce = float(total_ce / count)
    return {
        "token_accuracy": correct / count,
        "cross_entropy": ce,
        "perplexity": math.exp(ce),
    }


# --- training loop -----------------------------------------------------------


@dataclass(frozen=True)
class TrainSettings:
    batch_size: int = 8
    eval_every: int = 200
    stop_accuracy: float | None = None  # early stop once eval accuracy reaches this
    stop_loss: float | None = None  # ... and eval cross-entropy is at or below this


@dataclass
class TrainResult:
    params: ParamSet
    records: list[dict]

    @property
    def final(self) -> dict:
        return self.records[-1]


def train_model(
    cfg: ModelConfig,
    task: TaskSpec,
    optim: OptimConfig,
    settings: TrainSettings = TrainSettings(),
    seed: int = 0,
    on_eval: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Full training run with periodic evaluation records.

    Gradient accumulation order inside a batch is the pool order, fixed by the
    seed; metrics records are identical across reruns apart from wall_ms.
    """
    if task.is_lm != (cfg.task == TASK_LM):
        raise ConfigError(f"task kind {task.kind!r} does not match model task {cfg.task!r}")
    params = init_params(cfg, Rng(seed).stream_named("init"))
    train_x, train_y, eval_x, eval_y = load_pools(task)
    state = AdamState(params, optim)
    records: list[dict] = []
    started = time.perf_counter()

    def run_eval(step: int) -> dict:
        metrics = evaluate(params, cfg, task, eval_x, eval_y)
        record = {
            "step": step,
            "loss": metrics["cross_entropy"],
            "accuracy": metrics["token_accuracy"],
            "perplexity": metrics["perplexity"],
            "wall_ms": (time.perf_counter() - started) * 1e3,
        }
        records.append(record)
        if on_eval is not None:
            on_eval(record)
        return record

    def should_stop(record: dict) -> bool:
        if settings.stop_accuracy is None:
            return False
        if record["accuracy"] < settings.stop_accuracy:
            return False
        return settings.stop_loss is None or record["loss"] <= settings.stop_loss

    record = run_eval(0)
    if not should_stop(record):
        n_train = train_x.shape[0]
        drop_base = Rng(seed).stream_named("dropout")
        for step in range(1, optim.max_steps + 1):
            idx = (np.arange(settings.batch_size) + (step - 1) * settings.batch_size) % n_train
            tape = Tape()
            losses = []
            for j, i in enumerate(idx):
                drop_rng = None
                if cfg.dropout_rate > 0.0:
                    drop_rng = drop_base.stream(step).stream(j)
                losses.append(example_loss(tape, params, cfg, train_x[i], train_y[i], drop_rng))
            total = losses[0]
            for piece in losses[1:]:
                total = ag.add(total, piece)
            loss = ag.scale(total, 1.0 / len(losses))
            if not np.isfinite(loss.value):
                raise TrainError(f"loss became non-finite at step {step}")
            adam_step(state, params, backward(loss))
            if step % settings.eval_every == 0 or step == optim.max_steps:
                record = run_eval(step)
                if should_stop(record):
                    break
    return TrainResult(params, records)
